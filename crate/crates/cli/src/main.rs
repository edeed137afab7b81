use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eisopt::design::{run_design, DesignSummary};
use eisopt::estimation::{estimate, FitOptions};
use eisopt::frequency::Reduction;
use eisopt::information::normalized_volume;
use eisopt::measurement::{noiseless, Source};
use eisopt::sweep::{crlb_sweep, write_sweep_csv, SweepSpec};
use eisopt::{fisher, synthesize, total_time, CellState, Coordinates, Error, FrequencyGrid, Result, Spacing, Spectrum};
use serde::Serialize;

mod config;

use config::{sha256_file, ExperimentConfig, Fixture};

const OUT_DIR_ENV: &str = "EISOPT_OUT_DIR";

#[derive(Parser)]
#[command(name = "eisopt", version, about = "EIS simulation, fitting, Cramér-Rao bounds and E-optimal frequency design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a noisy spectrum from the configured cell and grid.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Write the model evaluation without noise.
        #[arg(long)]
        noiseless: bool,
    },
    /// Fit the equivalent circuit to a spectrum CSV.
    Fit {
        /// Spectrum CSV (f_hz, mag_ohm, phase_deg, sigma_mag_ohm, sigma_phase_deg).
        spectrum: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Normalized CRLB for each (threshold, reduced PPD) pair.
    CrlbSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated thresholds (Hz).
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// Comma-separated reduced PPD values.
        #[arg(long, value_delimiter = ',')]
        ppds: Option<Vec<u32>>,
    },
    /// Run the frequency-adjustment loop.
    Design {
        #[command(flatten)]
        common: Common,
        /// Comma-separated reduced PPD values, one run each.
        #[arg(long, value_delimiter = ',')]
        ppds: Option<Vec<u32>>,
        #[arg(long)]
        max_iterations: Option<usize>,
        /// Total-time budget (s).
        #[arg(long)]
        time_budget: Option<f64>,
        /// Lowest admissible frequency (Hz).
        #[arg(long)]
        floor: Option<f64>,
        /// Let the first and last frequency move.
        #[arg(long)]
        unfreeze_endpoints: bool,
        /// Seed of the re-measurement streams.
        #[arg(long)]
        design_seed: Option<u64>,
    },
    /// Uncertainty report for the configured grid, or for a fitted spectrum.
    Report {
        #[command(flatten)]
        common: Common,
        /// Fit this spectrum and report at the estimate on its grid.
        #[arg(long)]
        spectrum: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config value, then $EISOPT_OUT_DIR, then `.`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Named fixture (state_a, state_b).
    #[arg(long)]
    state: Option<CellState>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    f_start: Option<f64>,
    #[arg(long)]
    f_end: Option<f64>,
    #[arg(long)]
    ppd: Option<u32>,
    /// uniform or decade_inclusive.
    #[arg(long)]
    spacing: Option<Spacing>,
    /// Reduce the PPD at and below this frequency (Hz).
    #[arg(long)]
    threshold: Option<f64>,
    /// Density below the threshold.
    #[arg(long)]
    reduced_ppd: Option<u32>,
    /// Number of periods measured per frequency.
    #[arg(long)]
    periods: Option<u32>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.state {
            c.cell = Fixture::Named(s);
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(v) = self.f_start {
            c.grid.f_start = v;
        }
        if let Some(v) = self.f_end {
            c.grid.f_end = v;
        }
        if let Some(v) = self.ppd {
            c.grid.ppd = v;
        }
        if let Some(v) = self.spacing {
            c.grid.spacing = v;
        }
        if let Some(p) = self.periods {
            c.periods = p;
            c.design.periods = p;
        }
        match (self.threshold, self.reduced_ppd) {
            (None, None) => {}
            (t, p) => {
                let last = c.grid.reductions.last().copied();
                let threshold_hz = t.or(last.map(|r| r.threshold_hz)).ok_or_else(|| {
                    Error::Domain("--reduced-ppd needs --threshold or a configured reduction".into())
                })?;
                // A bare threshold keeps the base density; `design --ppds` still reads it.
                let ppd = p.or(last.map(|r| r.ppd)).unwrap_or(c.grid.ppd);
                c.grid.reductions = vec![Reduction { threshold_hz, ppd }];
            }
        }
        if let Some(d) = &self.out_dir {
            c.output_dir = Some(d.clone());
        }
        Ok(c)
    }
}

#[derive(Debug, Serialize)]
struct Provenance {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_sha256: String,
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_sha256: Option<String>,
}

impl Provenance {
    fn new(command: &'static str, config: &ExperimentConfig, seed: Option<u64>) -> Self {
        Provenance {
            tool: "eisopt",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: config.hash(),
            seed,
            input_sha256: None,
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec![
            format!("{} {} {}", self.tool, self.version, self.command),
            format!("config_sha256 {}", self.config_sha256),
            format!("seed {}", self.seed.map_or("none".into(), |s| s.to_string())),
        ];
        if let Some(i) = &self.input_sha256 {
            h.push(format!("input_sha256 {i}"));
        }
        h
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: T,
}

struct Output {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Output {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        let dir = config
            .output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)?;
        Ok(Output { dir, written: Vec::new() })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.written.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, prov: &Provenance, body: T) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, &Stamped { provenance: prov, body })?;
            writeln!(w)?;
            Ok(())
        })
    }

    /// For tables whose writer takes no header of its own.
    fn csv_with_header(
        &mut self,
        name: &str,
        prov: &Provenance,
        f: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
    ) -> Result<()> {
        self.write(name, |w| {
            for h in prov.header() {
                writeln!(w, "# {h}")?;
            }
            f(w)
        })
    }

    fn report(&self) {
        for p in &self.written {
            println!("{}", p.display());
        }
    }
}

fn read_spectrum(path: &Path) -> Result<Spectrum> {
    let file = File::open(path).map_err(|e| Error::Domain(format!("cannot open {}: {e}", path.display())))?;
    Spectrum::read_csv(BufReader::new(file), Source::File { path: path.display().to_string() })
}

fn cmd_synth(common: &Common, noiseless_flag: bool) -> Result<()> {
    let mut config = common.resolve()?;
    config.noiseless |= noiseless_flag;
    config.validate()?;
    let theta = config.cell.theta();
    let grid = config.grid.build()?;
    let (spec, seed) = if config.noiseless {
        (noiseless(&theta, &grid, &config.error)?, None)
    } else {
        (synthesize(&theta, &grid, &config.error, config.seed)?, Some(config.seed))
    };
    let prov = Provenance::new("synth", &config, seed);
    let mut out = Output::new(&config)?;
    out.write("spectrum.csv", |w| spec.write_csv(w, &prov.header()))?;
    out.json("spectrum.json", &prov, &spec)?;
    out.report();
    Ok(())
}

#[derive(Serialize)]
struct FitReport {
    fit: eisopt::estimation::FitResult,
    uncertainty: eisopt::UncertaintyReport,
}

fn cmd_fit(spectrum: &Path, common: &Common) -> Result<()> {
    let config = common.resolve()?;
    config.validate()?;
    let spec = read_spectrum(spectrum)?;
    let fit = estimate(&spec, &FitOptions::default())?;
    let info = fisher(&fit.theta, &spec.grid(), &config.error, config.include_trace_term);
    let uncertainty = info.report(Coordinates::Log)?;
    let mut prov = Provenance::new("fit", &config, None);
    prov.input_sha256 = Some(sha256_file(spectrum)?);
    let mut out = Output::new(&config)?;
    out.csv_with_header("fit.csv", &prov, |w| uncertainty.write_csv(w, &fit.theta))?;
    out.json("fit.json", &prov, FitReport { fit: fit.clone(), uncertainty })?;
    out.report();
    if !fit.converged {
        return Err(Error::Fit(format!("stopped by {:?} after {} iterations", fit.termination, fit.iterations)));
    }
    Ok(())
}

fn cmd_sweep(common: &Common, thresholds: &Option<Vec<f64>>, ppds: &Option<Vec<u32>>) -> Result<()> {
    let mut config = common.resolve()?;
    if let Some(t) = thresholds {
        config.sweep.thresholds_hz = t.clone();
    }
    if let Some(p) = ppds {
        config.sweep.ppds = p.clone();
    }
    config.validate()?;
    let spec = SweepSpec {
        f_start: config.grid.f_start,
        f_end: config.grid.f_end,
        base_ppd: config.grid.ppd,
        spacing: config.grid.spacing,
        thresholds_hz: config.sweep.thresholds_hz.clone(),
        ppds: config.sweep.ppds.clone(),
        include_trace_term: config.include_trace_term,
    };
    let cells = crlb_sweep(&config.cell.theta(), &spec, &config.error, config.design.execution)?;
    let prov = Provenance::new("crlb-sweep", &config, None);
    let mut out = Output::new(&config)?;
    out.write("crlb_sweep.csv", |w| write_sweep_csv(&cells, w, &prov.header()))?;
    out.report();
    Ok(())
}

struct DesignFlags<'a> {
    ppds: &'a Option<Vec<u32>>,
    max_iterations: Option<usize>,
    time_budget: Option<f64>,
    floor: Option<f64>,
    unfreeze_endpoints: bool,
    design_seed: Option<u64>,
}

fn cmd_design(common: &Common, flags: DesignFlags) -> Result<()> {
    let mut config = common.resolve()?;
    if let Some(p) = flags.ppds {
        config.design_ppds = p.clone();
    }
    if let Some(n) = flags.max_iterations {
        config.design.max_iterations = n;
    }
    if let Some(b) = flags.time_budget {
        config.design.time_budget_s = Some(b);
    }
    if let Some(f) = flags.floor {
        config.design.floor_hz = Some(f);
    }
    if flags.unfreeze_endpoints {
        config.design.freeze_endpoints = false;
    }
    if let Some(s) = flags.design_seed {
        config.design.seed = s;
    }
    config.design.periods = config.periods;
    config.design.reference_ppd = config.grid.ppd;
    config.design.reference_spacing = config.grid.spacing;
    config.design.include_trace_term = config.include_trace_term;
    config.validate()?;

    let theta = config.cell.theta();
    let grids: Vec<FrequencyGrid> = if config.design_ppds.is_empty() {
        vec![config.grid.build()?]
    } else {
        let threshold = config.grid.reductions.last().map_or(0.1, |r| r.threshold_hz);
        let base = config.grid.base()?;
        config.design_ppds.iter().map(|&p| base.reduce_ppd(threshold, p)).collect::<Result<_>>()?
    };

    let prov = Provenance::new("design", &config, Some(config.seed));
    let mut out = Output::new(&config)?;
    let mut rows = Vec::new();
    for grid in &grids {
        let spec = if config.noiseless {
            noiseless(&theta, grid, &config.error)?
        } else {
            synthesize(&theta, grid, &config.error, config.seed)?
        };
        let mut trace = run_design(&spec, &theta, &config.error, &config.design)?;
        if let Some(r) = grid.reductions().last() {
            trace.ppd = Some(r.ppd);
            trace.threshold_hz = Some(r.threshold_hz);
        } else {
            trace.ppd = grid.ppd();
        }
        let tag = trace.ppd.map_or("grid".to_string(), |p| format!("ppd{p}"));
        out.write(&format!("design_{tag}.jsonl"), |w| {
            serde_json::to_writer(&mut *w, &serde_json::json!({ "provenance": &prov, "termination": trace.termination, "diagnostic": trace.diagnostic, "reference_time_s": trace.reference_time_s }))?;
            writeln!(w)?;
            trace.write_jsonl(w)
        })?;
        out.write(&format!("design_{tag}.csv"), |w| trace.write_csv(w, &prov.header()))?;
        if let Some(d) = &trace.diagnostic {
            eprintln!("design {tag}: {d}");
        }
        rows.push(trace.summary());
    }
    out.write("design_summary.csv", |w| DesignSummary::write_csv(&rows, w, &prov.header()))?;
    out.report();
    Ok(())
}

#[derive(Serialize)]
struct GridReport {
    theta: eisopt::ParameterVector,
    frequencies: Vec<f64>,
    total_time_s: f64,
    reference_time_s: f64,
    /// Ellipsoid volume relative to the unreduced grid.
    normalized_volume: f64,
    uncertainty: eisopt::UncertaintyReport,
}

fn cmd_report(common: &Common, spectrum: &Option<PathBuf>) -> Result<()> {
    let config = common.resolve()?;
    config.validate()?;
    let (theta, grid, input) = match spectrum {
        Some(p) => {
            let spec = read_spectrum(p)?;
            let fit = estimate(&spec, &FitOptions::default())?;
            (fit.theta, spec.grid(), Some(sha256_file(p)?))
        }
        None => (config.cell.theta(), config.grid.build()?, None),
    };
    let reference = FrequencyGrid::spaced(grid.f_start(), grid.f_end(), config.grid.ppd, config.grid.spacing)?;
    let info = fisher(&theta, &grid, &config.error, config.include_trace_term);
    let uncertainty = info.report(Coordinates::Log)?;
    let reference_volume = fisher(&theta, &reference, &config.error, config.include_trace_term).log_volume(Coordinates::Log)?;
    let report = GridReport {
        theta,
        frequencies: grid.frequencies().to_vec(),
        total_time_s: total_time(&grid, config.periods)?,
        reference_time_s: total_time(&reference, config.periods)?,
        normalized_volume: normalized_volume(uncertainty.log_volume, reference_volume),
        uncertainty,
    };
    let mut prov = Provenance::new("report", &config, None);
    prov.input_sha256 = input;
    let mut out = Output::new(&config)?;
    out.csv_with_header("report.csv", &prov, |w| report.uncertainty.write_csv(w, &theta))?;
    out.json("report.json", &prov, &report)?;
    out.report();
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { common, noiseless } => cmd_synth(common, *noiseless),
        Command::Fit { spectrum, common } => cmd_fit(spectrum, common),
        Command::CrlbSweep { common, thresholds, ppds } => cmd_sweep(common, thresholds, ppds),
        Command::Design { common, ppds, max_iterations, time_budget, floor, unfreeze_endpoints, design_seed } => cmd_design(
            common,
            DesignFlags {
                ppds,
                max_iterations: *max_iterations,
                time_budget: *time_budget,
                floor: *floor,
                unfreeze_endpoints: *unfreeze_endpoints,
                design_seed: *design_seed,
            },
        ),
        Command::Report { common, spectrum } => cmd_report(common, spectrum),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
