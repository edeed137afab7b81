//! E-optimal frequency adjustment.
//!
//! Each outer iteration fits `θ̂`, finds the movable frequency whose small
//! log-frequency perturbation raises `λ_min(F(θ̂))` the most, hill-climbs that
//! frequency, and re-measures the spectrum there. The grid keeps its size.
//!
//! Within an iteration `θ̂` is held fixed and the information matrix is
//! updated by swapping a single point's contribution.

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{estimate, fit_wcnls, FitOptions};
use crate::frequency::{total_time_of, FrequencyGrid, Spacing};
use crate::information::{lambda_min, log_volume_matrix, point_matrix, Coordinates};
use crate::measurement::{measure_point, ErrorStructure, Spectrum};
use crate::numeric::pairwise_reduce;
use crate::par::Execution;
use crate::params::ParameterVector;

/// Two grid points closer than this (decades) count as a collision.
pub const MIN_SEPARATION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignConfig {
    pub max_iterations: usize,
    /// Scan perturbation, decades.
    pub scan_step: f64,
    /// Hill-climb step, decades.
    pub initial_step: f64,
    pub shrink: f64,
    pub min_step: f64,
    /// Relative `λ_min` gain required to accept a hill-climb move.
    pub improvement_tolerance: f64,
    /// Lowest admissible frequency; the grid's `f_end` when unset.
    pub floor_hz: Option<f64>,
    /// Highest admissible frequency; the grid's `f_start` when unset.
    pub ceiling_hz: Option<f64>,
    /// Upper bound on total measurement time (s).
    pub time_budget_s: Option<f64>,
    /// Forbid moves that end below this frequency while lowering a point.
    pub no_decrease_below_hz: Option<f64>,
    pub freeze_endpoints: bool,
    /// Additional frozen frequencies (Hz).
    pub frozen_hz: Vec<f64>,
    pub coordinates: Coordinates,
    pub include_trace_term: bool,
    pub periods: u32,
    /// Density of the full grid that defines one per-unit of volume and time.
    pub reference_ppd: u32,
    pub reference_spacing: Spacing,
    /// Seeds the re-measurement streams (one stream per iteration).
    pub seed: u64,
    pub fit: FitOptions,
    pub execution: Execution,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            max_iterations: 60,
            scan_step: 0.01,
            initial_step: 0.05,
            shrink: 0.5,
            min_step: 1e-4,
            improvement_tolerance: 1e-9,
            floor_hz: None,
            ceiling_hz: None,
            time_budget_s: None,
            no_decrease_below_hz: None,
            freeze_endpoints: true,
            frozen_hz: Vec::new(),
            coordinates: Coordinates::Log,
            include_trace_term: true,
            periods: 5,
            reference_ppd: 10,
            reference_spacing: Spacing::DecadeInclusive,
            seed: 0,
            fit: FitOptions::default(),
            execution: Execution::default(),
        }
    }
}

impl DesignConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("scan_step", self.scan_step),
            ("initial_step", self.initial_step),
            ("min_step", self.min_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::domain(format!("shrink must lie in (0, 1), got {}", self.shrink)));
        }
        if !(self.improvement_tolerance >= 0.0) {
            return Err(Error::domain("improvement_tolerance must be non-negative"));
        }
        for (name, v) in [("floor_hz", self.floor_hz), ("ceiling_hz", self.ceiling_hz), ("time_budget_s", self.time_budget_s)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::domain(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if let (Some(lo), Some(hi)) = (self.floor_hz, self.ceiling_hz) {
            if lo >= hi {
                return Err(Error::domain("floor_hz must be below ceiling_hz"));
            }
        }
        if self.periods == 0 {
            return Err(Error::domain("periods must be at least 1"));
        }
        self.reference_spacing.step(self.reference_ppd)?;
        Ok(())
    }

    fn band(&self, grid: &FrequencyGrid) -> Band {
        Band {
            lo: self.floor_hz.unwrap_or(grid.f_end()).log10(),
            hi: self.ceiling_hz.unwrap_or(grid.f_start()).log10(),
        }
    }

    fn is_frozen(&self, grid: &FrequencyGrid, index: usize) -> bool {
        let f = grid.frequencies()[index];
        (self.freeze_endpoints && (index == 0 || index + 1 == grid.len()))
            || self.frozen_hz.iter().any(|g| (g.log10() - f.log10()).abs() < 1e-9)
    }

    fn climb_options(&self) -> ClimbOptions {
        ClimbOptions {
            initial_step: self.initial_step,
            shrink: self.shrink,
            min_step: self.min_step,
            tolerance: self.improvement_tolerance,
        }
    }
}

/// Admissible log10-frequency interval.
#[derive(Debug, Clone, Copy)]
struct Band {
    lo: f64,
    hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClimbOptions {
    pub initial_step: f64,
    pub shrink: f64,
    pub min_step: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Climb {
    pub x: f64,
    pub value: f64,
    pub moved: bool,
    /// The last accepted move was clamped to `lo`.
    pub lower_limited: bool,
    pub evaluations: usize,
}

/// One-dimensional pattern search maximizing `f` on `[lo, hi]`, starting at
/// `x0` with known value `f0`. `f` returns `None` for infeasible points. The
/// last successful direction is tried first; the step shrinks when neither
/// direction gains more than `tolerance · |value|`.
pub fn hill_climb<F: FnMut(f64) -> Option<f64>>(
    x0: f64,
    f0: f64,
    lo: f64,
    hi: f64,
    opts: &ClimbOptions,
    mut f: F,
) -> Climb {
    let mut c = Climb { x: x0, value: f0, moved: false, lower_limited: false, evaluations: 0 };
    let mut step = opts.initial_step;
    let mut dir = 1.0;
    while step >= opts.min_step {
        let mut accepted = false;
        for d in [dir, -dir] {
            let raw = c.x + d * step;
            let x = raw.clamp(lo, hi);
            if x == c.x {
                continue;
            }
            c.evaluations += 1;
            let Some(v) = f(x) else { continue };
            if v - c.value > opts.tolerance * c.value.abs() {
                c.lower_limited = raw < lo;
                c.x = x;
                c.value = v;
                c.moved = true;
                dir = d;
                accepted = true;
                break;
            }
        }
        if !accepted {
            step *= opts.shrink;
        }
    }
    c
}

/// Information of a fixed grid at fixed `θ̂`, one block per point.
struct Blocks<'a> {
    theta: &'a ParameterVector,
    err: &'a ErrorStructure,
    cfg: &'a DesignConfig,
    log_f: Vec<f64>,
    blocks: Vec<DMatrix<f64>>,
}

impl<'a> Blocks<'a> {
    fn new(theta: &'a ParameterVector, grid: &FrequencyGrid, err: &'a ErrorStructure, cfg: &'a DesignConfig) -> Self {
        let blocks = grid
            .frequencies()
            .iter()
            .map(|&f| point_matrix(theta, f, err, cfg.include_trace_term, cfg.coordinates))
            .collect();
        Blocks { theta, err, cfg, log_f: grid.frequencies().iter().map(|f| f.log10()).collect(), blocks }
    }

    fn total(&self) -> DMatrix<f64> {
        pairwise_reduce(&self.blocks, &|a: &DMatrix<f64>, b: &DMatrix<f64>| a + b).expect("grid is nonempty")
    }

    fn without(&self, index: usize) -> DMatrix<f64> {
        let rest: Vec<DMatrix<f64>> =
            self.blocks.iter().enumerate().filter(|&(j, _)| j != index).map(|(_, b)| b.clone()).collect();
        pairwise_reduce(&rest, &|a: &DMatrix<f64>, b: &DMatrix<f64>| a + b).expect("grid has two points")
    }

    fn block_at(&self, log_f: f64) -> DMatrix<f64> {
        point_matrix(self.theta, 10f64.powf(log_f), self.err, self.cfg.include_trace_term, self.cfg.coordinates)
    }

    /// Whether moving point `index` to `log_f` respects every constraint.
    fn feasible(&self, index: usize, log_f: f64) -> bool {
        let old = self.log_f[index];
        let clash = self.log_f.iter().enumerate().any(|(j, &g)| j != index && (g - log_f).abs() < MIN_SEPARATION);
        if clash {
            return false;
        }
        if let Some(t) = self.cfg.no_decrease_below_hz {
            if log_f < old && log_f < t.log10() {
                return false;
            }
        }
        if let Some(budget) = self.cfg.time_budget_s {
            let freqs: Vec<f64> = self
                .log_f
                .iter()
                .enumerate()
                .map(|(j, &g)| 10f64.powf(if j == index { log_f } else { g }))
                .collect();
            if total_time_of(&freqs, self.cfg.periods) > budget {
                return false;
            }
        }
        true
    }

    /// `λ_min` with point `index` moved to `log_f`, given `rest = without(index)`.
    fn moved_lambda(&self, rest: &DMatrix<f64>, index: usize, log_f: f64) -> Option<f64> {
        self.feasible(index, log_f).then(|| lambda_min(&(rest + self.block_at(log_f))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanOutcome {
    /// Candidate with the largest signed sensitivity.
    pub index: usize,
    /// Best `Δλ_min` per decade over both signs, for that candidate.
    pub sensitivity: f64,
    /// Per-point best sensitivity; `None` for frozen points or when neither
    /// perturbation is feasible.
    pub sensitivities: Vec<Option<f64>>,
    pub lambda_min: f64,
}

/// Perturbs each movable frequency by `±scan_step` decades at fixed `θ̂` and
/// ranks candidates by the resulting gain in `λ_min`. Ties go to the lowest
/// index.
pub fn sensitivity_scan(
    theta: &ParameterVector,
    grid: &FrequencyGrid,
    err: &ErrorStructure,
    cfg: &DesignConfig,
) -> Result<ScanOutcome> {
    scan_in(theta, grid, err, cfg, cfg.band(grid))
}

fn scan_in(
    theta: &ParameterVector,
    grid: &FrequencyGrid,
    err: &ErrorStructure,
    cfg: &DesignConfig,
    band: Band,
) -> Result<ScanOutcome> {
    let blocks = Blocks::new(theta, grid, err, cfg);
    let full = blocks.total();
    log_volume_matrix(&full)?;
    let movable: Vec<usize> = (0..grid.len()).filter(|&i| !cfg.is_frozen(grid, i)).collect();
    if movable.is_empty() {
        return Err(Error::Design("every frequency is frozen".into()));
    }
    let scored = cfg.execution.map(&movable, |&i| {
        let rest = blocks.without(i);
        let base = lambda_min(&(&rest + &blocks.blocks[i]));
        let mut best: Option<f64> = None;
        for d in [1.0, -1.0] {
            let x = (blocks.log_f[i] + d * cfg.scan_step).clamp(band.lo, band.hi);
            if x == blocks.log_f[i] {
                continue;
            }
            if let Some(v) = blocks.moved_lambda(&rest, i, x) {
                let s = (v - base) / cfg.scan_step;
                best = Some(best.map_or(s, |b: f64| b.max(s)));
            }
        }
        best
    });
    let mut sensitivities = vec![None; grid.len()];
    for (&i, s) in movable.iter().zip(&scored) {
        sensitivities[i] = *s;
    }
    let (index, sensitivity) = sensitivities
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i, s)))
        .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
            Some((_, b)) if b >= s => acc,
            _ => Some((i, s)),
        })
        .ok_or_else(|| Error::Design("no movable frequency has a feasible perturbation".into()))?;
    Ok(ScanOutcome { index, sensitivity, sensitivities, lambda_min: lambda_min(&full) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adjustment {
    /// Index in the grid before the move.
    pub index: usize,
    pub f_before_hz: f64,
    pub f_after_hz: f64,
    pub lambda_before: f64,
    pub lambda_after: f64,
    pub stalled: bool,
    pub floor_limited: bool,
}

/// Hill-climbs frequency `index` in log-frequency at fixed `θ̂`. A stalled
/// climb returns the original frequency.
pub fn adjust_frequency(
    theta: &ParameterVector,
    grid: &FrequencyGrid,
    index: usize,
    err: &ErrorStructure,
    cfg: &DesignConfig,
) -> Result<Adjustment> {
    adjust_in(theta, grid, index, err, cfg, cfg.band(grid))
}

fn adjust_in(
    theta: &ParameterVector,
    grid: &FrequencyGrid,
    index: usize,
    err: &ErrorStructure,
    cfg: &DesignConfig,
    band: Band,
) -> Result<Adjustment> {
    if index >= grid.len() {
        return Err(Error::domain(format!("index {index} out of range")));
    }
    if cfg.is_frozen(grid, index) {
        return Err(Error::Design(format!("frequency {index} is frozen")));
    }
    let blocks = Blocks::new(theta, grid, err, cfg);
    let rest = blocks.without(index);
    let x0 = blocks.log_f[index];
    let base = lambda_min(&(&rest + &blocks.blocks[index]));
    let c = hill_climb(x0, base, band.lo, band.hi, &cfg.climb_options(), |x| blocks.moved_lambda(&rest, index, x));
    let f_before_hz = grid.frequencies()[index];
    Ok(Adjustment {
        index,
        f_before_hz,
        f_after_hz: if c.moved { 10f64.powf(c.x) } else { f_before_hz },
        lambda_before: base,
        lambda_after: c.value,
        stalled: !c.moved,
        floor_limited: c.moved && c.lower_limited,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub theta_hat: ParameterVector,
    pub fit_objective: f64,
    /// Frequencies (Hz, decreasing) at the start of the iteration.
    pub grid: Vec<f64>,
    pub total_time_s: f64,
    /// `λ_min` of the information at `θ̂` on this grid.
    pub lambda_min: f64,
    /// Ellipsoid volume at the simulation truth, relative to the reference grid.
    pub normalized_volume: f64,
    /// Same ratio evaluated at `θ̂`.
    pub normalized_volume_estimated: f64,
    pub adjustment: Option<Adjustment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignTermination {
    MaxIterations,
    Stalled,
    TimeBudget,
    FitFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentTrace {
    pub records: Vec<IterationRecord>,
    pub termination: DesignTermination,
    pub diagnostic: Option<String>,
    pub reference_time_s: f64,
    /// Reduction applied to the initial grid, if known.
    pub ppd: Option<u32>,
    pub threshold_hz: Option<f64>,
}

pub const TRACE_CSV_COLUMNS: [&str; 13] = [
    "iteration",
    "normalized_volume",
    "normalized_volume_estimated",
    "lambda_min",
    "total_time_s",
    "time_ratio",
    "index",
    "f_before_hz",
    "f_after_hz",
    "lambda_before",
    "lambda_after",
    "stalled",
    "floor_limited",
];

pub const SUMMARY_CSV_COLUMNS: [&str; 6] =
    ["ppd", "threshold_hz", "iterations", "delta_V_pct", "delta_t_tot_pct", "min_delta_V_pct"];

/// Final changes relative to the full reference grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub ppd: Option<u32>,
    pub threshold_hz: Option<f64>,
    pub iterations: usize,
    pub delta_volume_pct: f64,
    pub delta_time_pct: f64,
    /// Lowest volume change reached on the way.
    pub min_delta_volume_pct: f64,
}

impl AdjustmentTrace {
    pub fn first(&self) -> &IterationRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("trace holds the initial record")
    }

    /// Number of moves actually applied.
    pub fn accepted(&self) -> usize {
        self.records.iter().filter(|r| r.adjustment.is_some_and(|a| !a.stalled)).count()
    }

    pub fn summary(&self) -> DesignSummary {
        let last = self.last();
        let min_v = self.records.iter().map(|r| r.normalized_volume).fold(f64::INFINITY, f64::min);
        DesignSummary {
            ppd: self.ppd,
            threshold_hz: self.threshold_hz,
            iterations: self.accepted(),
            delta_volume_pct: 100.0 * (last.normalized_volume - 1.0),
            delta_time_pct: 100.0 * (last.total_time_s / self.reference_time_s - 1.0),
            min_delta_volume_pct: 100.0 * (min_v - 1.0),
        }
    }

    /// One JSON object per iteration.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads records back; lines carrying a top-level `provenance` key are
    /// skipped.
    pub fn read_jsonl<R: std::io::BufRead>(reader: R) -> Result<Vec<IterationRecord>> {
        let mut out = Vec::new();
        for (k, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |e: serde_json::Error| Error::Parse { line: k as u64 + 1, message: e.to_string() };
            let v: serde_json::Value = serde_json::from_str(&line).map_err(parse)?;
            if v.get("provenance").is_some() {
                continue;
            }
            out.push(serde_json::from_value(v).map_err(parse)?);
        }
        Ok(out)
    }

    /// Volume-versus-iteration table.
    pub fn write_csv<W: Write>(&self, mut w: W, header: &[String]) -> Result<()> {
        for h in header {
            writeln!(w, "# {h}")?;
        }
        writeln!(w, "{}", TRACE_CSV_COLUMNS.join(","))?;
        for r in &self.records {
            let a = r.adjustment;
            let opt = |v: Option<String>| v.unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.normalized_volume,
                r.normalized_volume_estimated,
                r.lambda_min,
                r.total_time_s,
                r.total_time_s / self.reference_time_s,
                opt(a.map(|a| a.index.to_string())),
                opt(a.map(|a| a.f_before_hz.to_string())),
                opt(a.map(|a| a.f_after_hz.to_string())),
                opt(a.map(|a| a.lambda_before.to_string())),
                opt(a.map(|a| a.lambda_after.to_string())),
                opt(a.map(|a| a.stalled.to_string())),
                opt(a.map(|a| a.floor_limited.to_string())),
            )?;
        }
        Ok(())
    }
}

impl DesignSummary {
    pub fn write_csv<W: Write>(rows: &[DesignSummary], mut w: W, header: &[String]) -> Result<()> {
        for h in header {
            writeln!(w, "# {h}")?;
        }
        writeln!(w, "{}", SUMMARY_CSV_COLUMNS.join(","))?;
        for s in rows {
            writeln!(
                w,
                "{},{},{},{:.2},{:.2},{:.2}",
                s.ppd.map(|p| p.to_string()).unwrap_or_default(),
                s.threshold_hz.map(|t| t.to_string()).unwrap_or_default(),
                s.iterations,
                s.delta_volume_pct,
                s.delta_time_pct,
                s.min_delta_volume_pct,
            )?;
        }
        Ok(())
    }
}

fn fit_step(spec: &Spectrum, previous: Option<&ParameterVector>, opts: &FitOptions) -> Result<(ParameterVector, f64)> {
    let warm = previous.map(|t| fit_wcnls(spec, t, opts));
    match warm {
        Some(Ok(r)) => Ok((r.theta, r.objective)),
        _ => estimate(spec, opts).map(|r| (r.theta, r.objective)),
    }
}

fn grid_log_volume(theta: &ParameterVector, freqs: &[f64], err: &ErrorStructure, cfg: &DesignConfig) -> Result<f64> {
    let blocks: Vec<DMatrix<f64>> =
        freqs.iter().map(|&f| point_matrix(theta, f, err, cfg.include_trace_term, Coordinates::Log)).collect();
    let total = pairwise_reduce(&blocks, &|a: &DMatrix<f64>, b: &DMatrix<f64>| a + b).expect("grid is nonempty");
    log_volume_matrix(&total)
}

/// Runs the adjustment loop on `spec`, re-measuring moved points from
/// `theta_true` with the noise level `err`.
pub fn run_design(
    spec: &Spectrum,
    theta_true: &ParameterVector,
    err: &ErrorStructure,
    cfg: &DesignConfig,
) -> Result<AdjustmentTrace> {
    cfg.validate()?;
    err.validate()?;
    theta_true.validate()?;
    let initial = spec.grid();
    let band = cfg.band(&initial);
    let reference = FrequencyGrid::spaced(initial.f_start(), initial.f_end(), cfg.reference_ppd, cfg.reference_spacing)?;
    let ref_true = grid_log_volume(theta_true, reference.frequencies(), err, cfg)?;
    let reference_time_s = total_time_of(reference.frequencies(), cfg.periods);

    let mut spec = spec.clone();
    let mut trace = AdjustmentTrace {
        records: Vec::new(),
        termination: DesignTermination::MaxIterations,
        diagnostic: None,
        reference_time_s,
        ppd: None,
        threshold_hz: None,
    };
    let mut previous: Option<ParameterVector> = None;
    for iteration in 0..=cfg.max_iterations {
        let grid = spec.grid();
        let (theta_hat, fit_objective) = match fit_step(&spec, previous.as_ref(), &cfg.fit) {
            Ok(v) => v,
            Err(e) if iteration > 0 && e.is_numerical() => {
                trace.termination = DesignTermination::FitFailed;
                trace.diagnostic = Some(format!("iteration {iteration}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        previous = Some(theta_hat);
        let freqs = grid.frequencies();
        let total_time_s = total_time_of(freqs, cfg.periods);
        let est_ref = grid_log_volume(&theta_hat, reference.frequencies(), err, cfg)?;
        let est = grid_log_volume(&theta_hat, freqs, err, cfg);
        let mut record = IterationRecord {
            iteration,
            theta_hat,
            fit_objective,
            grid: freqs.to_vec(),
            total_time_s,
            lambda_min: f64::NAN,
            normalized_volume: (grid_log_volume(theta_true, freqs, err, cfg)? - ref_true).exp(),
            normalized_volume_estimated: est.map_or(f64::INFINITY, |v| (v - est_ref).exp()),
            adjustment: None,
        };
        if cfg.time_budget_s.is_some_and(|b| total_time_s > b) {
            trace.termination = DesignTermination::TimeBudget;
            trace.diagnostic = Some(format!("grid needs {total_time_s:.1} s, over the budget"));
            trace.records.push(record);
            break;
        }
        if iteration == cfg.max_iterations {
            let blocks = Blocks::new(&theta_hat, &grid, err, cfg);
            record.lambda_min = lambda_min(&blocks.total());
            trace.records.push(record);
            break;
        }
        let scan = match scan_in(&theta_hat, &grid, err, cfg, band) {
            Ok(s) => s,
            Err(e) if e.is_numerical() => {
                trace.termination = DesignTermination::FitFailed;
                trace.diagnostic = Some(format!("iteration {iteration}: {e}"));
                trace.records.push(record);
                break;
            }
            Err(e) => return Err(e),
        };
        record.lambda_min = scan.lambda_min;
        if !(scan.sensitivity > 0.0) {
            trace.termination = DesignTermination::Stalled;
            trace.records.push(record);
            break;
        }
        let adj = adjust_in(&theta_hat, &grid, scan.index, err, cfg, band)?;
        record.adjustment = Some(adj);
        trace.records.push(record);
        if adj.stalled {
            trace.termination = DesignTermination::Stalled;
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(iteration as u64 + 1);
        let sample = measure_point(theta_true, adj.f_after_hz, err, &mut rng);
        spec.replace(adj.index, sample)?;
    }
    Ok(trace)
}

/// [`run_design`] on a synthetic reduced spectrum, recording the reduction.
pub fn run_reduced(
    theta_true: &ParameterVector,
    grid: &FrequencyGrid,
    err: &ErrorStructure,
    spectrum_seed: u64,
    cfg: &DesignConfig,
) -> Result<AdjustmentTrace> {
    let spec = crate::measurement::synthesize(theta_true, grid, err, spectrum_seed)?;
    let mut trace = run_design(&spec, theta_true, err, cfg)?;
    if let Some(r) = grid.reductions().last() {
        trace.ppd = Some(r.ppd);
        trace.threshold_hz = Some(r.threshold_hz);
    } else {
        trace.ppd = grid.ppd();
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::noiseless;
    use crate::params::CellState;

    fn opts() -> ClimbOptions {
        DesignConfig::default().climb_options()
    }

    #[test]
    fn climb_quadratic_oracle() {
        let peak = 0.3137;
        let o = opts();
        let c = hill_climb(0.0, -(peak * peak), -5.0, 5.0, &o, |x| Some(-(x - peak) * (x - peak)));
        // Final step tried is the last one above min_step.
        let mut last = o.initial_step;
        while last * o.shrink >= o.min_step {
            last *= o.shrink;
        }
        assert!((c.x - peak).abs() <= last, "{} vs {peak}", c.x);
        assert!(c.moved && !c.lower_limited);
    }

    #[test]
    fn climb_clamps_to_floor() {
        let c = hill_climb(0.0, 0.0, -0.12, 1.0, &opts(), |x| Some(-x));
        assert_eq!(c.x, -0.12);
        assert!(c.lower_limited);
    }

    #[test]
    fn climb_stalls_at_maximum() {
        let c = hill_climb(0.0, 0.0, -1.0, 1.0, &opts(), |x| Some(-x * x));
        assert!(!c.moved);
        assert_eq!(c.x, 0.0);
    }

    #[test]
    fn climb_respects_infeasible_region() {
        let c = hill_climb(0.0, 0.0, -1.0, 1.0, &opts(), |x| (x < 0.2).then_some(x));
        assert!(c.x < 0.2 && c.x > 0.19, "{}", c.x);
    }

    fn setup() -> (ParameterVector, FrequencyGrid, ErrorStructure) {
        let theta = CellState::StateA.parameters();
        let grid = FrequencyGrid::decade_spaced(1e4, 0.01, 10).unwrap().reduce_ppd(0.1, 7).unwrap();
        (theta, grid, ErrorStructure::default())
    }

    #[test]
    fn scan_skips_frozen_endpoints() {
        let (theta, grid, err) = setup();
        let s = sensitivity_scan(&theta, &grid, &err, &DesignConfig::default()).unwrap();
        assert!(s.index > 0 && s.index + 1 < grid.len());
        assert!(s.sensitivities[0].is_none() && s.sensitivities[grid.len() - 1].is_none());
        assert!(s.sensitivity > 0.0);
    }

    #[test]
    fn scan_is_schedule_independent() {
        let (theta, grid, err) = setup();
        let seq = DesignConfig { execution: Execution::Sequential, ..Default::default() };
        let par = DesignConfig { execution: Execution::Parallel, ..Default::default() };
        assert_eq!(
            sensitivity_scan(&theta, &grid, &err, &seq).unwrap(),
            sensitivity_scan(&theta, &grid, &err, &par).unwrap()
        );
    }

    #[test]
    fn scan_rejects_fully_frozen_grid() {
        let (theta, grid, err) = setup();
        let cfg = DesignConfig { frozen_hz: grid.frequencies().to_vec(), ..Default::default() };
        assert!(matches!(sensitivity_scan(&theta, &grid, &err, &cfg), Err(Error::Design(_))));
    }

    #[test]
    fn adjust_improves_lambda_and_stays_in_band() {
        let (theta, grid, err) = setup();
        let cfg = DesignConfig::default();
        let s = sensitivity_scan(&theta, &grid, &err, &cfg).unwrap();
        let a = adjust_frequency(&theta, &grid, s.index, &err, &cfg).unwrap();
        assert!(!a.stalled);
        assert!(a.lambda_after > a.lambda_before);
        assert!(a.f_after_hz >= 0.01 && a.f_after_hz <= 1e4);
        let mut moved = grid.clone();
        moved.replace(a.index, a.f_after_hz).unwrap();
        let full = crate::information::fisher(&theta, &moved, &err, true);
        assert!((full.lambda_min(Coordinates::Log) / a.lambda_after - 1.0).abs() < 1e-8);
    }

    #[test]
    fn adjust_rejects_frozen_index() {
        let (theta, grid, err) = setup();
        assert!(adjust_frequency(&theta, &grid, 0, &err, &DesignConfig::default()).is_err());
    }

    #[test]
    fn time_budget_is_never_exceeded() {
        let (theta, grid, err) = setup();
        let budget = total_time_of(grid.frequencies(), 5) * 1.0001;
        let cfg = DesignConfig { time_budget_s: Some(budget), ..Default::default() };
        let s = sensitivity_scan(&theta, &grid, &err, &cfg).unwrap();
        let a = adjust_frequency(&theta, &grid, s.index, &err, &cfg).unwrap();
        let mut moved = grid.clone();
        moved.replace(a.index, a.f_after_hz).unwrap();
        assert!(total_time_of(moved.frequencies(), 5) <= budget);
    }

    #[test]
    fn zero_iterations_gives_initial_record() {
        let (theta, grid, err) = setup();
        let spec = noiseless(&theta, &grid, &err).unwrap();
        let cfg = DesignConfig { max_iterations: 0, ..Default::default() };
        let t = run_design(&spec, &theta, &err, &cfg).unwrap();
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.records[0].grid, grid.frequencies());
        assert!(t.records[0].adjustment.is_none());
        assert!(t.records[0].normalized_volume > 1.0);
        assert_eq!(t.termination, DesignTermination::MaxIterations);
    }

    #[test]
    fn short_run_keeps_cardinality_and_band() {
        let (theta, grid, err) = setup();
        let spec = noiseless(&theta, &grid, &err).unwrap();
        let cfg = DesignConfig { max_iterations: 3, ..Default::default() };
        let t = run_design(&spec, &theta, &err, &cfg).unwrap();
        assert_eq!(t.records.len(), 4);
        for (k, r) in t.records.iter().enumerate() {
            assert_eq!(r.iteration, k);
            assert_eq!(r.grid.len(), grid.len());
            assert!(r.grid.iter().all(|&f| (0.01..=1e4).contains(&f)));
            if let Some(a) = r.adjustment {
                assert!(a.lambda_after >= a.lambda_before);
            }
        }
        let mut buf = b"{\"provenance\":{\"seed\":1}}\n".to_vec();
        t.write_jsonl(&mut buf).unwrap();
        assert_eq!(AdjustmentTrace::read_jsonl(&buf[..]).unwrap(), t.records);
    }
}
