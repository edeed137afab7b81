//! Measurement error model, synthetic spectra and spectrum files.
//!
//! Phases are radians everywhere inside the crate; the CSV format carries
//! degrees. Noise is Gaussian with `σ = max_error / sigma_convention`.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::circuit::{model, ComplexImpedance};
use crate::error::{Error, Result};
use crate::frequency::FrequencyGrid;
use crate::params::ParameterVector;

pub const CSV_COLUMNS: [&str; 5] = ["f_hz", "mag_ohm", "phase_deg", "sigma_mag_ohm", "sigma_phase_deg"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStructure {
    /// Maximum relative magnitude error.
    pub rel_mag_max: f64,
    /// Maximum absolute phase error, degrees.
    pub abs_phase_max_deg: f64,
    /// Divisor turning a maximum error into a standard deviation.
    pub sigma_convention: f64,
}

impl Default for ErrorStructure {
    fn default() -> Self {
        ErrorStructure { rel_mag_max: 0.01, abs_phase_max_deg: 1.0, sigma_convention: 3.0 }
    }
}

impl ErrorStructure {
    pub fn new(rel_mag_max: f64, abs_phase_max_deg: f64, sigma_convention: f64) -> Result<Self> {
        let e = ErrorStructure { rel_mag_max, abs_phase_max_deg, sigma_convention };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rel_mag_max", self.rel_mag_max),
            ("abs_phase_max_deg", self.abs_phase_max_deg),
            ("sigma_convention", self.sigma_convention),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Relative magnitude standard deviation `σ_ρ / ρ`.
    pub fn rel_sigma(&self) -> f64 {
        self.rel_mag_max / self.sigma_convention
    }

    /// Phase standard deviation in radians.
    pub fn sigma_phase(&self) -> f64 {
        self.abs_phase_max_deg.to_radians() / self.sigma_convention
    }

    /// `(σ_ρ, σ_φ)` for a point of magnitude `rho`.
    pub fn sigma_at(&self, rho: f64) -> (f64, f64) {
        (self.rel_sigma() * rho, self.sigma_phase())
    }

    /// Same structure with both channels divided by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        ErrorStructure { rel_mag_max: self.rel_mag_max / c, abs_phase_max_deg: self.abs_phase_max_deg / c, ..*self }
    }
}

/// One measured (or simulated) impedance point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub f_hz: f64,
    pub magnitude: f64,
    /// Radians.
    pub phase: f64,
    pub sigma_magnitude: f64,
    /// Radians.
    pub sigma_phase: f64,
}

impl Sample {
    pub fn impedance(&self) -> ComplexImpedance {
        ComplexImpedance::from_polar(self.magnitude, self.phase)
    }

    pub fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.f_hz
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.f_hz > 0.0 && self.f_hz.is_finite()) {
            return Err(format!("frequency {} must be positive", self.f_hz));
        }
        if !(self.magnitude > 0.0 && self.magnitude.is_finite()) {
            return Err(format!("magnitude {} must be positive", self.magnitude));
        }
        if !self.phase.is_finite() {
            return Err("phase is not finite".into());
        }
        if !(self.sigma_magnitude > 0.0 && self.sigma_phase > 0.0) {
            return Err("standard deviations must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Synthetic { seed: Option<u64>, error: ErrorStructure },
    File { path: String },
    Measured,
}

/// Impedance samples ordered by strictly decreasing frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpectrumRecord")]
pub struct Spectrum {
    samples: Vec<Sample>,
    source: Source,
}

#[derive(Deserialize)]
struct SpectrumRecord {
    samples: Vec<Sample>,
    source: Source,
}

impl TryFrom<SpectrumRecord> for Spectrum {
    type Error = Error;
    fn try_from(r: SpectrumRecord) -> Result<Self> {
        Spectrum::new(r.samples, r.source)
    }
}

impl Spectrum {
    /// Validates samples; accepts increasing or decreasing frequency order.
    pub fn new(mut samples: Vec<Sample>, source: Source) -> Result<Self> {
        if samples.len() >= 2 && samples[0].f_hz < samples[samples.len() - 1].f_hz {
            samples.reverse();
        }
        for s in &samples {
            s.validate().map_err(Error::Domain)?;
        }
        FrequencyGrid::from_frequencies(samples.iter().map(|s| s.f_hz).collect())?;
        Ok(Spectrum { samples, source })
    }

    /// Spectrum from raw complex measurements; σ is taken from the measured
    /// magnitudes since the true ones are unknown.
    pub fn from_measurements(points: &[(f64, ComplexImpedance)], err: &ErrorStructure) -> Result<Self> {
        err.validate()?;
        let samples = points
            .iter()
            .map(|&(f_hz, z)| {
                let (sigma_magnitude, sigma_phase) = err.sigma_at(z.magnitude());
                Sample { f_hz, magnitude: z.magnitude(), phase: z.phase(), sigma_magnitude, sigma_phase }
            })
            .collect();
        Spectrum::new(samples, Source::Measured)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn source(&self) -> &Source {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn grid(&self) -> FrequencyGrid {
        FrequencyGrid::from_frequencies(self.samples.iter().map(|s| s.f_hz).collect())
            .expect("spectrum frequencies are validated on construction")
    }

    /// Drops the sample at `index` and inserts `sample` at its sorted place.
    pub fn replace(&mut self, index: usize, sample: Sample) -> Result<usize> {
        if index >= self.samples.len() {
            return Err(Error::domain(format!("index {index} out of range")));
        }
        let mut s = self.samples.clone();
        s.remove(index);
        let pos = s.partition_point(|x| x.f_hz > sample.f_hz);
        s.insert(pos, sample);
        *self = Spectrum::new(s, self.source.clone())?;
        Ok(pos)
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    /// Writes the CSV format. `header` lines are emitted as `# ` comments.
    pub fn write_csv<W: Write>(&self, mut w: W, header: &[String]) -> Result<()> {
        for line in header {
            writeln!(w, "# {line}")?;
        }
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(CSV_COLUMNS).map_err(csv_io)?;
        for s in &self.samples {
            wr.write_record([
                s.f_hz.to_string(),
                s.magnitude.to_string(),
                s.phase.to_degrees().to_string(),
                s.sigma_magnitude.to_string(),
                s.sigma_phase.to_degrees().to_string(),
            ])
            .map_err(csv_io)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the CSV format. Lines starting with `#` are ignored.
    pub fn read_csv<R: Read>(reader: R, source: Source) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = match rd.headers() {
            Ok(h) => h.clone(),
            Err(e) => return Err(parse_error(&e, "unreadable header")),
        };
        if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
            return Err(Error::Parse { line: 1, message: "empty file".into() });
        }
        let names: Vec<&str> = headers.iter().collect();
        if names != CSV_COLUMNS {
            return Err(Error::Parse {
                line: rd.position().line().max(1),
                message: format!("expected columns {}, found {}", CSV_COLUMNS.join(","), names.join(",")),
            });
        }

        let mut samples: Vec<Sample> = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| parse_error(&e, "malformed row"))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let perr = |message: String| Error::Parse { line, message };
            if rec.len() != CSV_COLUMNS.len() {
                return Err(perr(format!("expected {} fields, found {}", CSV_COLUMNS.len(), rec.len())));
            }
            let mut v = [0.0; 5];
            for (k, field) in rec.iter().enumerate() {
                v[k] = field
                    .parse()
                    .map_err(|_| perr(format!("{}: '{field}' is not a number", CSV_COLUMNS[k])))?;
            }
            let s = Sample {
                f_hz: v[0],
                magnitude: v[1],
                phase: v[2].to_radians(),
                sigma_magnitude: v[3],
                sigma_phase: v[4].to_radians(),
            };
            s.validate().map_err(perr)?;
            if let Some(prev) = samples.last() {
                let increasing = samples.len() >= 2 && samples[1].f_hz > samples[0].f_hz;
                let ok = if samples.len() == 1 {
                    s.f_hz != prev.f_hz
                } else if increasing {
                    s.f_hz > prev.f_hz
                } else {
                    s.f_hz < prev.f_hz
                };
                if !ok {
                    return Err(perr(format!("frequency {} breaks monotone order", s.f_hz)));
                }
            }
            samples.push(s);
        }
        if samples.is_empty() {
            return Err(Error::Parse { line: rd.position().line(), message: "no data rows".into() });
        }
        if samples.len() < 2 {
            return Err(Error::Parse { line: rd.position().line(), message: "need at least 2 data rows".into() });
        }
        Spectrum::new(samples, source)
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn parse_error(e: &csv::Error, what: &str) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse { line, message: format!("{what}: {e}") }
}

/// Noise-free sample of the model at `f_hz`, with σ from the true magnitude.
pub fn model_sample(theta: &ParameterVector, f_hz: f64, err: &ErrorStructure) -> Sample {
    let z = model(theta.as_array(), 2.0 * std::f64::consts::PI * f_hz);
    let (sigma_magnitude, sigma_phase) = err.sigma_at(z.norm());
    Sample { f_hz, magnitude: z.norm(), phase: z.arg(), sigma_magnitude, sigma_phase }
}

/// One noisy draw at `f_hz`. Magnitude noise is multiplicative.
pub fn measure_point<R: rand::Rng + ?Sized>(
    theta: &ParameterVector,
    f_hz: f64,
    err: &ErrorStructure,
    rng: &mut R,
) -> Sample {
    let mut s = model_sample(theta, f_hz, err);
    let e_rho: f64 = StandardNormal.sample(rng);
    let e_phi: f64 = StandardNormal.sample(rng);
    s.magnitude *= 1.0 + err.rel_sigma() * e_rho;
    s.phase += err.sigma_phase() * e_phi;
    s
}

/// Noisy synthetic spectrum, deterministic in `seed`.
pub fn synthesize(theta: &ParameterVector, grid: &FrequencyGrid, err: &ErrorStructure, seed: u64) -> Result<Spectrum> {
    theta.validate()?;
    err.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = grid.frequencies().iter().map(|&f| measure_point(theta, f, err, &mut rng)).collect();
    Spectrum::new(samples, Source::Synthetic { seed: Some(seed), error: *err })
}

/// Noise-free spectrum carrying the σ of `err`.
pub fn noiseless(theta: &ParameterVector, grid: &FrequencyGrid, err: &ErrorStructure) -> Result<Spectrum> {
    theta.validate()?;
    err.validate()?;
    let samples = grid.frequencies().iter().map(|&f| model_sample(theta, f, err)).collect();
    Spectrum::new(samples, Source::Synthetic { seed: None, error: *err })
}
