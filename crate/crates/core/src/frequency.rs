//! Logarithmically spaced measurement grids, low-frequency density
//! reduction, and experiment-time accounting.
//!
//! Two spacing conventions are supported:
//!
//! * [`Spacing::Uniform`]: `f_k = 10^(log10 f_start − k/PPD)` with
//!   `N = ⌊1.5 + PPD·(log10 f_start − log10 f_end)⌋`.
//! * [`Spacing::DecadeInclusive`]: every decade holds `PPD` points counting
//!   both decade boundaries, with shared boundaries merged, i.e. a step of
//!   `1/(PPD − 1)` decade. This is what most instrument software produces
//!   when sweeping decade by decade.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::compensated_sum;

/// Relative tolerance under which two frequencies are the same point.
pub const MERGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Uniform,
    DecadeInclusive,
    /// Arbitrary user-supplied list.
    Explicit,
}

impl Spacing {
    /// Step in decades for a given points-per-decade value.
    pub fn step(self, ppd: u32) -> Result<f64> {
        match self {
            Spacing::Uniform if ppd >= 1 => Ok(1.0 / f64::from(ppd)),
            Spacing::DecadeInclusive if ppd >= 2 => Ok(1.0 / f64::from(ppd - 1)),
            Spacing::Explicit => Err(Error::domain("explicit grids have no PPD spacing")),
            _ => Err(Error::domain(format!("PPD {ppd} too small for {self:?} spacing"))),
        }
    }
}

impl std::str::FromStr for Spacing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Spacing::Uniform),
            "decade" | "decade_inclusive" => Ok(Spacing::DecadeInclusive),
            "explicit" => Ok(Spacing::Explicit),
            other => Err(Error::domain(format!("unknown spacing '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub threshold_hz: f64,
    pub ppd: u32,
}

/// Strictly decreasing list of measurement frequencies (Hz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRecord")]
pub struct FrequencyGrid {
    frequencies: Vec<f64>,
    spacing: Spacing,
    ppd: Option<u32>,
    reductions: Vec<Reduction>,
}

#[derive(Deserialize)]
struct GridRecord {
    frequencies: Vec<f64>,
    spacing: Spacing,
    ppd: Option<u32>,
    #[serde(default)]
    reductions: Vec<Reduction>,
}

impl TryFrom<GridRecord> for FrequencyGrid {
    type Error = Error;
    fn try_from(r: GridRecord) -> Result<Self> {
        validate_decreasing(&r.frequencies)?;
        Ok(FrequencyGrid {
            frequencies: r.frequencies,
            spacing: r.spacing,
            ppd: r.ppd,
            reductions: r.reductions,
        })
    }
}

fn validate_decreasing(f: &[f64]) -> Result<()> {
    if f.len() < 2 {
        return Err(Error::domain(format!("a grid needs at least 2 points, got {}", f.len())));
    }
    if let Some(bad) = f.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::domain(format!("frequency {bad} is not a positive finite value")));
    }
    if let Some(w) = f.windows(2).find(|w| w[1] >= w[0]) {
        return Err(Error::domain(format!(
            "frequencies must be strictly decreasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

fn same_point(a: f64, b: f64) -> bool {
    (a - b).abs() <= MERGE_TOL * a.abs().max(b.abs())
}

/// Drops entries that coincide with their predecessor (list must be sorted).
fn merge_duplicates(v: &mut Vec<f64>) {
    v.dedup_by(|b, a| same_point(*a, *b));
}

/// Geometric points from `f_start` down to `f_end` with `step` decades.
fn geometric(f_start: f64, f_end: f64, step: f64) -> Result<Vec<f64>> {
    geometric_at_least(f_start, f_end, step, 0)
}

/// As [`geometric`], but never fewer than `min_points` points.
fn geometric_at_least(f_start: f64, f_end: f64, step: f64, min_points: usize) -> Result<Vec<f64>> {
    if !(f_end > 0.0 && f_start > f_end && f_start.is_finite()) {
        return Err(Error::domain(format!(
            "need f_start > f_end > 0, got f_start = {f_start}, f_end = {f_end}"
        )));
    }
    let top = f_start.log10();
    let span = top - f_end.log10();
    let n = ((1.5 + span / step).floor() as usize).max(min_points);
    if n < 2 {
        return Err(Error::domain(format!(
            "range {f_start}..{f_end} Hz too narrow for a step of {step} decade"
        )));
    }
    let mut f: Vec<f64> = (0..n).map(|k| 10f64.powf(top - k as f64 * step)).collect();
    f[0] = f_start;
    f[n - 1] = f_end;
    Ok(f)
}

impl FrequencyGrid {
    /// Closed-form log-spaced grid with `ppd` points per decade.
    pub fn log_spaced(f_start: f64, f_end: f64, ppd: u32) -> Result<Self> {
        Self::spaced(f_start, f_end, ppd, Spacing::Uniform)
    }

    /// Decade-by-decade grid with `ppd` points per closed decade.
    pub fn decade_spaced(f_start: f64, f_end: f64, ppd: u32) -> Result<Self> {
        Self::spaced(f_start, f_end, ppd, Spacing::DecadeInclusive)
    }

    pub fn spaced(f_start: f64, f_end: f64, ppd: u32, spacing: Spacing) -> Result<Self> {
        let frequencies = geometric(f_start, f_end, spacing.step(ppd)?)?;
        Ok(FrequencyGrid { frequencies, spacing, ppd: Some(ppd), reductions: Vec::new() })
    }

    /// Grid from an arbitrary list. Order may be either direction; it is
    /// stored decreasing. Duplicates are rejected.
    pub fn from_frequencies(mut frequencies: Vec<f64>) -> Result<Self> {
        if frequencies.len() >= 2 && frequencies[0] < frequencies[frequencies.len() - 1] {
            frequencies.reverse();
        }
        validate_decreasing(&frequencies)?;
        Ok(FrequencyGrid { frequencies, spacing: Spacing::Explicit, ppd: None, reductions: Vec::new() })
    }

    /// Lowers the density of every point at or below `threshold_hz` to
    /// `ppd_low`, regenerating that segment anchored at the threshold.
    pub fn reduce_ppd(&self, threshold_hz: f64, ppd_low: u32) -> Result<Self> {
        let ppd = self
            .ppd
            .ok_or_else(|| Error::domain("cannot reduce PPD of an explicit grid"))?;
        let (f_start, f_end) = (self.f_start(), self.f_end());
        let inside = threshold_hz.is_finite()
            && threshold_hz <= f_start * (1.0 + MERGE_TOL)
            && threshold_hz >= f_end * (1.0 - MERGE_TOL);
        if !inside {
            return Err(Error::domain(format!(
                "threshold {threshold_hz} Hz outside grid range [{f_end}, {f_start}]"
            )));
        }
        if ppd_low < 1 || ppd_low > ppd {
            return Err(Error::domain(format!("reduced PPD {ppd_low} must be in 1..={ppd}")));
        }
        let mut reductions = self.reductions.clone();
        reductions.push(Reduction { threshold_hz, ppd: ppd_low });
        if ppd_low == ppd {
            return Ok(FrequencyGrid { reductions, ..self.clone() });
        }
        let step = self.spacing.step(ppd_low)?;

        let mut out: Vec<f64> = self
            .frequencies
            .iter()
            .copied()
            .filter(|&f| f > threshold_hz && !same_point(f, threshold_hz))
            .collect();
        if same_point(threshold_hz, f_end) {
            out.push(f_end);
        } else {
            // A segment narrower than one step keeps just its two ends.
            out.extend(geometric_at_least(threshold_hz, f_end, step, 2)?);
        }
        merge_duplicates(&mut out);
        Ok(FrequencyGrid { frequencies: out, spacing: self.spacing, ppd: self.ppd, reductions })
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn angular(&self) -> impl Iterator<Item = f64> + '_ {
        self.frequencies.iter().map(|f| 2.0 * std::f64::consts::PI * f)
    }

    pub fn f_start(&self) -> f64 {
        self.frequencies[0]
    }

    pub fn f_end(&self) -> f64 {
        self.frequencies[self.frequencies.len() - 1]
    }

    pub fn ppd(&self) -> Option<u32> {
        self.ppd
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn reductions(&self) -> &[Reduction] {
        &self.reductions
    }

    /// Index of `f` if it is (within merge tolerance) a grid point.
    pub fn position(&self, f: f64) -> Option<usize> {
        self.frequencies.iter().position(|&g| same_point(g, f))
    }

    /// Replaces point `index` by `new_hz`, keeping the grid sorted. Returns
    /// the new index of the moved point. Provenance is kept; the list is no
    /// longer regular after this.
    pub fn replace(&mut self, index: usize, new_hz: f64) -> Result<usize> {
        if index >= self.len() {
            return Err(Error::domain(format!("index {index} out of range")));
        }
        let mut f = self.frequencies.clone();
        f.remove(index);
        let pos = f.partition_point(|&g| g > new_hz);
        f.insert(pos, new_hz);
        validate_decreasing(&f)?;
        self.frequencies = f;
        Ok(pos)
    }

    /// Union of two grids (duplicates merged), as an explicit grid.
    pub fn union(&self, other: &FrequencyGrid) -> Result<Self> {
        let mut f: Vec<f64> = self.frequencies.iter().chain(other.frequencies.iter()).copied().collect();
        f.sort_by(|a, b| b.total_cmp(a));
        merge_duplicates(&mut f);
        Self::from_frequencies(f)
    }

    /// Reads one frequency (Hz) per line; blank lines and `#` comments skipped.
    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut f = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let s = line.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                line: i as u64 + 1,
                message: format!("'{s}' is not a number"),
            })?;
            f.push(v);
        }
        if f.is_empty() {
            return Err(Error::Parse { line: 0, message: "no frequencies".into() });
        }
        Self::from_frequencies(f)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for f in &self.frequencies {
            writeln!(w, "{f}")?;
        }
        Ok(())
    }
}

/// Periods of excitation per frequency point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeModel {
    pub periods: u32,
}

impl Default for TimeModel {
    fn default() -> Self {
        TimeModel { periods: 5 }
    }
}

impl TimeModel {
    pub fn new(periods: u32) -> Result<Self> {
        if periods == 0 {
            return Err(Error::domain("periods per point must be at least 1"));
        }
        Ok(TimeModel { periods })
    }

    pub fn total_time(&self, grid: &FrequencyGrid) -> f64 {
        total_time_of(grid.frequencies(), self.periods)
    }
}

/// `Σ N_p / f_k` in seconds.
pub fn total_time(grid: &FrequencyGrid, periods: u32) -> Result<f64> {
    Ok(TimeModel::new(periods)?.total_time(grid))
}

pub(crate) fn total_time_of(frequencies: &[f64], periods: u32) -> f64 {
    let np = f64::from(periods);
    compensated_sum(frequencies.iter().map(|f| np / f))
}

/// Share of the total time spent on points with `lo <= f < hi`.
pub fn time_fraction(grid: &FrequencyGrid, lo: f64, hi: f64) -> f64 {
    let f = grid.frequencies();
    let part: Vec<f64> = f.iter().copied().filter(|&x| x >= lo * (1.0 - MERGE_TOL) && x < hi * (1.0 - MERGE_TOL)).collect();
    total_time_of(&part, 1) / total_time_of(f, 1)
}
