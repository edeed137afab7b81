//! Normalized CRLB tables over (threshold, PPD) reductions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::frequency::{FrequencyGrid, Spacing};
use crate::information::{crlb, fisher};
use crate::measurement::ErrorStructure;
use crate::par::Execution;
use crate::params::{ParameterVector, N_PARAMS, PARAM_NAMES};

pub const SWEEP_CSV_COLUMNS: [&str; 4] = ["parameter", "normalized_crlb", "ppd", "threshold_hz"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub f_start: f64,
    pub f_end: f64,
    /// Density of the baseline grid every CRLB is divided by.
    pub base_ppd: u32,
    pub spacing: Spacing,
    pub thresholds_hz: Vec<f64>,
    pub ppds: Vec<u32>,
    pub include_trace_term: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            f_start: 1e4,
            f_end: 0.01,
            base_ppd: 10,
            spacing: Spacing::DecadeInclusive,
            thresholds_hz: vec![0.1, 1.0],
            ppds: (5..=10).collect(),
            include_trace_term: true,
        }
    }
}

/// CRLB ratios of one reduced grid to the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub threshold_hz: f64,
    pub ppd: u32,
    pub points: usize,
    pub normalized: [f64; N_PARAMS],
}

/// Cells are evaluated independently and returned threshold-major, in the
/// order given.
pub fn crlb_sweep(
    theta: &ParameterVector,
    spec: &SweepSpec,
    err: &ErrorStructure,
    exec: Execution,
) -> Result<Vec<SweepCell>> {
    theta.validate()?;
    err.validate()?;
    let base = FrequencyGrid::spaced(spec.f_start, spec.f_end, spec.base_ppd, spec.spacing)?;
    let base_crlb = crlb(&fisher(theta, &base, err, spec.include_trace_term))?;
    let cells: Vec<(f64, u32)> =
        spec.thresholds_hz.iter().flat_map(|&t| spec.ppds.iter().map(move |&p| (t, p))).collect();
    exec.map(&cells, |&(threshold_hz, ppd)| {
        let grid = base.reduce_ppd(threshold_hz, ppd)?;
        let c = crlb(&fisher(theta, &grid, err, spec.include_trace_term))?;
        Ok(SweepCell {
            threshold_hz,
            ppd,
            points: grid.len(),
            normalized: std::array::from_fn(|k| c[k] / base_crlb[k]),
        })
    })
    .into_iter()
    .collect()
}

/// Long format: one row per parameter per cell.
pub fn write_sweep_csv<W: Write>(cells: &[SweepCell], mut w: W, header: &[String]) -> Result<()> {
    for h in header {
        writeln!(w, "# {h}")?;
    }
    writeln!(w, "{}", SWEEP_CSV_COLUMNS.join(","))?;
    for c in cells {
        for (name, v) in PARAM_NAMES.iter().zip(c.normalized) {
            writeln!(w, "{name},{v},{},{}", c.ppd, c.threshold_hz)?;
        }
    }
    Ok(())
}
