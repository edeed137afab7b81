//! Experiment configuration: a JSON tree whose fields CLI flags may override.

use std::path::{Path, PathBuf};

use eisopt::design::DesignConfig;
use eisopt::frequency::Reduction;
use eisopt::{CellState, Error, ErrorStructure, FrequencyGrid, ParameterVector, Result, Spacing};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Named fixture or inline parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Fixture {
    Named(CellState),
    Inline(ParameterVector),
}

impl Fixture {
    pub fn theta(&self) -> ParameterVector {
        match self {
            Fixture::Named(s) => s.parameters(),
            Fixture::Inline(t) => *t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub f_start: f64,
    pub f_end: f64,
    pub ppd: u32,
    pub spacing: Spacing,
    /// Applied in order.
    pub reductions: Vec<Reduction>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { f_start: 1e4, f_end: 0.01, ppd: 10, spacing: Spacing::DecadeInclusive, reductions: Vec::new() }
    }
}

impl GridSpec {
    pub fn base(&self) -> Result<FrequencyGrid> {
        FrequencyGrid::spaced(self.f_start, self.f_end, self.ppd, self.spacing)
    }

    pub fn build(&self) -> Result<FrequencyGrid> {
        self.reductions.iter().try_fold(self.base()?, |g, r| g.reduce_ppd(r.threshold_hz, r.ppd))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepLists {
    pub thresholds_hz: Vec<f64>,
    pub ppds: Vec<u32>,
}

impl Default for SweepLists {
    fn default() -> Self {
        SweepLists { thresholds_hz: vec![0.1, 1.0], ppds: (5..=10).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cell: Fixture,
    pub grid: GridSpec,
    pub error: ErrorStructure,
    /// Periods measured per frequency.
    pub periods: u32,
    /// Seeds the synthetic spectrum.
    pub seed: u64,
    pub noiseless: bool,
    pub include_trace_term: bool,
    pub output_dir: Option<PathBuf>,
    pub design: DesignConfig,
    /// Reduced densities the `design` command runs, one summary row each.
    /// Empty means the grid as configured.
    pub design_ppds: Vec<u32>,
    pub sweep: SweepLists,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            cell: Fixture::Named(CellState::StateA),
            grid: GridSpec::default(),
            error: ErrorStructure::default(),
            periods: 5,
            seed: 1,
            noiseless: false,
            include_trace_term: true,
            output_dir: None,
            design: DesignConfig::default(),
            design_ppds: Vec::new(),
            sweep: SweepLists::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Domain(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line() as u64, message: e.to_string() })
    }

    /// Checks every module invariant the commands rely on.
    pub fn validate(&self) -> Result<()> {
        self.cell.theta().validate()?;
        self.error.validate()?;
        self.grid.build()?;
        if self.periods == 0 {
            return Err(Error::Domain("periods must be at least 1".into()));
        }
        self.design.validate()?;
        for &p in self.design_ppds.iter().chain(&self.sweep.ppds) {
            if p == 0 || p > self.grid.ppd {
                return Err(Error::Domain(format!("reduced PPD {p} must be in 1..={}", self.grid.ppd)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
