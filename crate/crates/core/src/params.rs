//! The eleven-parameter generalized Randles circuit parameter vector.
//!
//! Canonical order: `[R_s, Q_HF, φ_HF, R_1, Q_1, φ_1, R_2, Q_2, φ_2, Q_LF, φ_LF]`.
//! Resistances and CPE coefficients are strictly positive and are optimized
//! in log space; the four exponents stay in linear space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_PARAMS: usize = 11;

pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "R_s", "Q_HF", "phi_HF", "R_1", "Q_1", "phi_1", "R_2", "Q_2", "phi_2", "Q_LF", "phi_LF",
];

pub const R_S: usize = 0;
pub const Q_HF: usize = 1;
pub const PHI_HF: usize = 2;
pub const R_1: usize = 3;
pub const Q_1: usize = 4;
pub const PHI_1: usize = 5;
pub const R_2: usize = 6;
pub const Q_2: usize = 7;
pub const PHI_2: usize = 8;
pub const Q_LF: usize = 9;
pub const PHI_LF: usize = 10;

/// Indices of the strictly positive parameters (log-parameterized).
pub const POSITIVE: [usize; 7] = [R_S, Q_HF, R_1, Q_1, R_2, Q_2, Q_LF];

/// Whether parameter `k` is an exponent (kept in linear coordinates).
pub fn is_exponent(k: usize) -> bool {
    matches!(k, PHI_HF | PHI_1 | PHI_2 | PHI_LF)
}

/// Closed/half-open admissible interval of an exponent parameter.
#[derive(Debug, Clone, Copy)]
pub struct ExponentRange {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl ExponentRange {
    pub fn contains(&self, x: f64) -> bool {
        let above = if self.lo_closed { x >= self.lo } else { x > self.lo };
        let below = if self.hi_closed { x <= self.hi } else { x < self.hi };
        above && below
    }

    /// Nearest admissible value, pulling open ends inward by `margin`.
    pub fn project(&self, x: f64, margin: f64) -> f64 {
        let lo = if self.lo_closed { self.lo } else { self.lo + margin };
        let hi = if self.hi_closed { self.hi } else { self.hi - margin };
        x.clamp(lo, hi)
    }
}

pub fn exponent_range(k: usize) -> Option<ExponentRange> {
    match k {
        PHI_HF => Some(ExponentRange { lo: -1.0, hi: 0.0, lo_closed: true, hi_closed: false }),
        PHI_1 | PHI_2 => Some(ExponentRange { lo: 0.0, hi: 1.0, lo_closed: false, hi_closed: true }),
        PHI_LF => Some(ExponentRange { lo: 0.0, hi: 1.0, lo_closed: true, hi_closed: false }),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamRecord", into = "ParamRecord")]
pub struct ParameterVector([f64; N_PARAMS]);

impl ParameterVector {
    /// Builds a vector, checking every invariant.
    pub fn new(values: [f64; N_PARAMS]) -> Result<Self> {
        let p = ParameterVector(values);
        p.validate()?;
        Ok(p)
    }

    /// Builds a vector without validation. Callers must uphold the invariants
    /// before handing it to the circuit model.
    pub fn new_unchecked(values: [f64; N_PARAMS]) -> Self {
        ParameterVector(values)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, &v) in self.0.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::domain(format!("{} is not finite", PARAM_NAMES[k])));
            }
            match exponent_range(k) {
                Some(r) if !r.contains(v) => {
                    return Err(Error::domain(format!(
                        "{} = {v} outside {}{}, {}{}",
                        PARAM_NAMES[k],
                        if r.lo_closed { "[" } else { "(" },
                        r.lo,
                        r.hi,
                        if r.hi_closed { "]" } else { ")" },
                    )))
                }
                None if v <= 0.0 => {
                    return Err(Error::domain(format!("{} = {v} must be positive", PARAM_NAMES[k])))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> &[f64; N_PARAMS] {
        &self.0
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    pub fn with(mut self, k: usize, value: f64) -> Self {
        self.0[k] = value;
        self
    }

    /// Optimizer coordinates: `ln` of positive parameters, exponents as-is.
    pub fn to_internal(&self) -> [f64; N_PARAMS] {
        let mut x = self.0;
        for &k in &POSITIVE {
            x[k] = x[k].ln();
        }
        x
    }

    pub fn from_internal(x: &[f64; N_PARAMS]) -> Self {
        let mut v = *x;
        for &k in &POSITIVE {
            v[k] = v[k].exp();
        }
        ParameterVector(v)
    }

    /// `dθ_k / dx_k` for the internal coordinates.
    pub fn internal_scale(&self) -> [f64; N_PARAMS] {
        let mut d = [1.0; N_PARAMS];
        for &k in &POSITIVE {
            d[k] = self.0[k];
        }
        d
    }

    /// Largest per-parameter relative deviation from `other`.
    pub fn max_rel_diff(&self, other: &ParameterVector) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for ParameterVector {
    type Output = f64;
    fn index(&self, k: usize) -> &f64 {
        &self.0[k]
    }
}

/// Named-field form used for serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamRecord {
    #[serde(rename = "R_s")]
    r_s: f64,
    #[serde(rename = "Q_HF")]
    q_hf: f64,
    #[serde(rename = "phi_HF")]
    phi_hf: f64,
    #[serde(rename = "R_1")]
    r_1: f64,
    #[serde(rename = "Q_1")]
    q_1: f64,
    #[serde(rename = "phi_1")]
    phi_1: f64,
    #[serde(rename = "R_2")]
    r_2: f64,
    #[serde(rename = "Q_2")]
    q_2: f64,
    #[serde(rename = "phi_2")]
    phi_2: f64,
    #[serde(rename = "Q_LF")]
    q_lf: f64,
    #[serde(rename = "phi_LF")]
    phi_lf: f64,
}

impl From<ParameterVector> for ParamRecord {
    fn from(p: ParameterVector) -> Self {
        let v = p.0;
        ParamRecord {
            r_s: v[0],
            q_hf: v[1],
            phi_hf: v[2],
            r_1: v[3],
            q_1: v[4],
            phi_1: v[5],
            r_2: v[6],
            q_2: v[7],
            phi_2: v[8],
            q_lf: v[9],
            phi_lf: v[10],
        }
    }
}

impl TryFrom<ParamRecord> for ParameterVector {
    type Error = Error;
    fn try_from(r: ParamRecord) -> Result<Self> {
        ParameterVector::new([
            r.r_s, r.q_hf, r.phi_hf, r.r_1, r.q_1, r.phi_1, r.r_2, r.q_2, r.phi_2, r.q_lf,
            r.phi_lf,
        ])
    }
}

/// Cell-state fixtures identified from a 5 Ah Li-ion pouch cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellState {
    /// 25 °C, 80 % SoC.
    StateA,
    /// 15 °C, 20 % SoC.
    StateB,
}

impl CellState {
    pub fn parameters(self) -> ParameterVector {
        match self {
            CellState::StateA => ParameterVector([
                1.937e-3, 1.132e7, -9.845e-1, 2.409e-3, 4.715e0, 6.618e-1, 3.273e-3, 6.419e0,
                9.347e-1, 8.585e2, 5.553e-1,
            ]),
            CellState::StateB => ParameterVector([
                2.017e-3, 1.020e7, -9.845e-1, 9.535e-3, 8.307e0, 5.698e-1, 2.647e-2, 6.497e0,
                9.546e-1, 6.250e2, 5.356e-1,
            ]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellState::StateA => "state_a",
            CellState::StateB => "state_b",
        }
    }
}

impl std::str::FromStr for CellState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "state_a" | "a" => Ok(CellState::StateA),
            "state_b" | "b" => Ok(CellState::StateB),
            other => Err(Error::domain(format!("unknown cell state '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_valid() {
        CellState::StateA.parameters().validate().unwrap();
        CellState::StateB.parameters().validate().unwrap();
        assert_eq!(CellState::StateA.parameters()[Q_LF], 858.5);
        assert_eq!(CellState::StateB.parameters()[R_2], 2.647e-2);
    }

    #[test]
    fn exponent_bounds() {
        let a = CellState::StateA.parameters();
        assert!(ParameterVector::new(*a.with(PHI_HF, 0.0).as_array()).is_err());
        assert!(ParameterVector::new(*a.with(PHI_HF, -1.0).as_array()).is_ok());
        assert!(ParameterVector::new(*a.with(PHI_1, 0.0).as_array()).is_err());
        assert!(ParameterVector::new(*a.with(PHI_1, 1.0).as_array()).is_ok());
        assert!(ParameterVector::new(*a.with(PHI_LF, 0.0).as_array()).is_ok());
        assert!(ParameterVector::new(*a.with(PHI_LF, 1.0).as_array()).is_err());
        assert!(ParameterVector::new(*a.with(R_S, -1e-3).as_array()).is_err());
        assert!(ParameterVector::new(*a.with(Q_2, f64::NAN).as_array()).is_err());
    }

    #[test]
    fn internal_round_trip() {
        let a = CellState::StateB.parameters();
        let back = ParameterVector::from_internal(&a.to_internal());
        assert!(back.max_rel_diff(&a) < 1e-14);
    }

    #[test]
    fn json_uses_named_fields() {
        let a = CellState::StateA.parameters();
        let s = serde_json::to_string(&a).unwrap();
        assert!(s.contains("\"Q_LF\":858.5"));
        let back: ParameterVector = serde_json::from_str(&s).unwrap();
        assert_eq!(back, a);
        let bad = s.replace("\"phi_LF\":0.5553", "\"phi_LF\":1.5");
        assert!(serde_json::from_str::<ParameterVector>(&bad).is_err());
    }
}
