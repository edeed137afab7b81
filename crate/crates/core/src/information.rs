//! Fisher information, Cramér-Rao bounds and uncertainty-ellipsoid volume.
//!
//! With independent Gaussian magnitude/phase errors and a diagonal
//! covariance `Q = diag(σ_ρ²(ρ_i(θ)), σ_φ²)`, each frequency contributes
//!
//! ```text
//! F += ∇ρ ∇ρᵀ / σ_ρ² + ∇φ ∇φᵀ / σ_φ² + 2 (∇ρ/ρ)(∇ρ/ρ)ᵀ
//! ```
//!
//! where the last term is the covariance-derivative (trace) term, present
//! because `σ_ρ` scales with `ρ`.
//!
//! Parameter units span ten decades, so inversion and determinants go
//! through a Jacobi-equilibrated Cholesky factorization, and volumes are
//! kept in log space.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::circuit::{point_sensitivity, PointSensitivity};
use crate::error::{Error, Result};
use crate::frequency::FrequencyGrid;
use crate::measurement::ErrorStructure;
use crate::numeric::pairwise_reduce;
use crate::params::{ParameterVector, N_PARAMS};

/// Smallest admissible `λ_min/λ_max` of the equilibrated matrix.
pub const PD_RATIO: f64 = 1e-12;

/// Coordinates in which eigenvalues (and the matching log-volume) are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinates {
    /// Raw parameter units.
    Linear,
    /// `ln θ` for resistances and CPE coefficients, exponents unchanged.
    #[default]
    Log,
}

type Block = [f64; N_PARAMS * N_PARAMS];

fn point_information(s: &PointSensitivity, rel_sigma: f64, sigma_phase: f64, trace: bool) -> Block {
    let mut out = [0.0; N_PARAMS * N_PARAMS];
    let sr = rel_sigma * s.magnitude;
    let wr = 1.0 / (sr * sr);
    let wp = 1.0 / (sigma_phase * sigma_phase);
    let wt = if trace { 2.0 / (s.magnitude * s.magnitude) } else { 0.0 };
    for k in 0..N_PARAMS {
        for l in k..N_PARAMS {
            let v = (wr + wt) * s.d_magnitude[k] * s.d_magnitude[l] + wp * s.d_phase[k] * s.d_phase[l];
            out[k * N_PARAMS + l] = v;
            out[l * N_PARAMS + k] = v;
        }
    }
    out
}

fn add_blocks(a: &Block, b: &Block) -> Block {
    let mut out = *a;
    out.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += y);
    out
}

/// Information matrix in linear units for raw frequencies (Hz). Summation is
/// pairwise in grid order.
pub(crate) fn information_at(
    theta: &[f64; N_PARAMS],
    frequencies: &[f64],
    err: &ErrorStructure,
    trace: bool,
) -> DMatrix<f64> {
    let (rel, sp) = (err.rel_sigma(), err.sigma_phase());
    let blocks: Vec<Block> = frequencies
        .iter()
        .map(|f| point_information(&point_sensitivity(theta, 2.0 * std::f64::consts::PI * f), rel, sp, trace))
        .collect();
    let sum = pairwise_reduce(&blocks, &add_blocks).unwrap_or([0.0; N_PARAMS * N_PARAMS]);
    DMatrix::from_row_slice(N_PARAMS, N_PARAMS, &sum)
}

/// Contribution of a single frequency, in the requested coordinates.
pub(crate) fn point_matrix(
    theta: &ParameterVector,
    f_hz: f64,
    err: &ErrorStructure,
    trace: bool,
    coords: Coordinates,
) -> DMatrix<f64> {
    let s = point_sensitivity(theta.as_array(), 2.0 * std::f64::consts::PI * f_hz);
    let b = point_information(&s, err.rel_sigma(), err.sigma_phase(), trace);
    let m = DMatrix::from_row_slice(N_PARAMS, N_PARAMS, &b);
    match coords {
        Coordinates::Linear => m,
        Coordinates::Log => to_log_coords(&m, theta),
    }
}

/// `D F D` with `D = dθ/dx` of the log reparameterization.
pub(crate) fn to_log_coords(f: &DMatrix<f64>, theta: &ParameterVector) -> DMatrix<f64> {
    let d = theta.internal_scale();
    DMatrix::from_fn(N_PARAMS, N_PARAMS, |k, l| f[(k, l)] * d[k] * d[l])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherMatrix {
    /// Row-major 11×11 matrix in linear parameter units.
    matrix: DMatrix<f64>,
    theta: ParameterVector,
    frequencies: Vec<f64>,
    include_trace_term: bool,
}

/// Fisher information of the stacked magnitude/phase model at `theta`.
pub fn fisher(theta: &ParameterVector, grid: &FrequencyGrid, err: &ErrorStructure, include_trace_term: bool) -> FisherMatrix {
    FisherMatrix {
        matrix: information_at(theta.as_array(), grid.frequencies(), err, include_trace_term),
        theta: *theta,
        frequencies: grid.frequencies().to_vec(),
        include_trace_term,
    }
}

impl FisherMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn theta(&self) -> &ParameterVector {
        &self.theta
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn include_trace_term(&self) -> bool {
        self.include_trace_term
    }

    pub fn in_coordinates(&self, coords: Coordinates) -> DMatrix<f64> {
        match coords {
            Coordinates::Linear => self.matrix.clone(),
            Coordinates::Log => to_log_coords(&self.matrix, &self.theta),
        }
    }

    /// Ascending eigenvalues in the requested coordinates.
    pub fn eigenvalues(&self, coords: Coordinates) -> Vec<f64> {
        sorted_eigenvalues(&self.in_coordinates(coords))
    }

    pub fn lambda_min(&self, coords: Coordinates) -> f64 {
        self.eigenvalues(coords)[0]
    }

    /// Ellipsoid log-volume, `−½ log det F`, in the requested coordinates.
    pub fn log_volume(&self, coords: Coordinates) -> Result<f64> {
        log_volume_matrix(&self.in_coordinates(coords))
    }

    /// Summary of the bound for reporting.
    pub fn report(&self, coords: Coordinates) -> Result<UncertaintyReport> {
        let eigenvalues = self.eigenvalues(coords);
        let crlb = crlb(self)?;
        Ok(UncertaintyReport {
            crlb,
            lambda_min: eigenvalues[0],
            eigenvalues,
            log_volume: self.log_volume(coords)?,
            coordinates: coords,
        })
    }
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

struct Equilibrated {
    scale: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Jacobi scaling `A = S F S`, `S = diag(F_kk^{-1/2})`, followed by a
/// positive-definiteness check and Cholesky factorization.
fn equilibrate(f: &DMatrix<f64>) -> Result<Equilibrated> {
    let n = f.nrows();
    if n == 0 || n != f.ncols() {
        return Err(Error::domain("information matrix must be square and nonempty"));
    }
    let diag = f.diagonal();
    if diag.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::Singular { lambda_min: diag.min(), condition: f64::INFINITY });
    }
    let scale = diag.map(|d| 1.0 / d.sqrt());
    let a = DMatrix::from_fn(n, n, |i, j| f[(i, j)] * scale[i] * scale[j]);
    let ev = SymmetricEigen::new(a.clone()).eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    if !(lo > PD_RATIO * hi) {
        return Err(Error::Singular { lambda_min: lo, condition: if lo > 0.0 { hi / lo } else { f64::INFINITY } });
    }
    let chol = a
        .cholesky()
        .ok_or(Error::Singular { lambda_min: lo, condition: hi / lo })?;
    Ok(Equilibrated { scale, chol })
}

/// `diag(F⁻¹)` for any symmetric positive-definite matrix.
pub fn crlb_matrix(f: &DMatrix<f64>) -> Result<DVector<f64>> {
    let e = equilibrate(f)?;
    let inv = e.chol.inverse();
    Ok(DVector::from_fn(f.nrows(), |k, _| inv[(k, k)] * e.scale[k] * e.scale[k]))
}

/// Minimum variances of unbiased estimators of each parameter (linear units).
pub fn crlb(f: &FisherMatrix) -> Result<[f64; N_PARAMS]> {
    // Log coordinates first: equilibration then sees O(1) scales.
    let log = f.in_coordinates(Coordinates::Log);
    let c = crlb_matrix(&log)?;
    let d = f.theta.internal_scale();
    Ok(std::array::from_fn(|k| c[k] * d[k] * d[k]))
}

/// `−½ log det F` of a symmetric positive-definite matrix.
pub fn log_volume_matrix(f: &DMatrix<f64>) -> Result<f64> {
    let e = equilibrate(f)?;
    let l = e.chol.l();
    let logdet_a: f64 = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let logdet_f = logdet_a - 2.0 * e.scale.iter().map(|s| s.ln()).sum::<f64>();
    Ok(-0.5 * logdet_f)
}

/// Ellipsoid log-volume in linear parameter units.
pub fn ellipsoid_log_volume(f: &FisherMatrix) -> Result<f64> {
    f.log_volume(Coordinates::Linear)
}

/// `exp(log_v − log_v_ref)`.
pub fn normalized_volume(log_v: f64, log_v_ref: f64) -> f64 {
    (log_v - log_v_ref).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub crlb: [f64; N_PARAMS],
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    /// `−½ Σ log λ_i` over `eigenvalues`.
    pub log_volume: f64,
    pub coordinates: Coordinates,
}

impl UncertaintyReport {
    /// CSV with one row per parameter.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W, theta: &ParameterVector) -> Result<()> {
        writeln!(w, "parameter,value,crlb,std,rel_std")?;
        for (k, name) in crate::params::PARAM_NAMES.iter().enumerate() {
            let sd = self.crlb[k].sqrt();
            writeln!(w, "{name},{},{},{},{}", theta[k], self.crlb[k], sd, sd / theta[k].abs())?;
        }
        Ok(())
    }
}
