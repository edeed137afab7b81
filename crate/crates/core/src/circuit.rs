//! Generalized Randles circuit: `R_s + Z_HF + Zarc_1 + Zarc_2 + Z_LF`, where
//! each `Z` is a constant phase element and `Zarc_i = R_i ‖ CPE_i`.
//!
//! Sensitivities are analytic. For a complex block derivative `dZ`, the
//! magnitude and phase derivatives follow from
//! `dρ = Re(conj(Z)·dZ)/ρ` and `dφ = Im(dZ/Z)`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::FrequencyGrid;
use crate::params::*;

/// Complex impedance in ohms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexImpedance(pub Complex64);

impl ComplexImpedance {
    pub fn new(re: f64, im: f64) -> Self {
        ComplexImpedance(Complex64::new(re, im))
    }

    pub fn from_polar(magnitude: f64, phase_rad: f64) -> Self {
        ComplexImpedance(Complex64::from_polar(magnitude, phase_rad))
    }

    pub fn re(&self) -> f64 {
        self.0.re
    }

    pub fn im(&self) -> f64 {
        self.0.im
    }

    pub fn magnitude(&self) -> f64 {
        self.0.norm()
    }

    /// Phase in radians, in `(-π, π]`.
    pub fn phase(&self) -> f64 {
        self.0.arg()
    }

    pub fn phase_deg(&self) -> f64 {
        self.phase().to_degrees()
    }
}

impl std::ops::Add for ComplexImpedance {
    type Output = ComplexImpedance;
    fn add(self, rhs: Self) -> Self {
        ComplexImpedance(self.0 + rhs.0)
    }
}

/// `(jω)^φ` on the principal branch.
#[inline]
fn jw_pow(phi: f64, omega: f64) -> Complex64 {
    let (s, c) = (FRAC_PI_2 * phi).sin_cos();
    Complex64::new(c, s) * omega.powf(phi)
}

/// `ln(jω)` on the principal branch.
#[inline]
fn ln_jw(omega: f64) -> Complex64 {
    Complex64::new(omega.ln(), FRAC_PI_2)
}

fn check_omega(omega: f64) -> Result<()> {
    if omega > 0.0 && omega.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("angular frequency must be positive, got {omega}")))
    }
}

/// Constant phase element `1 / (Q·(jω)^φ)`.
pub fn cpe_impedance(q: f64, phi: f64, omega: f64) -> Result<ComplexImpedance> {
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::domain(format!("CPE coefficient must be positive, got {q}")));
    }
    check_omega(omega)?;
    Ok(ComplexImpedance(cpe(q, phi, omega)))
}

#[inline]
fn cpe(q: f64, phi: f64, omega: f64) -> Complex64 {
    (jw_pow(phi, omega) * q).inv()
}

/// Parallel `R ‖ CPE`.
pub fn zarc_impedance(r: f64, q: f64, phi: f64, omega: f64) -> Result<ComplexImpedance> {
    if !(r > 0.0) {
        return Err(Error::domain(format!("resistance must be positive, got {r}")));
    }
    cpe_impedance(q, phi, omega)?;
    Ok(ComplexImpedance(zarc(r, q, phi, omega)))
}

#[inline]
fn zarc(r: f64, q: f64, phi: f64, omega: f64) -> Complex64 {
    (jw_pow(phi, omega) * q + 1.0 / r).inv()
}

/// The five series blocks evaluated separately.
#[derive(Debug, Clone, Copy)]
pub struct Blocks {
    pub series: ComplexImpedance,
    pub hf: ComplexImpedance,
    pub zarc1: ComplexImpedance,
    pub zarc2: ComplexImpedance,
    pub lf: ComplexImpedance,
}

impl Blocks {
    pub fn total(&self) -> ComplexImpedance {
        self.series + self.hf + self.zarc1 + self.zarc2 + self.lf
    }
}

pub fn blocks(theta: &ParameterVector, omega: f64) -> Result<Blocks> {
    theta.validate()?;
    check_omega(omega)?;
    let t = theta.as_array();
    Ok(Blocks {
        series: ComplexImpedance::new(t[R_S], 0.0),
        hf: ComplexImpedance(cpe(t[Q_HF], t[PHI_HF], omega)),
        zarc1: ComplexImpedance(zarc(t[R_1], t[Q_1], t[PHI_1], omega)),
        zarc2: ComplexImpedance(zarc(t[R_2], t[Q_2], t[PHI_2], omega)),
        lf: ComplexImpedance(cpe(t[Q_LF], t[PHI_LF], omega)),
    })
}

/// Total circuit impedance at angular frequency `omega`.
pub fn ecm_impedance(theta: &ParameterVector, omega: f64) -> Result<ComplexImpedance> {
    theta.validate()?;
    check_omega(omega)?;
    Ok(ComplexImpedance(model(theta.as_array(), omega)))
}

/// Unchecked model evaluation for inner loops.
#[inline]
pub(crate) fn model(t: &[f64; N_PARAMS], omega: f64) -> Complex64 {
    Complex64::new(t[R_S], 0.0)
        + cpe(t[Q_HF], t[PHI_HF], omega)
        + zarc(t[R_1], t[Q_1], t[PHI_1], omega)
        + zarc(t[R_2], t[Q_2], t[PHI_2], omega)
        + cpe(t[Q_LF], t[PHI_LF], omega)
}

/// Complex derivatives `∂Z/∂θ_k` at one frequency.
pub(crate) fn complex_gradient(t: &[f64; N_PARAMS], omega: f64) -> (Complex64, [Complex64; N_PARAMS]) {
    let ln = ln_jw(omega);
    let mut g = [Complex64::new(0.0, 0.0); N_PARAMS];

    g[R_S] = Complex64::new(1.0, 0.0);

    let hf = cpe(t[Q_HF], t[PHI_HF], omega);
    g[Q_HF] = -hf / t[Q_HF];
    g[PHI_HF] = -hf * ln;

    let mut total = Complex64::new(t[R_S], 0.0) + hf;
    for (r, q, p) in [(R_1, Q_1, PHI_1), (R_2, Q_2, PHI_2)] {
        let w = jw_pow(t[p], omega);
        let z = (w * t[q] + 1.0 / t[r]).inv();
        let z2 = z * z;
        g[r] = z2 / (t[r] * t[r]);
        g[q] = -z2 * w;
        g[p] = -z2 * w * ln * t[q];
        total += z;
    }

    let lf = cpe(t[Q_LF], t[PHI_LF], omega);
    g[Q_LF] = -lf / t[Q_LF];
    g[PHI_LF] = -lf * ln;
    total += lf;

    (total, g)
}

/// Magnitude/phase model values and their parameter gradients at one point.
#[derive(Debug, Clone, Copy)]
pub struct PointSensitivity {
    pub magnitude: f64,
    pub phase: f64,
    pub d_magnitude: [f64; N_PARAMS],
    pub d_phase: [f64; N_PARAMS],
}

pub(crate) fn point_sensitivity(t: &[f64; N_PARAMS], omega: f64) -> PointSensitivity {
    let (z, g) = complex_gradient(t, omega);
    let rho = z.norm();
    let zc = z.conj();
    let rho2 = rho * rho;
    let mut d_magnitude = [0.0; N_PARAMS];
    let mut d_phase = [0.0; N_PARAMS];
    for k in 0..N_PARAMS {
        let p = zc * g[k];
        d_magnitude[k] = p.re / rho;
        d_phase[k] = p.im / rho2;
    }
    PointSensitivity { magnitude: rho, phase: z.arg(), d_magnitude, d_phase }
}

/// Sensitivity matrix of the stacked model vector `[ρ_1..ρ_N, φ_1..φ_N]`
/// with respect to the linear-unit parameters: `2N × 11`.
pub fn jacobian(theta: &ParameterVector, grid: &FrequencyGrid) -> Result<DMatrix<f64>> {
    theta.validate()?;
    let n = grid.len();
    let mut j = DMatrix::zeros(2 * n, N_PARAMS);
    for (i, omega) in grid.angular().enumerate() {
        let s = point_sensitivity(theta.as_array(), omega);
        for k in 0..N_PARAMS {
            j[(i, k)] = s.d_magnitude[k];
            j[(n + i, k)] = s.d_phase[k];
        }
    }
    Ok(j)
}
