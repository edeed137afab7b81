//! Battery impedance spectroscopy experiment design.
//!
//! The crate simulates EIS spectra of a generalized Randles equivalent
//! circuit, fits its eleven parameters by weighted complex nonlinear least
//! squares, bounds the estimator variance through the Fisher information
//! matrix, and moves measurement frequencies one at a time to maximize the
//! smallest information eigenvalue (E-optimal design).
//!
//! ```
//! use eisopt::{CellState, ErrorStructure, FrequencyGrid, fisher, crlb};
//!
//! let theta = CellState::StateA.parameters();
//! let full = FrequencyGrid::decade_spaced(1e4, 0.01, 10).unwrap();
//! let reduced = full.reduce_ppd(0.1, 5).unwrap();
//! let err = ErrorStructure::default();
//! let base = crlb(&fisher(&theta, &full, &err, true)).unwrap();
//! let low = crlb(&fisher(&theta, &reduced, &err, true)).unwrap();
//! assert!(low[9] > base[9]);
//! ```

pub mod circuit;
pub mod design;
pub mod error;
pub mod estimation;
pub mod frequency;
pub mod information;
pub mod measurement;
pub mod numeric;
pub mod par;
pub mod params;
pub mod sweep;

pub use circuit::{ecm_impedance, cpe_impedance, jacobian, ComplexImpedance};
pub use error::{Error, Result};
pub use design::{run_design, AdjustmentTrace, DesignConfig};
pub use frequency::{total_time, FrequencyGrid, Spacing, TimeModel};
pub use par::Execution;
pub use params::{CellState, ParameterVector, N_PARAMS, PARAM_NAMES};
pub use information::{crlb, ellipsoid_log_volume, fisher, Coordinates, FisherMatrix, UncertaintyReport};
pub use measurement::{synthesize, ErrorStructure, Spectrum};
