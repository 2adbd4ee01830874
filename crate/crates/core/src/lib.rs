//! Desk-scale model of EPR-state generation from a single temporally
//! multiplexed squeezed-light source.
//!
//! The crate covers the full chain from analytic Gaussian-state models to
//! synthetic homodyne data and back:
//!
//! - [`gaussian`] — quadrature covariance matrices, physicality bounds and
//!   entanglement criteria,
//! - [`opo`] — squeezing spectra of a below-threshold OPO including seed-beam
//!   noise and phase-fluctuation averaging,
//! - [`network`] — the switch/delay/beam-splitter network algebra and the
//!   analytic two-mode covariance it produces,
//! - [`synth`] — trigger-aligned homodyne time-trace synthesis with detector
//!   artifacts and calibration sets,
//! - [`pipeline`] — slope removal, repeating-noise removal, shot-normalized
//!   spectra and single-frequency mode extraction,
//! - [`tomography`] — partial tomography, covariance reconstruction,
//!   phase-fluctuation fitting and report generation,
//! - [`config`] — the experiment profile read by the command-line tools.
//!
//! All variances are expressed relative to the vacuum variance `V0 = 1/2`
//! unless a function documents otherwise.

pub mod config;
pub mod error;
pub mod gaussian;
pub mod network;
pub mod opo;
pub mod pipeline;
pub mod synth;
pub mod tomography;
pub mod trace;

pub use error::{Error, Result};

/// Vacuum (shot-noise) quadrature variance in absolute units.
pub const V0: f64 = 0.5;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
