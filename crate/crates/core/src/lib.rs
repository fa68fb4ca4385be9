//! Coupled reverse-time SDE engine.
//!
//! Forward OU noising `dX = -α(t) X dt + g(t) dW` on `[0, 1]` (time 0 is data,
//! time 1 is noise) and its time reversal, driven by analytic score oracles so
//! every quantity has an exact reference. The main entry points are
//!
//! - [`editing::sync_edit`]: reverse the source path with the structured
//!   backward Brownian increments and drive the target process with the same
//!   increments (synchronous coupling);
//! - [`editing::resampling_ode_edit`]: evolve only the difference process
//!   against freshly resampled reference states;
//! - [`coupling::coupled_edit`]: the same construction for any orthonormal
//!   noise map `Q_t` (reflection, fixed, random).
//!
//! Reverse time `t_rev` always corresponds to forward time `1 - t_rev`.

pub mod coupling;
pub mod editing;
pub mod error;
pub mod paths;
pub mod quadrature;
pub mod rng;
pub mod schedule;
pub mod scores;
pub mod verify;

pub use error::{Error, Result};

/// State vectors live in `R^d`.
pub type Vector = nalgebra::DVector<f64>;
/// Dense `d x d` matrices (coupling maps).
pub type Matrix = nalgebra::DMatrix<f64>;
