//! Kernel debiased plug-in estimation over finite-support models.

pub mod baselines;
pub mod benchmark;
pub mod bootstrap;
pub mod config;
pub mod distribution;
pub mod error;
pub mod functionals;
pub mod kdpe;
pub mod kernel;
pub mod observation;
pub mod preestimate;
pub mod quadrature;
pub mod simulation;
pub mod solver;

pub use error::{KdpeError, Result};
