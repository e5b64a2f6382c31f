//! Simulation and steering-control toolkit for impulsive neutral stochastic
//! heat equations with infinite delay, driven by fractional Brownian motion
//! with Hurst parameter H > 1/2.
//!
//! The crate samples scalar and Hilbert-space-valued fractional noise,
//! integrates the mild solution of the controlled system on a spectral
//! truncation of the Dirichlet Laplacian, computes the minimum-norm steering
//! control through the controllability Gramian, and audits the constants the
//! steering analysis depends on.

pub mod cli;
pub mod control;
pub mod fbm;
pub mod model;
pub mod phase_space;
mod quad;
pub mod solver;
pub mod spectral;

pub use fbm::{FgnMethod, HurstParam, QfbmPath, QfbmSpec};
pub use model::ProblemSpec;
pub use phase_space::{History, InitialFunction, PhaseWeight, Side};
pub use solver::{Grid, Trajectory};
pub use spectral::{FracPower, SpectralVector};
