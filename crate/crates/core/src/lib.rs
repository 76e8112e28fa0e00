//! Simulation and analysis toolkit for hybrid systems with fast Markov
//! switching and slow diffusion.
//!
//! The central object is the two-parameter process
//!
//! ```text
//! dX(t) = f(X(t), a(t)) dt + sqrt(delta) * sigma(X(t), a(t)) dW(t)
//! ```
//!
//! where `a(t)` is a finite-state Markov chain with generator `Q/eps`.
//! As `eps` and `delta` shrink, trajectories track the averaged ODE
//! `dx = fbar(x) dt` with `fbar(x) = sum_i f(x,i) nu_i`, and the invariant
//! measure of the hybrid process concentrates on the occupation measure of
//! the averaged system's limit cycle. This crate simulates the hybrid
//! process exactly in its switching structure, constructs the averaged
//! system (equilibria, limit cycle, occupation measure), and provides the
//! Monte Carlo experiments that probe the convergence quantitatively.
//!
//! Module map:
//! - [`ctmc`]: exact simulation and stationary analysis of the switching chain
//! - [`hybrid`]: pathwise simulation of the hybrid SDE and switching ODE
//! - [`averaged`]: averaged vector field, equilibria, limit cycles, occupation measure
//! - [`measures`]: discrete measures, sliced Wasserstein and energy distances
//! - [`models`]: predator-prey presets and persistence diagnostics
//! - [`experiments`]: closeness, exit-time, convergence-sweep and audit experiments

pub mod averaged;
pub mod ctmc;
pub mod error;
pub mod experiments;
pub mod hybrid;
pub mod measures;
pub mod models;
pub mod rng;

pub use error::{Error, Result};

/// Toolkit version echoed into every emitted report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
