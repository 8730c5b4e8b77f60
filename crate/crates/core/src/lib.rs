//! Numerical verification of viability and ε-viability for stochastic
//! semilinear control systems in a spectral truncation.
//!
//! The crate works with a diagonal generator `A = diag(mu)` on `R^n`, a
//! noise truncated to `m` directions and controls in `R^d`. The building
//! blocks are:
//!
//! * [`spectral`]: the semigroup `S(t)` and the closed-form convolution
//!   integrals of the frozen one-step law.
//! * [`model`]: the coefficient registry (`f`, `g`, `F`, `G`) and control sets.
//! * [`constraint`]: the closed set `K` with distance and projection.
//! * [`one_step`]: exact one-step sampling and an exponential-Euler integrator.
//! * [`tangency`]: the quasi-tangency residual, its minimisation over
//!   controls and its decay profile in `h`.
//! * [`builder`]: greedy construction and audit of ε-approximate mild solutions.
//! * [`viability`]: trajectory-level mean-square distance experiments.
//! * [`nagumo`]: boundary conditions for smooth sets and the Galerkin ladder.
//! * [`config`] and [`experiment`]: declarative experiments and artifacts.

// `!(x > 0.0)` style checks are deliberate: NaN must be rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod builder;
pub mod config;
pub mod constraint;
pub mod error;
pub mod experiment;
pub mod model;
pub mod nagumo;
pub mod one_step;
pub mod rng;
pub mod spectral;
pub mod tangency;
pub mod tolerances;
pub mod viability;

pub use error::{Error, Result};

/// Column vector type used throughout the crate.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix type used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
