//! Numerical core for minimum-variance estimators of conditional expectations
//! in continuous-time nonlinear filtering.
//!
//! Everything here is pure computation over `alloc` buffers: model
//! specifications, Euler–Maruyama ensembles with log-domain weights, implicit
//! backward PDE solvers, Kalman–Bucy and control Riccati oracles, the four
//! estimators and the partially observed control pipeline. IO, configuration
//! files and parallel orchestration live in the `fbsde` crate.
#![no_std]

extern crate alloc;

pub mod control;
pub mod error;
pub mod estimators;
pub mod kalman;
pub mod linalg;
pub mod math;
pub mod model;
pub mod particle;
pub mod pde;
pub mod quadrature;
pub mod rng;
pub mod sde;

pub use error::{Error, Result, Warning};
pub use model::{
    CostSpec, FunctionId, LinearGaussianModelSpec, ModelSpec, Prior, RunningCost, ScalarFn,
    ScalarModelSpec, SpaceGrid, TerminalCost, TimeGrid,
};
