//! Fractional-order battery pack simulation with model-based active
//! balancing.
//!
//! * [`fom`]: single-cell fractional-order model and OCV curve.
//! * [`pack`]: series pack, cut-off detection, plant noise.
//! * [`estimator`]: per-cell extended Kalman filter.
//! * [`qp`]: dense active-set QP solver.
//! * [`balancer`]: allocation QPs and closed-loop runs.
//! * [`identify`]: PSO-GA parameter identification.
//! * [`cycle`]: drive cycles, logs, traces and metrics.
//! * [`config`]: TOML pack configuration.

pub mod balancer;
pub mod config;
pub mod cycle;
pub mod error;
pub mod estimator;
pub mod fom;
pub mod identify;
pub mod pack;
pub mod qp;

pub use balancer::{run_algorithm, run_balanced, run_baseline, RunOptions, Topology};
pub use config::PackConfig;
pub use cycle::{DriveCycle, Metrics, SimTrace};
pub use error::{ConfigError, CycleError, Error, ModelError};
pub use fom::{CellState, FomParams, OcvPolynomial};
pub use pack::{PackLimits, PackModel, PackState};
