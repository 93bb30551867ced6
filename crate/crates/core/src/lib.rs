//! Linear-quadratic mean-field control over weighted particle ensembles.
//!
//! Two solution routes are provided and cross-checked: a Riccati
//! (completion-of-square) feedback and a representation through an
//! operator-valued reproducing kernel built from the same Riccati flows.

pub mod config;
pub mod ensemble;
pub mod error;
pub mod export;
pub mod kernel;
pub mod linalg;
pub mod ode;
mod oracle;
pub mod phi;
pub mod problem;
pub mod propagator;
pub mod rng;
pub mod solver;
pub mod stochastic;
pub mod trajectory;
pub mod verify;

pub use config::{emit_problem, parse_config, parse_problem, EnsembleSpec, NoiseConfig, PhiConfig, RunConfig};
pub use ensemble::{Ensemble, Field, FieldPath};
pub use error::{MfcError, Result};
pub use problem::{validate, CoeffPath, Dims, ProblemSpec, TimeGrid, ValidationReport};
pub use propagator::{integrate_lambda, integrate_riccati, Coefficients, RiccatiBundle, TerminalMode};
pub use trajectory::{ControlPath, StatePath, TrajectoryWithControl};
pub use kernel::{Block, KernelHandle};
pub use phi::{phi_gradient, PhiSpec};
pub use solver::{
    brute_force_oracle, cost, cost_parts, drift_trajectory, solve_cos, solve_kernel_lq, solve_nonlinear,
    FixedPointOptions, Method, Solution,
};
pub use stochastic::{
    conditional_expectation, estimate_cost_mc, for_each_kernel_stochastic_path, kernel_apply_stochastic, monte_carlo,
    reproducing_residual_stochastic, simulate, solve_kernel_stochastic, solve_stochastic, stochastic_value,
    AdaptedTrajectory, AffineRandomField, McReport, NoiseSpec, PathEnsemble, Policy, StochasticFeedback,
};
