//! Stochastic averaging for Hamiltonian systems driven by a completely
//! integrable Stratonovich noise family.
//!
//! The crate provides symplectic primitives, a small model library, SDE
//! integrators with reproducible noise, first order averaging and the
//! second order diffusion limit on the level space.

pub mod averaging;
pub mod error;
pub mod models;
pub mod noise;
pub mod parallel;
pub mod poisson;
pub mod sde;
pub mod second_order;
pub mod stats;
pub mod symplectic;
pub mod torus;

pub use averaging::{
    averaged_rhs, coupled_deviation_experiment, exit_probability_experiment, rate_experiment,
    solve_averaged_ode, torus_average, AveragedODE, AveragedPath, MonteCarloSettings,
    RateFitResult, StepPolicy,
};
pub use error::{Error, Result};
pub use models::{
    build_1dof_case, build_harmonic_family, build_r4_example, model_by_name, model_catalog,
    perturbation_by_name, ActionAngle, ActionAngleChart, IntegrableModel, Perturbation,
    PlanarChart, MODEL_NAMES,
};
pub use noise::{NoisePath, SeedDescriptor};
pub use parallel::Executor;
pub use poisson::{apply_generator, solve_poisson, GeneratorSpec};
pub use second_order::{
    assemble_diffusion, simulate_limit_sde, weak_convergence_experiment, DiffusionModel,
    LevelGrid, LimitReading, WeakConvergenceResult, WeakSettings,
};
pub use sde::{integrate, integrate_coupled, Scheme, SimulationParams, TrajectoryRecord};
pub use symplectic::{omega_pairing, poisson_bracket, symplectic_gradient, PhasePoint, ScalarFunction, SmoothField};
pub use torus::{TorusFunction, TorusGrid};
