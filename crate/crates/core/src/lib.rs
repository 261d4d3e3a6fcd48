//! Stochastic receding-horizon control with output feedback and hard input
//! bounds.
//!
//! The crate covers the full pipeline: plant validation and horizon lifting
//! ([`sysmodel`]), the conditional-mean filter and its Riccati limit
//! ([`estimator`]), Monte-Carlo estimation of the saturated-innovation
//! expectation matrices ([`lambdas`]), the drift-constraint stability layer
//! ([`stability`]), convex program assembly and solution over saturated
//! innovation-feedback policies ([`optimizer`]), and a closed-loop simulator
//! with batch statistics ([`controller`]).

pub mod controller;
pub mod demo;
pub mod estimator;
pub mod lambdas;
pub(crate) mod linalg;
pub mod optimizer;
pub mod stability;
pub mod sysmodel;
pub mod tol;

pub use controller::{BatchStats, RunStatus, SimulationConfig, TrajectoryRecord};
pub use estimator::{CovarianceBounds, ErrorLift, FilterState, RiccatiSolution};
pub use lambdas::{LambdaSet, SatKind, SaturationFunction};
pub use optimizer::{ConvexProgram, Policy, SoftConstraintSpec, SolveOptions};
pub use stability::StabilityParams;
pub use sysmodel::{
    CostWeights, HorizonConfig, JordanSplit, LiftedSystem, LoadedModel, ModelFile, SystemModel,
    ValidatedModel,
};
