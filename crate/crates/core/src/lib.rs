//! Controlled branching diffusions: a Monte Carlo particle engine, a monotone
//! finite-difference HJB solver, and the estimators that cross-check them.
//!
//! The usual flow is: load a [`model::ModelParams`], solve the HJB equation
//! with [`hjb::solve`], turn the solution into a feedback [`policy::Policy`]
//! with [`policy::extract_feedback`], and compare Monte Carlo estimates from
//! [`simulator::simulate`] against the grid with the checks in [`estimator`].

// `!(x <= y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod estimator;
pub mod experiment;
pub mod hjb;
pub mod labels;
pub mod model;
pub mod output;
pub mod policy;
pub mod rng;
pub mod simulator;

pub use estimator::{estimate_value, Estimate, McConfig, StoppingRule, TestFunction};
pub use hjb::{solve, BoundaryRule, GridConfig, ValueGrid};
pub use labels::{Label, Population};
pub use model::{CoefficientSpec, ModelParams};
pub use policy::{extract_feedback, Policy};
pub use simulator::{simulate, simulate_coupled, SimConfig};
