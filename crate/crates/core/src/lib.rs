//! Shared-control assistance for a one-dimensional approach to an obstacle:
//! vehicle dynamics, driver demand models, a stochastic shortest-path solver,
//! cost-map post-processing, the online supervisor and a simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // negations keep NaN on the unsafe side

pub mod costmap;
pub mod driver;
pub mod dynamics;
pub mod error;
pub mod scalar;
pub mod sim;
pub mod solver;
pub mod supervisor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DynamicsParamsF64 = dynamics::DynamicsParams<f64>;
pub type DynamicsParamsF32 = dynamics::DynamicsParams<f32>;
pub type StateGridF64 = dynamics::StateGrid<f64>;
pub type StateGridF32 = dynamics::StateGrid<f32>;
pub type DriverModelF64 = driver::DriverModel<f64>;
pub type DriverModelF32 = driver::DriverModel<f32>;
pub type CostMapF64 = costmap::CostMap<f64>;
pub type CostMapF32 = costmap::CostMap<f32>;
pub type SafeBoundaryF64 = costmap::SafeBoundary<f64>;
pub type SafeBoundaryF32 = costmap::SafeBoundary<f32>;
pub type SupervisionResultF64 = supervisor::SupervisionResult<f64>;
pub type SupervisionResultF32 = supervisor::SupervisionResult<f32>;
pub type WorldF64 = sim::World<f64>;
pub type WorldF32 = sim::World<f32>;
pub type EpisodeTraceF64 = sim::EpisodeTrace<f64>;
pub type EpisodeTraceF32 = sim::EpisodeTrace<f32>;
