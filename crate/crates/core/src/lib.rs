//! Persistent monitoring of mobile targets on a line: an event-driven
//! simulator of the agent/uncertainty hybrid system, exact parameter
//! gradients by infinitesimal perturbation analysis, and a projected
//! descent optimizer for two parametric control laws.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::needless_range_loop
)]

pub mod canonical;
pub mod config;
pub mod controllers;
pub mod error;
pub mod ipa;
pub mod model;
pub mod optimizer;
pub mod oracle;
pub mod simulator;
pub mod targets;

pub use config::ScenarioFile;
pub use controllers::{
    ControllerParams, OptimalAgentParams, PracticalAgentParams, PracticalGains, TrackingCombination, Variant,
};
pub use error::{Error, Result};
pub use ipa::GradientReport;
pub use model::{AgentSpec, Scenario, TargetSpec};
pub use optimizer::{optimize, DescentConfig, OptimizeResult, StopReason};
pub use simulator::{simulate, Event, EventKind, NoiseModel, SimOptions, SimOutput};
pub use targets::TargetTrajectory;
