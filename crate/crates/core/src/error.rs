use thiserror::Error;

/// Errors produced by the monitoring model, simulator and optimizer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("time {t} outside of the domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },

    #[error("invalid interval: t1 = {t1} > t2 = {t2}")]
    InvalidInterval { t1: f64, t2: f64 },

    #[error("invalid controller parameters: {0}")]
    InvalidParams(String),

    #[error("trajectory does not cover [0, {horizon}] (ends at {end})")]
    IncompleteTrajectory { horizon: f64, end: f64 },

    #[error("event limit of {limit} exceeded at t = {time} (Zeno-like chattering)")]
    EventLimit { limit: usize, time: f64 },

    #[error("simulation carries no sensitivities")]
    MissingSensitivities,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
