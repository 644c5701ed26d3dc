//! Event-driven integration of the closed-loop hybrid system.
//!
//! Within each segment between events the controller modes, sensing
//! memberships and zero-clamp flags are frozen, so the right-hand side is
//! smooth and a fixed-step RK4 on a global grid is accurate. Guard crossings
//! are localized by bisection on a partial RK4 step and the step is split
//! there. Parameter sensitivities, when requested, are carried as extra
//! states through the same stages.

mod engine;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controllers::{validate_params, ControllerParams};
use crate::error::{Error, Result};
use crate::model::Scenario;

pub use engine::Law;

/// Default cap on logged events before a run is declared chattering.
pub const DEFAULT_MAX_EVENTS: usize = 1_000_000;

/// Measurement noise injected into the controllers' view of the targets.
///
/// Positions seen by PI agents are offset by `κ₁ν` and velocities seen by
/// tracking agents by `κ₂ν`; `ν` is redrawn per target at every sampling
/// instant and held in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub position_noise_scale: f64,
    pub velocity_noise_scale: f64,
    #[serde(default = "default_sample_interval")]
    pub sample_interval: f64,
    pub seed: u64,
}

fn default_sample_interval() -> f64 {
    0.05
}

impl NoiseModel {
    pub fn new(position_noise_scale: f64, velocity_noise_scale: f64, seed: u64) -> Self {
        NoiseModel {
            position_noise_scale,
            velocity_noise_scale,
            sample_interval: default_sample_interval(),
            seed,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.position_noise_scale >= 0.0 && self.velocity_noise_scale >= 0.0) {
            return Err(Error::InvalidParams("noise scales must be nonnegative".into()));
        }
        if !(self.sample_interval > 0.0) {
            return Err(Error::InvalidParams(
                "noise sample_interval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Standard normal draws, one row of `num_targets` per sampling instant
    /// in `[0, horizon)`.
    pub fn draws(&self, num_targets: usize, horizon: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let count = (horizon / self.sample_interval).ceil() as usize + 1;
        (0..count)
            .map(|_| {
                (0..num_targets)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    /// RK4 step; `None` picks `min(1e-3·T, 1e-2)`.
    pub step: Option<f64>,
    pub max_events: usize,
    /// Propagate parameter sensitivities alongside the state.
    pub sensitivities: bool,
    /// Keep a copy of the sensitivity state at every sample.
    pub trace_sensitivities: bool,
    pub noise: Option<NoiseModel>,
    /// Keep a sample at every step; otherwise only the first and last.
    pub record_samples: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            step: None,
            max_events: DEFAULT_MAX_EVENTS,
            sensitivities: false,
            trace_sensitivities: false,
            noise: None,
            record_samples: true,
        }
    }
}

impl SimOptions {
    pub fn with_sensitivities(mut self) -> Self {
        self.sensitivities = true;
        self
    }

    pub fn step_for(&self, horizon: f64) -> f64 {
        self.step.unwrap_or_else(|| (1e-3 * horizon).min(1e-2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Start,
    SenseEnter {
        target: usize,
        agent: usize,
    },
    SenseExit {
        target: usize,
        agent: usize,
    },
    /// The agent passes the target's position while sensing it.
    TargetPass {
        target: usize,
        agent: usize,
    },
    RHitsZero {
        target: usize,
    },
    ZExit {
        target: usize,
    },
    ReachSwitchPoint {
        agent: usize,
        phase: usize,
    },
    TrackPeriodEnd {
        agent: usize,
        phase: usize,
    },
    SaturationCross {
        agent: usize,
    },
    IntegratorActivate {
        agent: usize,
        phase: usize,
    },
    TargetBreakpoint {
        target: usize,
    },
    /// Held controller inputs change: a noise draw or a playback cell.
    ControlSample,
    HorizonEnd,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Start => "START",
            EventKind::SenseEnter { .. } => "SENSE_ENTER",
            EventKind::SenseExit { .. } => "SENSE_EXIT",
            EventKind::TargetPass { .. } => "TARGET_PASS",
            EventKind::RHitsZero { .. } => "R_HITS_ZERO",
            EventKind::ZExit { .. } => "Z_EXIT",
            EventKind::ReachSwitchPoint { .. } => "REACH_SWITCH_POINT",
            EventKind::TrackPeriodEnd { .. } => "TRACK_PERIOD_END",
            EventKind::SaturationCross { .. } => "SATURATION_CROSS",
            EventKind::IntegratorActivate { .. } => "INTEGRATOR_ACTIVATE",
            EventKind::TargetBreakpoint { .. } => "TARGET_BREAKPOINT",
            EventKind::ControlSample => "CONTROL_SAMPLE",
            EventKind::HorizonEnd => "HORIZON_END",
        }
    }

    pub fn agent_index(&self) -> Option<usize> {
        match *self {
            EventKind::SenseEnter { agent, .. }
            | EventKind::SenseExit { agent, .. }
            | EventKind::TargetPass { agent, .. }
            | EventKind::ReachSwitchPoint { agent, .. }
            | EventKind::TrackPeriodEnd { agent, .. }
            | EventKind::SaturationCross { agent }
            | EventKind::IntegratorActivate { agent, .. } => Some(agent),
            _ => None,
        }
    }

    pub fn target_index(&self) -> Option<usize> {
        match *self {
            EventKind::SenseEnter { target, .. }
            | EventKind::SenseExit { target, .. }
            | EventKind::TargetPass { target, .. }
            | EventKind::RHitsZero { target }
            | EventKind::ZExit { target }
            | EventKind::TargetBreakpoint { target } => Some(target),
            _ => None,
        }
    }

    pub fn phase_index(&self) -> Option<usize> {
        match *self {
            EventKind::ReachSwitchPoint { phase, .. }
            | EventKind::TrackPeriodEnd { phase, .. }
            | EventKind::IntegratorActivate { phase, .. } => Some(phase),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// State at the end of one accepted step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub time: f64,
    pub positions: Vec<f64>,
    pub uncertainties: Vec<f64>,
    /// Controls in effect right after `time`.
    pub controls: Vec<f64>,
    pub targets: Vec<f64>,
    /// Uncertainties at the midpoint of the step ending at `time`.
    pub midpoint_uncertainties: Option<Vec<f64>>,
}

/// Jacobians of the state with respect to the flattened parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityState {
    pub time: f64,
    /// `N × D`; row `j` is zero outside agent `j`'s parameter block.
    pub s_prime: Vec<Vec<f64>>,
    pub integrator_prime: Vec<Vec<f64>>,
    /// `M × D`.
    pub r_prime: Vec<Vec<f64>>,
}

/// Contribution of one inter-event segment to `∫ Σ R′ dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentContribution {
    pub start: f64,
    pub end: f64,
    pub integral: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityOutput {
    pub num_params: usize,
    pub block_offsets: Vec<usize>,
    /// `∫₀ᵀ Σᵢ R′ᵢ dt`.
    pub integral: Vec<f64>,
    pub segments: Vec<SegmentContribution>,
    /// Event-time derivatives, aligned with the event log; `None` where the
    /// event time does not depend on the parameters.
    pub tau_prime: Vec<Option<Vec<f64>>>,
    pub final_state: SensitivityState,
    pub trace: Vec<SensitivityState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub horizon: f64,
    pub step: f64,
    pub samples: Vec<Sample>,
    pub events: Vec<Event>,
    pub cost: f64,
    /// Whether each agent ever had a target within its sensing range.
    pub agent_sensed: Vec<bool>,
    pub sensitivity: Option<SensitivityOutput>,
    /// Flattened parameters the run used, when driven by parameters.
    pub params_vector: Option<Vec<f64>>,
    pub options: SimOptions,
}

impl SimOutput {
    pub fn event_kinds(&self) -> Vec<EventKind> {
        self.events.iter().map(|e| e.kind).collect()
    }

    pub fn min_uncertainty(&self) -> f64 {
        self.samples
            .iter()
            .flat_map(|s| {
                s.uncertainties
                    .iter()
                    .chain(s.midpoint_uncertainties.iter().flatten())
            })
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

fn check_inputs(scenario: &Scenario, options: &SimOptions) -> Result<()> {
    scenario.validate()?;
    if let Some(h) = options.step {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "integration step must be positive, got {h}"
            )));
        }
    }
    if let Some(noise) = &options.noise {
        noise.check()?;
    }
    Ok(())
}

/// Runs the closed loop under a parametric controller.
pub fn simulate(scenario: &Scenario, params: &ControllerParams, options: &SimOptions) -> Result<SimOutput> {
    check_inputs(scenario, options)?;
    let violations = validate_params(params, scenario);
    if let Some(v) = violations.first() {
        return Err(Error::InvalidParams(v.to_string()));
    }
    let mut out = engine::run(scenario, Law::Params(params), options)?;
    out.params_vector = Some(params.to_vector());
    Ok(out)
}

/// Same as [`simulate`] but skips the parameter feasibility check, for
/// probing perturbed parameters.
pub fn simulate_unchecked(
    scenario: &Scenario,
    params: &ControllerParams,
    options: &SimOptions,
) -> Result<SimOutput> {
    check_inputs(scenario, options)?;
    let mut out = engine::run(scenario, Law::Params(params), options)?;
    out.params_vector = Some(params.to_vector());
    Ok(out)
}

/// Plays back piecewise-constant controls, `values[j][k]` on
/// `[k·cell, (k+1)·cell)`. Sensitivities are not available in this mode.
pub fn simulate_playback(
    scenario: &Scenario,
    cell: f64,
    values: &[Vec<f64>],
    options: &SimOptions,
) -> Result<SimOutput> {
    check_inputs(scenario, options)?;
    if values.len() != scenario.num_agents() {
        return Err(Error::InvalidParams(format!(
            "{} control sequences for {} agents",
            values.len(),
            scenario.num_agents()
        )));
    }
    if !(cell > 0.0) {
        return Err(Error::InvalidParams("playback cell must be positive".into()));
    }
    if values.iter().flatten().any(|u| !(u.abs() <= 1.0)) {
        return Err(Error::InvalidParams("controls must lie in [-1, 1]".into()));
    }
    let mut options = options.clone();
    options.sensitivities = false;
    options.trace_sensitivities = false;
    engine::run(scenario, Law::Playback { cell, values }, &options)
}

#[cfg(test)]
mod tests;
