//! Problem instance and the uncertainty model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::SimOutput;
use crate::targets::TargetTrajectory;

/// `R` values at or below this are treated as sitting on the zero boundary.
pub const ZERO_BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub initial_position: f64,
    pub sensing_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// Uncertainty growth rate while unobserved.
    #[serde(alias = "A")]
    pub growth_rate: f64,
    /// Uncertainty reduction rate under full coverage.
    #[serde(alias = "B")]
    pub reduction_rate: f64,
    #[serde(alias = "R0")]
    pub initial_uncertainty: f64,
    pub trajectory: TargetTrajectory,
}

/// A complete problem instance: agents, targets and the horizon `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub agents: Vec<AgentSpec>,
    pub targets: Vec<TargetSpec>,
    pub horizon: f64,
    pub separation_margin: f64,
}

impl Scenario {
    pub fn new(
        agents: Vec<AgentSpec>,
        targets: Vec<TargetSpec>,
        horizon: f64,
        separation_margin: f64,
    ) -> Result<Self> {
        let scenario = Scenario {
            agents,
            targets,
            horizon,
            separation_margin,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if self.agents.is_empty() {
            return bad("at least one agent is required".into());
        }
        if self.targets.is_empty() {
            return bad("at least one target is required".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.separation_margin >= 0.0) {
            return bad("separation_margin must be nonnegative".into());
        }
        for (j, a) in self.agents.iter().enumerate() {
            if !(a.sensing_range > 0.0 && a.sensing_range.is_finite()) {
                return bad(format!("agents[{j}].sensing_range must be positive"));
            }
            if !a.initial_position.is_finite() {
                return bad(format!("agents[{j}].initial_position must be finite"));
            }
        }
        for (i, t) in self.targets.iter().enumerate() {
            if !(t.growth_rate > 0.0) {
                return bad(format!("targets[{i}].growth_rate must be positive"));
            }
            if !(t.reduction_rate > t.growth_rate) {
                return bad(format!("targets[{i}].reduction_rate must exceed growth_rate"));
            }
            if !(t.initial_uncertainty >= 0.0) {
                return bad(format!("targets[{i}].initial_uncertainty must be nonnegative"));
            }
            t.trajectory
                .check(Some(self.horizon))
                .map_err(|e| Error::InvalidScenario(format!("targets[{i}].trajectory: {e}")))?;
        }
        Ok(())
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn target_position(&self, i: usize, t: f64) -> Result<f64> {
        self.check_time(t)?;
        self.targets[i].trajectory.position(t)
    }

    pub fn target_velocity(&self, i: usize, t: f64) -> Result<f64> {
        self.check_time(t)?;
        self.targets[i].trajectory.velocity(t)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(Error::OutOfDomain {
                t,
                start: 0.0,
                end: self.horizon,
            });
        }
        Ok(())
    }

    pub fn max_sensing_range(&self) -> f64 {
        self.agents.iter().map(|a| a.sensing_range).fold(0.0, f64::max)
    }
}

/// Triangular monitoring kernel `max(0, 1 - |target - agent| / range)`.
#[inline]
pub fn monitoring(target_pos: f64, agent_pos: f64, sensing_range: f64) -> f64 {
    debug_assert!(sensing_range > 0.0);
    (1.0 - (target_pos - agent_pos).abs() / sensing_range).max(0.0)
}

/// Joint monitoring `1 - Π (1 - p_j)`.
pub fn joint_monitoring(per_agent: &[f64]) -> f64 {
    1.0 - per_agent.iter().map(|p| 1.0 - p).product::<f64>()
}

/// Uncertainty rate with the zero clamp: 0 while `R` sits at zero and the
/// coverage would push it negative, `A - B P` otherwise.
pub fn uncertainty_rate(r: f64, growth: f64, reduction: f64, coverage: f64) -> f64 {
    let rate = growth - reduction * coverage;
    if r <= ZERO_BOUNDARY_TOL && rate < 0.0 {
        0.0
    } else {
        rate
    }
}

/// One composite-Simpson panel of `Σ_i R_i` over a step of length `h`.
#[inline]
pub(crate) fn simpson_panel(h: f64, start: &[f64], mid: &[f64], end: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..start.len() {
        acc += start[i] + 4.0 * mid[i] + end[i];
    }
    h / 6.0 * acc
}

/// Time-averaged total uncertainty `(1/T) ∫ Σ R_i dt` of a recorded run.
///
/// Integrates panel by panel over the simulator's accepted steps, each panel
/// using the stored step-midpoint uncertainties.
pub fn cost(output: &SimOutput) -> Result<f64> {
    let samples = &output.samples;
    let end = samples.last().map(|s| s.time).unwrap_or(f64::NAN);
    let horizon = output.horizon;
    if samples.is_empty() || samples[0].time != 0.0 || !(end >= horizon * (1.0 - 1e-12)) {
        return Err(Error::IncompleteTrajectory { horizon, end });
    }
    let mut integral = 0.0;
    for w in samples.windows(2) {
        let mid = w[1]
            .midpoint_uncertainties
            .as_deref()
            .ok_or(Error::IncompleteTrajectory { horizon, end })?;
        integral += simpson_panel(
            w[1].time - w[0].time,
            &w[0].uncertainties,
            mid,
            &w[1].uncertainties,
        );
    }
    Ok(integral / horizon)
}

/// Advisory check of the speed bound and the separation condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub max_target_speed: f64,
    pub max_speed_time: f64,
    pub max_speed_target: usize,
    pub speed_violation: bool,
    /// `None` when there is a single target.
    pub min_separation: Option<f64>,
    pub min_separation_time: f64,
    pub min_separation_pair: Option<(usize, usize)>,
    pub required_separation: f64,
    pub separation_violation: bool,
}

impl AssumptionReport {
    pub fn holds(&self) -> bool {
        !self.speed_violation && !self.separation_violation
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.speed_violation {
            out.push(format!(
                "target {} moves at speed {:.6} > 1 (t = {:.6})",
                self.max_speed_target, self.max_target_speed, self.max_speed_time
            ));
        }
        if self.separation_violation {
            let (a, b) = self.min_separation_pair.unwrap_or((0, 0));
            out.push(format!(
                "targets {a} and {b} come within {:.6} < {:.6} (t = {:.6}); simultaneous sensing possible",
                self.min_separation.unwrap_or(0.0),
                self.required_separation,
                self.min_separation_time
            ));
        }
        out
    }
}

pub fn validate_assumptions(scenario: &Scenario, grid_step: f64) -> Result<AssumptionReport> {
    if !(grid_step > 0.0) {
        return Err(Error::Precondition("grid_step must be positive".into()));
    }
    let horizon = scenario.horizon;
    let n = (horizon / grid_step).ceil() as usize;
    let required = 2.0 * scenario.max_sensing_range() + scenario.separation_margin;
    let mut report = AssumptionReport {
        max_target_speed: 0.0,
        max_speed_time: 0.0,
        max_speed_target: 0,
        speed_violation: false,
        min_separation: None,
        min_separation_time: 0.0,
        min_separation_pair: None,
        required_separation: required,
        separation_violation: false,
    };
    let mut positions = vec![0.0; scenario.num_targets()];
    for k in 0..=n {
        let t = (k as f64 * grid_step).min(horizon);
        for (i, target) in scenario.targets.iter().enumerate() {
            positions[i] = target.trajectory.position_at(t);
            let speed = target.trajectory.velocity_at(t).abs();
            if speed > report.max_target_speed {
                report.max_target_speed = speed;
                report.max_speed_time = t;
                report.max_speed_target = i;
            }
        }
        for a in 0..positions.len() {
            for b in a + 1..positions.len() {
                let d = (positions[a] - positions[b]).abs();
                if report.min_separation.is_none_or(|m| d < m) {
                    report.min_separation = Some(d);
                    report.min_separation_time = t;
                    report.min_separation_pair = Some((a, b));
                }
            }
        }
    }
    report.speed_violation = report.max_target_speed > 1.0;
    report.separation_violation = report.min_separation.is_some_and(|d| d < required);
    Ok(report)
}
