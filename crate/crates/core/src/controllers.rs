//! The two parametric control laws.
//!
//! *Optimal* agents alternate between full-speed travel to a switching point
//! and matching the velocity of a convex combination of targets for a fixed
//! duration. *Practical* agents run a saturated PI loop on the position of a
//! convex combination of targets, enabling the integrator only once the
//! proportional error is small.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Scenario;
use crate::targets::TargetTrajectory;

/// Tolerance on `Σ α = 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Sign with `sgn(0) = 0`.
#[inline]
pub fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weights of a convex combination of targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrackingCombination(Vec<f64>);

impl TrackingCombination {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let c = TrackingCombination(weights);
        if let Some(msg) = c.violation() {
            return Err(Error::InvalidParams(msg));
        }
        Ok(c)
    }

    /// Wraps weights without checking; perturbed or intermediate weights
    /// are legitimate inputs to the simulator.
    pub fn from_raw(weights: Vec<f64>) -> Self {
        TrackingCombination(weights)
    }

    pub fn vertex(num_targets: usize, target: usize) -> Self {
        let mut w = vec![0.0; num_targets];
        w[target] = 1.0;
        TrackingCombination(w)
    }

    pub fn uniform(num_targets: usize) -> Self {
        TrackingCombination(vec![1.0 / num_targets as f64; num_targets])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn combine(&self, values: &[f64]) -> f64 {
        self.0.iter().zip(values).map(|(a, v)| a * v).sum()
    }

    pub fn violation(&self) -> Option<String> {
        if let Some(w) = self.0.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Some(format!("weight {w} outside [0, 1]"));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Some(format!("weights sum to {sum}, expected 1"));
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalAgentParams {
    pub switching_points: Vec<f64>,
    pub combinations: Vec<TrackingCombination>,
    pub durations: Vec<f64>,
}

impl OptimalAgentParams {
    pub fn phases(&self) -> usize {
        self.durations.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PracticalGains {
    pub gain_p: f64,
    pub gain_i: f64,
    pub switch_tolerance: f64,
}

impl Default for PracticalGains {
    fn default() -> Self {
        PracticalGains {
            gain_p: 5.0,
            gain_i: 1.0,
            switch_tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PracticalAgentParams {
    pub combinations: Vec<TrackingCombination>,
    pub durations: Vec<f64>,
    pub gain_p: f64,
    pub gain_i: f64,
    pub switch_tolerance: f64,
}

impl PracticalAgentParams {
    pub fn phases(&self) -> usize {
        self.durations.len()
    }

    pub fn gains(&self) -> PracticalGains {
        PracticalGains {
            gain_p: self.gain_p,
            gain_i: self.gain_i,
            switch_tolerance: self.switch_tolerance,
        }
    }

    /// Period boundaries `t̄_ℓ`, truncated at the horizon; the last period
    /// always extends to the horizon.
    pub fn period_ends(&self, horizon: f64) -> Vec<f64> {
        let mut ends = Vec::with_capacity(self.phases());
        let mut t = 0.0;
        for (l, phi) in self.durations.iter().enumerate() {
            t += phi.max(0.0);
            if l + 1 == self.phases() {
                ends.push(horizon);
            } else {
                ends.push(t.min(horizon));
            }
        }
        ends
    }
}

/// Controller parameters for every agent, one variant for the whole team.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "agents", rename_all = "snake_case")]
pub enum ControllerParams {
    Optimal(Vec<OptimalAgentParams>),
    Practical(Vec<PracticalAgentParams>),
}

/// Which controller family a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Optimal,
    Practical,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Optimal => write!(f, "optimal"),
            Variant::Practical => write!(f, "practical"),
        }
    }
}

/// Meaning of one entry of the flattened parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    SwitchingPoint {
        agent: usize,
        phase: usize,
    },
    Weight {
        agent: usize,
        phase: usize,
        target: usize,
    },
    Duration {
        agent: usize,
        phase: usize,
    },
}

impl std::fmt::Display for ParamRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            ParamRole::SwitchingPoint { agent, phase } => write!(f, "psi[{agent}][{phase}]"),
            ParamRole::Weight { agent, phase, target } => {
                write!(f, "alpha[{agent}][{phase}][{target}]")
            }
            ParamRole::Duration { agent, phase } => write!(f, "phi[{agent}][{phase}]"),
        }
    }
}

impl ControllerParams {
    pub fn variant(&self) -> Variant {
        match self {
            ControllerParams::Optimal(_) => Variant::Optimal,
            ControllerParams::Practical(_) => Variant::Practical,
        }
    }

    pub fn num_agents(&self) -> usize {
        match self {
            ControllerParams::Optimal(a) => a.len(),
            ControllerParams::Practical(a) => a.len(),
        }
    }

    fn agent_shape(&self, j: usize) -> (usize, usize) {
        match self {
            ControllerParams::Optimal(a) => {
                let m = a[j].combinations.first().map_or(0, |c| c.len());
                (a[j].phases(), m)
            }
            ControllerParams::Practical(a) => {
                let m = a[j].combinations.first().map_or(0, |c| c.len());
                (a[j].phases(), m)
            }
        }
    }

    /// Entries per phase of an agent block.
    pub(crate) fn phase_stride(&self, num_targets: usize) -> usize {
        match self {
            ControllerParams::Optimal(_) => num_targets + 2,
            ControllerParams::Practical(_) => num_targets + 1,
        }
    }

    pub fn agent_block_len(&self, j: usize) -> usize {
        let (l, m) = self.agent_shape(j);
        l * self.phase_stride(m)
    }

    /// Start offsets of the per-agent blocks in the flattened vector.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.num_agents() + 1);
        let mut acc = 0;
        for j in 0..self.num_agents() {
            offsets.push(acc);
            acc += self.agent_block_len(j);
        }
        offsets.push(acc);
        offsets
    }

    pub fn num_params(&self) -> usize {
        (0..self.num_agents()).map(|j| self.agent_block_len(j)).sum()
    }

    /// Index of `α_{ℓ,i}` inside agent `j`'s block.
    pub(crate) fn local_weight_index(&self, phase: usize, target: usize, num_targets: usize) -> usize {
        match self {
            ControllerParams::Optimal(_) => phase * (num_targets + 2) + 1 + target,
            ControllerParams::Practical(_) => phase * (num_targets + 1) + target,
        }
    }

    pub(crate) fn local_duration_index(&self, phase: usize, num_targets: usize) -> usize {
        match self {
            ControllerParams::Optimal(_) => phase * (num_targets + 2) + num_targets + 1,
            ControllerParams::Practical(_) => phase * (num_targets + 1) + num_targets,
        }
    }

    pub(crate) fn local_switching_index(&self, phase: usize, num_targets: usize) -> usize {
        phase * (num_targets + 2)
    }

    pub fn roles(&self) -> Vec<ParamRole> {
        let mut roles = Vec::with_capacity(self.num_params());
        for j in 0..self.num_agents() {
            let (l, m) = self.agent_shape(j);
            for phase in 0..l {
                if self.variant() == Variant::Optimal {
                    roles.push(ParamRole::SwitchingPoint { agent: j, phase });
                }
                for target in 0..m {
                    roles.push(ParamRole::Weight {
                        agent: j,
                        phase,
                        target,
                    });
                }
                roles.push(ParamRole::Duration { agent: j, phase });
            }
        }
        roles
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        match self {
            ControllerParams::Optimal(agents) => {
                for a in agents {
                    for l in 0..a.phases() {
                        v.push(a.switching_points[l]);
                        v.extend_from_slice(a.combinations[l].weights());
                        v.push(a.durations[l]);
                    }
                }
            }
            ControllerParams::Practical(agents) => {
                for a in agents {
                    for l in 0..a.phases() {
                        v.extend_from_slice(a.combinations[l].weights());
                        v.push(a.durations[l]);
                    }
                }
            }
        }
        v
    }

    /// Same structure with the tunable entries replaced by `v`.
    pub fn with_vector(&self, v: &[f64]) -> Self {
        assert_eq!(v.len(), self.num_params(), "parameter vector length");
        let mut out = self.clone();
        let mut k = 0;
        match &mut out {
            ControllerParams::Optimal(agents) => {
                for a in agents {
                    for l in 0..a.phases() {
                        a.switching_points[l] = v[k];
                        k += 1;
                        for w in a.combinations[l].weights_mut() {
                            *w = v[k];
                            k += 1;
                        }
                        a.durations[l] = v[k];
                        k += 1;
                    }
                }
            }
            ControllerParams::Practical(agents) => {
                for a in agents {
                    for l in 0..a.phases() {
                        for w in a.combinations[l].weights_mut() {
                            *w = v[k];
                            k += 1;
                        }
                        a.durations[l] = v[k];
                        k += 1;
                    }
                }
            }
        }
        out
    }
}

/// One violated invariant, with the path of the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamViolation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ParamViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

pub fn validate_params(params: &ControllerParams, scenario: &Scenario) -> Vec<ParamViolation> {
    let mut out = Vec::new();
    let mut push = |path: String, message: String| out.push(ParamViolation { path, message });
    let m = scenario.num_targets();
    let horizon = scenario.horizon;
    if params.num_agents() != scenario.num_agents() {
        push(
            "controller.agents".into(),
            format!(
                "{} parameter sets for {} agents",
                params.num_agents(),
                scenario.num_agents()
            ),
        );
        return out;
    }
    let check_common = |j: usize,
                        combos: &[TrackingCombination],
                        durations: &[f64],
                        push: &mut dyn FnMut(String, String)| {
        if combos.len() != durations.len() {
            push(
                format!("controller.agents[{j}]"),
                "combination and duration lists differ in length".into(),
            );
        }
        if durations.is_empty() {
            push(
                format!("controller.agents[{j}]"),
                "at least one phase is required".into(),
            );
        }
        for (l, c) in combos.iter().enumerate() {
            if c.len() != m {
                push(
                    format!("controller.agents[{j}].combinations[{l}]"),
                    format!("expected {m} weights, got {}", c.len()),
                );
            } else if let Some(msg) = c.violation() {
                push(
                    format!("controller.agents[{j}].combinations[{l}]"),
                    format!("simplex violation: {msg}"),
                );
            }
        }
        for (l, phi) in durations.iter().enumerate() {
            if !(*phi >= 0.0) {
                push(
                    format!("controller.agents[{j}].durations[{l}]"),
                    format!("nonnegativity violation: {phi}"),
                );
            } else if *phi > horizon {
                push(
                    format!("controller.agents[{j}].durations[{l}]"),
                    format!("duration {phi} exceeds the horizon {horizon}"),
                );
            }
        }
    };
    match params {
        ControllerParams::Optimal(agents) => {
            for (j, a) in agents.iter().enumerate() {
                check_common(j, &a.combinations, &a.durations, &mut push);
                if a.switching_points.len() != a.durations.len() {
                    push(
                        format!("controller.agents[{j}]"),
                        "switching point and duration lists differ in length".into(),
                    );
                }
                for (l, psi) in a.switching_points.iter().enumerate() {
                    if !psi.is_finite() {
                        push(
                            format!("controller.agents[{j}].switching_points[{l}]"),
                            "must be finite".into(),
                        );
                    }
                }
            }
        }
        ControllerParams::Practical(agents) => {
            for (j, a) in agents.iter().enumerate() {
                check_common(j, &a.combinations, &a.durations, &mut push);
                if !(a.gain_p > 0.0) {
                    push(
                        format!("controller.agents[{j}].gain_p"),
                        "must be positive".into(),
                    );
                }
                if !(a.gain_i > 0.0) {
                    push(
                        format!("controller.agents[{j}].gain_i"),
                        "must be positive".into(),
                    );
                }
                if !(a.switch_tolerance > 0.0 && a.switch_tolerance < 1.0) {
                    push(
                        format!("controller.agents[{j}].switch_tolerance"),
                        "must lie in (0, 1)".into(),
                    );
                }
            }
        }
    }
    out
}

/// Agent mode of the optimal law on one interval of its schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduledMode {
    /// Full speed toward the switching point.
    Bang { direction: f64 },
    /// Velocity matching of the phase's target combination.
    Track,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeInterval {
    pub start: f64,
    pub end: f64,
    pub phase: usize,
    pub mode: ScheduledMode,
    pub start_position: f64,
}

/// Noise-free mode schedule of one optimal agent over `[0, horizon]`.
///
/// Positions during tracking use `s(ť) + αᵀ(ϑ(t) − ϑ(ť))`, which is exact
/// while `|αᵀϑ̇| ≤ 1`.
pub fn optimal_mode_schedule(
    initial_position: f64,
    params: &OptimalAgentParams,
    targets: &[TargetTrajectory],
    horizon: f64,
) -> Vec<ModeInterval> {
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut s = initial_position;
    let positions = |time: f64| -> Vec<f64> { targets.iter().map(|x| x.position_at(time)).collect() };
    let last = params.phases().saturating_sub(1);
    for l in 0..params.phases() {
        if t >= horizon {
            break;
        }
        let psi = params.switching_points[l];
        let direction = sgn(psi - s);
        let arrive = t + (psi - s).abs();
        out.push(ModeInterval {
            start: t,
            end: arrive.min(horizon),
            phase: l,
            mode: ScheduledMode::Bang { direction },
            start_position: s,
        });
        if arrive >= horizon {
            return out;
        }
        s = psi;
        let mut end = arrive + params.durations[l].max(0.0);
        if l == last || end > horizon {
            end = horizon;
        }
        out.push(ModeInterval {
            start: arrive,
            end,
            phase: l,
            mode: ScheduledMode::Track,
            start_position: s,
        });
        let alpha = &params.combinations[l];
        s += alpha.combine(&positions(end)) - alpha.combine(&positions(arrive));
        t = end;
    }
    out
}

impl ModeInterval {
    /// Agent position at `t` within this interval.
    pub fn position_at(&self, t: f64, alpha: &TrackingCombination, targets: &[TargetTrajectory]) -> f64 {
        match self.mode {
            ScheduledMode::Bang { direction } => self.start_position + direction * (t - self.start),
            ScheduledMode::Track => {
                let delta: f64 = alpha
                    .weights()
                    .iter()
                    .zip(targets)
                    .map(|(a, x)| a * (x.position_at(t) - x.position_at(self.start)))
                    .sum();
                self.start_position + delta
            }
        }
    }
}

/// The four implicit modes of the saturated PI law.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PracticalMode {
    SaturatedPositive,
    SaturatedNegative,
    Proportional,
    ProportionalIntegral,
}

/// Per-period controller context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PracticalContext {
    pub phase: usize,
    pub integrator_active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub u: f64,
    pub mode: PracticalMode,
    /// Unsaturated PI value `K_p e + K_i ∫e`.
    pub raw: f64,
    pub error: f64,
}

/// Saturated PI control for a practical agent.
///
/// `integrator` is `∫_{t̃}^{t} e dσ`; it only contributes when the context
/// marks the integrator as active. `measured_positions` are the controller's
/// (possibly noisy) target position estimates.
pub fn practical_control(
    agent_pos: f64,
    integrator: f64,
    ctx: PracticalContext,
    params: &PracticalAgentParams,
    measured_positions: &[f64],
) -> ControlOutput {
    let error = params.combinations[ctx.phase].combine(measured_positions) - agent_pos;
    let integral = if ctx.integrator_active { integrator } else { 0.0 };
    let raw = params.gain_p * error + params.gain_i * integral;
    let (u, mode) = if raw > 1.0 {
        (1.0, PracticalMode::SaturatedPositive)
    } else if raw < -1.0 {
        (-1.0, PracticalMode::SaturatedNegative)
    } else if ctx.integrator_active {
        (raw, PracticalMode::ProportionalIntegral)
    } else {
        (raw, PracticalMode::Proportional)
    };
    ControlOutput { u, mode, raw, error }
}

/// A target visiting schedule: per agent, `(target, duration)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VisitPlan {
    pub agents: Vec<Vec<(usize, f64)>>,
}

/// Random visiting sequences with consecutive targets distinct and
/// durations summing to the horizon.
pub fn random_visit_plan<R: Rng + ?Sized>(scenario: &Scenario, phases: usize, rng: &mut R) -> VisitPlan {
    let m = scenario.num_targets();
    let agents = (0..scenario.num_agents())
        .map(|_| {
            let mut seq: Vec<usize> = Vec::with_capacity(phases);
            for _ in 0..phases {
                let choices: Vec<usize> = (0..m).filter(|&i| m == 1 || seq.last() != Some(&i)).collect();
                seq.push(*choices.choose(rng).expect("at least one target"));
            }
            let raw: Vec<f64> = (0..phases).map(|_| rng.gen_range(0.5..1.5)).collect();
            let total: f64 = raw.iter().sum();
            seq.into_iter()
                .zip(raw)
                .map(|(i, w)| (i, w / total * scenario.horizon))
                .collect()
        })
        .collect();
    VisitPlan { agents }
}

pub fn practical_from_plan(plan: &VisitPlan, num_targets: usize, gains: PracticalGains) -> ControllerParams {
    ControllerParams::Practical(
        plan.agents
            .iter()
            .map(|visits| PracticalAgentParams {
                combinations: visits
                    .iter()
                    .map(|&(i, _)| TrackingCombination::vertex(num_targets, i))
                    .collect(),
                durations: visits.iter().map(|&(_, d)| d).collect(),
                gain_p: gains.gain_p,
                gain_i: gains.gain_i,
                switch_tolerance: gains.switch_tolerance,
            })
            .collect(),
    )
}

/// Optimal-law initialization realizing the same plan: intercept each target
/// at its estimated arrival point and track it until the plan's cumulative
/// end time.
pub fn optimal_from_plan(plan: &VisitPlan, scenario: &Scenario) -> ControllerParams {
    let horizon = scenario.horizon;
    let m = scenario.num_targets();
    let pos = |i: usize, t: f64| scenario.targets[i].trajectory.position_at(t.clamp(0.0, horizon));
    ControllerParams::Optimal(
        plan.agents
            .iter()
            .zip(&scenario.agents)
            .map(|(visits, agent)| {
                let mut s = agent.initial_position;
                let mut t = 0.0;
                let mut planned_end = 0.0;
                let mut out = OptimalAgentParams {
                    switching_points: Vec::new(),
                    combinations: Vec::new(),
                    durations: Vec::new(),
                };
                for &(i, d) in visits {
                    planned_end += d;
                    let mut psi = pos(i, t);
                    for _ in 0..8 {
                        psi = pos(i, t + (psi - s).abs());
                    }
                    let arrive = t + (psi - s).abs();
                    let phi = (planned_end - arrive).clamp(0.0, horizon);
                    out.switching_points.push(psi);
                    out.combinations.push(TrackingCombination::vertex(m, i));
                    out.durations.push(phi);
                    s = psi + pos(i, arrive + phi) - pos(i, arrive);
                    t = arrive + phi;
                }
                out
            })
            .collect(),
    )
}
