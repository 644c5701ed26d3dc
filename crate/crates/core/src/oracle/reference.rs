//! Dense fixed-step simulation without event localization.
//!
//! Shares only the parameter types and the saturated PI formula with the
//! event-driven engine; mode logic, kinematics and quadrature are redone
//! here with sub-step splitting at phase boundaries.

use crate::controllers::{
    practical_control, sgn, ControllerParams, OptimalAgentParams, PracticalAgentParams, PracticalContext,
};
use crate::model::Scenario;

/// Default step as a fraction of the horizon.
pub const REFERENCE_STEP_FRACTION: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOutput {
    pub cost: f64,
    pub final_positions: Vec<f64>,
    pub final_uncertainties: Vec<f64>,
    pub min_uncertainty: f64,
}

pub enum ReferenceLaw<'a> {
    Params(&'a ControllerParams),
    Playback { cell: f64, values: &'a [Vec<f64>] },
}

enum OptState {
    Bang { phase: usize, dir: f64 },
    Track { phase: usize, until: f64 },
}

struct PiState {
    phase: usize,
    active: bool,
    integral: f64,
    ends: Vec<f64>,
}

fn joint_coverage(scenario: &Scenario, positions: &[f64], target_pos: f64) -> f64 {
    let miss: f64 = scenario
        .agents
        .iter()
        .zip(positions)
        .map(|(a, s)| 1.0 - (1.0 - (target_pos - s).abs() / a.sensing_range).max(0.0))
        .product();
    1.0 - miss
}

/// Advances one optimal agent by `dt` from `t`, splitting at reach and
/// period-end instants.
fn step_optimal(p: &OptimalAgentParams, state: &mut OptState, s: &mut f64, t: f64, dt: f64, sc: &Scenario) {
    let last = p.phases() - 1;
    let mut now = t;
    let end = t + dt;
    while now < end {
        match *state {
            OptState::Bang { phase, dir } => {
                let psi = p.switching_points[phase];
                let reach = now + (psi - *s).abs();
                if dir == 0.0 || reach <= end {
                    *s = psi;
                    now = if dir == 0.0 { now } else { reach };
                    let until = if phase == last {
                        f64::INFINITY
                    } else {
                        now + p.durations[phase]
                    };
                    *state = OptState::Track { phase, until };
                } else {
                    *s += dir * (end - now);
                    now = end;
                }
            }
            OptState::Track { phase, until } => {
                let stop = until.min(end);
                if stop > now {
                    let mid = 0.5 * (now + stop);
                    let v: f64 = p.combinations[phase]
                        .weights()
                        .iter()
                        .zip(&sc.targets)
                        .map(|(a, x)| a * x.trajectory.velocity_at(mid))
                        .sum();
                    *s += v.clamp(-1.0, 1.0) * (stop - now);
                    now = stop;
                }
                if until <= end {
                    let next = phase + 1;
                    *state = OptState::Bang {
                        phase: next,
                        dir: sgn(p.switching_points[next] - *s),
                    };
                }
            }
        }
    }
}

fn step_practical(p: &PracticalAgentParams, st: &mut PiState, s: &mut f64, t: f64, dt: f64, sc: &Scenario) {
    let mut now = t;
    let end = t + dt;
    while now < end {
        let stop = st.ends[st.phase].min(end);
        let theta: Vec<f64> = sc.targets.iter().map(|x| x.trajectory.position_at(now)).collect();
        let ctx = PracticalContext {
            phase: st.phase,
            integrator_active: st.active,
        };
        let out = practical_control(*s, st.integral, ctx, p, &theta);
        if !st.active && (p.gain_p * out.error).abs() <= p.switch_tolerance {
            st.active = true;
            st.integral = 0.0;
            continue;
        }
        let h = stop - now;
        *s += out.u * h;
        if st.active {
            st.integral += out.error * h;
        }
        now = stop;
        if stop >= st.ends[st.phase] && st.phase + 1 < st.ends.len() {
            st.phase += 1;
            st.active = false;
            st.integral = 0.0;
        }
    }
}

/// Fixed-step simulation with step `fraction · T`.
pub fn reference_simulate(scenario: &Scenario, law: ReferenceLaw<'_>, fraction: f64) -> ReferenceOutput {
    let horizon = scenario.horizon;
    let steps = (1.0 / fraction).round() as usize;
    let dt = horizon / steps as f64;
    let n = scenario.num_agents();
    let mut s: Vec<f64> = scenario.agents.iter().map(|a| a.initial_position).collect();
    let mut r: Vec<f64> = scenario.targets.iter().map(|x| x.initial_uncertainty).collect();
    let mut opt_states: Vec<OptState> = Vec::new();
    let mut pi_states: Vec<PiState> = Vec::new();
    match &law {
        ReferenceLaw::Params(ControllerParams::Optimal(agents)) => {
            for (j, p) in agents.iter().enumerate() {
                opt_states.push(OptState::Bang {
                    phase: 0,
                    dir: sgn(p.switching_points[0] - s[j]),
                });
            }
        }
        ReferenceLaw::Params(ControllerParams::Practical(agents)) => {
            for p in agents {
                pi_states.push(PiState {
                    phase: 0,
                    active: false,
                    integral: 0.0,
                    ends: p.period_ends(horizon),
                });
            }
        }
        ReferenceLaw::Playback { .. } => {}
    }
    let coverage = |s: &[f64], t: f64| -> Vec<f64> {
        scenario
            .targets
            .iter()
            .map(|x| joint_coverage(scenario, s, x.trajectory.position_at(t)))
            .collect()
    };
    let mut cost = 0.0;
    let mut min_r = r.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut p0 = coverage(&s, 0.0);
    for k in 0..steps {
        let t = k as f64 * dt;
        match &law {
            ReferenceLaw::Params(ControllerParams::Optimal(agents)) => {
                for j in 0..n {
                    step_optimal(&agents[j], &mut opt_states[j], &mut s[j], t, dt, scenario);
                }
            }
            ReferenceLaw::Params(ControllerParams::Practical(agents)) => {
                for j in 0..n {
                    step_practical(&agents[j], &mut pi_states[j], &mut s[j], t, dt, scenario);
                }
            }
            ReferenceLaw::Playback { cell, values } => {
                let mut now = t;
                let end = t + dt;
                while now < end {
                    let c = (now / cell + 1e-9).floor();
                    let stop = ((c + 1.0) * cell).min(end);
                    for j in 0..n {
                        let idx = (c as usize).min(values[j].len() - 1);
                        s[j] += values[j][idx] * (stop - now);
                    }
                    now = stop;
                }
            }
        }
        let p1 = coverage(&s, t + dt);
        let before: f64 = r.iter().sum();
        for (i, x) in scenario.targets.iter().enumerate() {
            let rate = x.growth_rate - x.reduction_rate * 0.5 * (p0[i] + p1[i]);
            r[i] = (r[i] + dt * rate).max(0.0);
        }
        let after: f64 = r.iter().sum();
        cost += 0.5 * dt * (before + after);
        min_r = r.iter().cloned().fold(min_r, f64::min);
        p0 = p1;
    }
    ReferenceOutput {
        cost: cost / horizon,
        final_positions: s,
        final_uncertainties: r,
        min_uncertainty: min_r,
    }
}
