//! Open-loop control canonicalization on single-target intervals and
//! decomposition of a trajectory into sensing phases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controllers::sgn;
use crate::error::{Error, Result};
use crate::model::{validate_assumptions, Scenario};
use crate::simulator::{simulate_playback, SimOptions};

/// Costs within this margin count as "not worse".
pub const IMPROVEMENT_TOL: f64 = 1e-9;

/// Targets closer than this to the sensing boundary at an interval end
/// count as grazing it.
const GRAZE_TOL: f64 = 1e-9;

/// Piecewise-constant controls, `values[j][k]` on `[k·step, (k+1)·step)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledControl {
    pub step: f64,
    pub values: Vec<Vec<f64>>,
}

impl SampledControl {
    pub fn default_step(horizon: f64) -> f64 {
        1e-3 * horizon
    }

    pub fn num_cells(horizon: f64, step: f64) -> usize {
        ((horizon / step) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn new(scenario: &Scenario, step: f64, values: Vec<Vec<f64>>) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::InvalidParams("control step must be positive".into()));
        }
        let n = Self::num_cells(scenario.horizon, step);
        if values.len() != scenario.num_agents() || values.iter().any(|v| v.len() != n) {
            return Err(Error::InvalidParams(format!(
                "expected {} sequences of {n} cells",
                scenario.num_agents()
            )));
        }
        if values.iter().flatten().any(|u| !(u.abs() <= 1.0)) {
            return Err(Error::InvalidParams("controls must lie in [-1, 1]".into()));
        }
        Ok(SampledControl { step, values })
    }

    pub fn constant(scenario: &Scenario, step: f64, value: f64) -> Result<Self> {
        let n = Self::num_cells(scenario.horizon, step);
        Self::new(scenario, step, vec![vec![value; n]; scenario.num_agents()])
    }

    /// Uniform random levels, each held for `hold` seconds.
    pub fn random<R: Rng + ?Sized>(scenario: &Scenario, step: f64, hold: f64, rng: &mut R) -> Self {
        let n = Self::num_cells(scenario.horizon, step);
        let per = ((hold / step).round() as usize).max(1);
        let values = (0..scenario.num_agents())
            .map(|_| {
                let mut v = Vec::with_capacity(n);
                while v.len() < n {
                    let level = rng.gen_range(-1.0..=1.0);
                    v.extend(std::iter::repeat_n(level, per.min(n - v.len())));
                }
                v
            })
            .collect();
        SampledControl { step, values }
    }

    fn node_time(&self, k: usize, horizon: f64) -> f64 {
        (k as f64 * self.step).min(horizon)
    }

    pub fn path(&self, scenario: &Scenario, agent: usize) -> Path {
        let horizon = scenario.horizon;
        let u = &self.values[agent];
        let mut nodes = Vec::with_capacity(u.len() + 1);
        let mut s = scenario.agents[agent].initial_position;
        nodes.push(s);
        for (k, &v) in u.iter().enumerate() {
            s += v * (self.node_time(k + 1, horizon) - self.node_time(k, horizon));
            nodes.push(s);
        }
        Path {
            step: self.step,
            horizon,
            nodes,
        }
    }

    pub fn simulate(&self, scenario: &Scenario, options: &SimOptions) -> Result<crate::simulator::SimOutput> {
        simulate_playback(scenario, self.step, &self.values, options)
    }
}

/// Agent trajectory under a [`SampledControl`]: exact, piecewise linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub step: f64,
    pub horizon: f64,
    /// Positions at `k·step`, the last one at the horizon.
    pub nodes: Vec<f64>,
}

impl Path {
    pub fn node_time(&self, k: usize) -> f64 {
        (k as f64 * self.step).min(self.horizon)
    }

    pub fn at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.horizon);
        let k = ((t / self.step).floor() as usize).min(self.nodes.len() - 2);
        let (a, b) = (self.node_time(k), self.node_time(k + 1));
        let w = if b > a { (t - a) / (b - a) } else { 0.0 };
        self.nodes[k] + w * (self.nodes[k + 1] - self.nodes[k])
    }
}

fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    // f(a) < 0 <= f(b); returns the crossing
    let fa_neg = f(a) < 0.0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a.min(b) || m >= a.max(b) {
            break;
        }
        if (f(m) < 0.0) == fa_neg {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Boundary crossings of target `i`'s sensing range along `path`:
/// `(time, entering)`, plus whether the agent starts inside.
fn crossings(scenario: &Scenario, path: &Path, agent: usize, i: usize) -> (bool, Vec<(f64, bool)>) {
    let r = scenario.agents[agent].sensing_range;
    let traj = &scenario.targets[i].trajectory;
    let d = |t: f64| (traj.position_at(t) - path.at(t)).abs() - r;
    let mut out = Vec::new();
    let mut prev_t = 0.0;
    let mut prev_in = d(0.0) < 0.0;
    let start_in = prev_in;
    for k in 1..path.nodes.len() {
        let t = path.node_time(k);
        let inside = d(t) < 0.0;
        if inside != prev_in {
            let tc = if inside {
                bisect(|x| -d(x), prev_t, t)
            } else {
                bisect(d, prev_t, t)
            };
            out.push((tc, inside));
        }
        prev_t = t;
        prev_in = inside;
    }
    (start_in, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingPhase {
    pub target: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub phases: Vec<SensingPhase>,
    /// A partition time had no boundary touch to anchor to.
    pub fallback: bool,
    /// `⌈T/Δ^min⌉` when the scenario assumptions hold.
    pub length_bound: Option<usize>,
}

/// Ordered sensed-target sequence of one agent with partition times such
/// that only the phase's target is sensed inside each phase.
pub fn decompose_sensing_sequence(u: &SampledControl, scenario: &Scenario, agent: usize) -> Decomposition {
    let path = u.path(scenario, agent);
    let horizon = scenario.horizon;
    let per_target: Vec<(bool, Vec<(f64, bool)>)> = (0..scenario.num_targets())
        .map(|i| crossings(scenario, &path, agent, i))
        .collect();
    let mut spans: Vec<(f64, usize)> = Vec::new();
    for (i, (start_in, cross)) in per_target.iter().enumerate() {
        if *start_in {
            spans.push((0.0, i));
        }
        spans.extend(cross.iter().filter(|c| c.1).map(|c| (c.0, i)));
    }
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut sequence: Vec<(usize, f64)> = Vec::new();
    for (t, i) in spans {
        if sequence.last().map(|s| s.0) != Some(i) {
            sequence.push((i, t));
        }
    }
    let length_bound = validate_assumptions(scenario, SampledControl::default_step(horizon))
        .ok()
        .filter(|rep| rep.holds() && scenario.separation_margin > 0.0)
        .map(|_| (horizon / scenario.separation_margin).ceil() as usize);
    let mut phases = Vec::with_capacity(sequence.len());
    let mut fallback = false;
    let mut prev = 0.0;
    for (l, &(target, _)) in sequence.iter().enumerate() {
        let end = if let Some(&(next, next_start)) = sequence.get(l + 1) {
            let t_max = per_target[next]
                .1
                .iter()
                .map(|c| c.0)
                .find(|&t| t > prev)
                .unwrap_or_else(|| {
                    fallback = true;
                    next_start.max(prev)
                });
            match per_target[target]
                .1
                .iter()
                .map(|c| c.0)
                .rfind(|&t| t >= prev && t < t_max)
            {
                Some(t) => t,
                None => {
                    fallback = true;
                    t_max
                }
            }
        } else {
            horizon
        };
        phases.push(SensingPhase {
            target,
            start: prev,
            end,
        });
        prev = end;
    }
    Decomposition {
        phases,
        fallback,
        length_bound,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalControl {
    pub control: SampledControl,
    /// Interval actually modified, after shrinking away from grazing ends.
    pub t1: f64,
    pub t2: f64,
    /// End of the approach phase.
    pub t_check: f64,
    /// Start of the departure phase.
    pub t_hat: f64,
}

/// Replaces agent `agent`'s control on `(t1, t2)` by the approach, match,
/// depart law for target `target`, keeping the path fixed outside.
pub fn canonicalize_interval(
    u: &SampledControl,
    agent: usize,
    target: usize,
    t1: f64,
    t2: f64,
    scenario: &Scenario,
) -> Result<CanonicalControl> {
    let horizon = scenario.horizon;
    if agent >= scenario.num_agents() || target >= scenario.num_targets() {
        return Err(Error::Precondition("agent or target index out of range".into()));
    }
    if !(0.0 <= t1 && t1 < t2 && t2 <= horizon) {
        return Err(Error::Precondition(format!("invalid interval ({t1}, {t2})")));
    }
    let path = u.path(scenario, agent);
    let r = scenario.agents[agent].sensing_range;
    let dist = |k: usize, t: f64| (scenario.targets[k].trajectory.position_at(t) - path.at(t)).abs() - r;
    let others = || (0..scenario.num_targets()).filter(|&k| k != target);
    let grazing = |t: f64| others().any(|k| dist(k, t).abs() <= GRAZE_TOL);
    let (mut t1, mut t2) = (t1, t2);
    if grazing(t1) {
        t1 = (t1 + u.step).min(t2);
    }
    if grazing(t2) {
        t2 = (t2 - u.step).max(t1);
    }
    if !(t1 < t2) {
        return Err(Error::Precondition("interval vanishes after shrinking".into()));
    }
    for k in 0..path.nodes.len() {
        let t = path.node_time(k);
        if t > t1 && t < t2 {
            if let Some(other) = others().find(|&o| dist(o, t) < 0.0) {
                return Err(Error::Precondition(format!(
                    "agent {agent} senses target {other} at t = {t} inside the interval"
                )));
            }
        }
    }

    let theta = |t: f64| scenario.targets[target].trajectory.position_at(t);
    let (p1, p2) = (path.at(t1), path.at(t2));
    let g1 = sgn(theta(t1) - p1);
    let g2 = sgn(p2 - theta(t2));
    let scan = |f: &dyn Fn(f64) -> f64, forward: bool| -> Option<f64> {
        let n = ((t2 - t1) / u.step).ceil().max(1.0) as usize;
        let at = |k: usize| {
            let x = k as f64 / n as f64;
            if forward {
                t1 + x * (t2 - t1)
            } else {
                t2 - x * (t2 - t1)
            }
        };
        let mut prev = at(0);
        for k in 1..=n {
            let t = at(k);
            if f(t) >= 0.0 {
                return Some(bisect(f, prev, t));
            }
            prev = t;
        }
        None
    };
    let arrive = if g1 == 0.0 {
        Some(t1)
    } else {
        scan(&|t| g1 * (p1 + g1 * (t - t1) - theta(t)), true)
    };
    let depart = if g2 == 0.0 {
        Some(t2)
    } else {
        scan(&|t| g2 * (theta(t) + g2 * (t2 - t) - p2), false)
    };
    let tracking = matches!((arrive, depart), (Some(a), Some(d)) if a <= d);
    let (t_check, t_hat, gamma) = if tracking {
        (arrive.unwrap(), depart.unwrap(), g1)
    } else {
        let gamma = if g1 != 0.0 { g1 } else { -g2 };
        let tc = (0.5 * (gamma * (p2 - p1) + t1 + t2)).clamp(t1, t2);
        (tc, tc, gamma)
    };
    let inner = |t: f64| -> f64 {
        if tracking {
            if t <= t_check {
                p1 + g1 * (t - t1)
            } else if t >= t_hat {
                p2 - g2 * (t2 - t)
            } else {
                theta(t)
            }
        } else if t <= t_check {
            p1 + gamma * (t - t1)
        } else {
            p2 + gamma * (t2 - t)
        }
    };
    let combined = |t: f64| if t <= t1 || t >= t2 { path.at(t) } else { inner(t) };

    let mut control = u.clone();
    for (k, v) in control.values[agent].iter_mut().enumerate() {
        let (a, b) = (path.node_time(k), path.node_time(k + 1));
        if b <= t1 || a >= t2 || b <= a {
            continue;
        }
        let w = (combined(b) - combined(a)) / (b - a);
        if w.abs() > 1.0 + 1e-9 {
            return Err(Error::Precondition(format!(
                "target {target} moves faster than the agent near t = {a}"
            )));
        }
        *v = w.clamp(-1.0, 1.0);
    }
    Ok(CanonicalControl {
        control,
        t1,
        t2,
        t_check,
        t_hat,
    })
}

/// Canonicalizes every phase of `agent`'s decomposition in turn and
/// returns the intermediate controls, the input first.
pub fn canonicalize_all(
    u: &SampledControl,
    scenario: &Scenario,
    agent: usize,
) -> Result<Vec<SampledControl>> {
    let phases = decompose_sensing_sequence(u, scenario, agent).phases;
    let mut out = vec![u.clone()];
    for ph in phases {
        let last = out.last().unwrap();
        let next = canonicalize_interval(last, agent, ph.target, ph.start, ph.end, scenario)?;
        out.push(next.control);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Improvement {
    pub cost_before: f64,
    pub cost_after: f64,
    /// `cost_after ≤ cost_before + IMPROVEMENT_TOL`.
    pub improved: bool,
}

pub fn verify_improvement(
    u: &SampledControl,
    u_prime: &SampledControl,
    scenario: &Scenario,
    options: &SimOptions,
) -> Result<Improvement> {
    let cost_before = u.simulate(scenario, options)?.cost;
    let cost_after = u_prime.simulate(scenario, options)?.cost;
    Ok(Improvement {
        cost_before,
        cost_after,
        improved: cost_after <= cost_before + IMPROVEMENT_TOL,
    })
}
