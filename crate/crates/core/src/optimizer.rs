//! Projected feasible-direction descent over controller parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{
    optimal_from_plan, practical_from_plan, random_visit_plan, validate_params, ControllerParams, ParamRole,
    PracticalGains, Variant, SIMPLEX_TOL,
};
use crate::error::{Error, Result};
use crate::ipa::{self, GradientReport};
use crate::model::Scenario;
use crate::simulator::{simulate, SimOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescentConfig {
    pub armijo_c1: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub initial_step: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step lowers `J` by less than this.
    pub stall_tolerance: f64,
    pub seed: u64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            armijo_c1: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 30,
            initial_step: 1.0,
            max_iterations: 100,
            stall_tolerance: 1e-7,
            seed: 0,
        }
    }
}

impl DescentConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.armijo_c1 > 0.0 && self.armijo_c1 < 1.0) {
            return Err(Error::InvalidParams("armijo_c1 must lie in (0, 1)".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::InvalidParams("backtrack_factor must lie in (0, 1)".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::InvalidParams("initial_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterateRecord {
    pub iteration: usize,
    pub params: ControllerParams,
    pub cost: f64,
    pub grad_norm: f64,
    /// Accepted step length; 0 for the starting point.
    pub step: f64,
    pub backtracks: usize,
    pub unexcited_agents: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Stalled,
    MaxIterations,
    ZeroDirection,
    BacktrackingExhausted,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Stalled => "stalled",
            StopReason::MaxIterations => "max_iterations",
            StopReason::ZeroDirection => "zero_direction",
            StopReason::BacktrackingExhausted => "backtracking_exhausted",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub params: ControllerParams,
    pub records: Vec<IterateRecord>,
    pub reason: StopReason,
    /// Gradient at the returned parameters.
    pub final_gradient: GradientReport,
}

impl OptimizeResult {
    pub fn initial_cost(&self) -> f64 {
        self.records[0].cost
    }

    pub fn final_cost(&self) -> f64 {
        self.records.last().expect("at least one record").cost
    }
}

/// Direction `p` closest to `−grad` with `0 ≤ α + p ≤ 1` and `Σ p = 0`.
///
/// `p = clip(−grad − λ, −α, 1 − α)`; the sum is monotone in `λ`, which is
/// bracketed by bisection and then solved exactly on the final active set.
pub fn feasible_direction_alpha(alpha: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
    if alpha.len() != grad.len() || alpha.is_empty() {
        return Err(Error::Precondition("weight and gradient lengths differ".into()));
    }
    let sum: f64 = alpha.iter().sum();
    if alpha
        .iter()
        .any(|a| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(a))
        || (sum - 1.0).abs() > SIMPLEX_TOL
    {
        return Err(Error::Precondition(format!(
            "weights {alpha:?} are not on the simplex"
        )));
    }
    let lo: Vec<f64> = alpha.iter().map(|a| -a).collect();
    let hi: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
    let target: Vec<f64> = grad.iter().map(|g| -g).collect();
    let total = |lambda: f64| -> f64 {
        (0..alpha.len())
            .map(|i| (target[i] - lambda).clamp(lo[i], hi[i]))
            .sum()
    };
    let mut l_lo = (0..alpha.len())
        .map(|i| target[i] - hi[i])
        .fold(f64::INFINITY, f64::min);
    let mut l_hi = (0..alpha.len())
        .map(|i| target[i] - lo[i])
        .fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (l_lo + l_hi);
        if mid <= l_lo || mid >= l_hi {
            break;
        }
        if total(mid) > 0.0 {
            l_lo = mid;
        } else {
            l_hi = mid;
        }
    }
    let mut lambda = 0.5 * (l_lo + l_hi);
    // exact multiplier on the active set found by bisection
    let mut free_sum = 0.0;
    let mut free = 0usize;
    let mut bound_sum = 0.0;
    for i in 0..alpha.len() {
        let v = target[i] - lambda;
        if v <= lo[i] {
            bound_sum += lo[i];
        } else if v >= hi[i] {
            bound_sum += hi[i];
        } else {
            free_sum += target[i];
            free += 1;
        }
    }
    if free > 0 {
        let exact = (free_sum + bound_sum) / free as f64;
        if (total(exact)).abs() <= (total(lambda)).abs() {
            lambda = exact;
        }
    }
    let mut p: Vec<f64> = (0..alpha.len())
        .map(|i| (target[i] - lambda).clamp(lo[i], hi[i]))
        .collect();
    // push any rounding residue onto a coordinate with slack
    let residue: f64 = p.iter().sum();
    if residue != 0.0 {
        if let Some(i) = (0..p.len()).find(|&i| p[i] - residue >= lo[i] && p[i] - residue <= hi[i]) {
            p[i] -= residue;
        }
    }
    Ok(p)
}

/// Feasible descent direction for the whole parameter vector.
///
/// Tracking weights use [`feasible_direction_alpha`] per `(agent, phase)`
/// block; durations and switching points use `−grad`, with durations held
/// at a bound they would otherwise leave.
pub fn feasible_direction_full(params: &ControllerParams, grad: &[f64], horizon: f64) -> Result<Vec<f64>> {
    let theta = params.to_vector();
    let roles = params.roles();
    let mut p: Vec<f64> = grad.iter().map(|g| -g).collect();
    for (d, role) in roles.iter().enumerate() {
        if let ParamRole::Duration { .. } = role {
            if (theta[d] <= 0.0 && p[d] < 0.0) || (theta[d] >= horizon && p[d] > 0.0) {
                p[d] = 0.0;
            }
        }
    }
    for (start, len) in weight_blocks(&roles) {
        let block = feasible_direction_alpha(&theta[start..start + len], &grad[start..start + len])?;
        p[start..start + len].copy_from_slice(&block);
    }
    Ok(p)
}

/// `(start, len)` of every contiguous tracking-weight block.
fn weight_blocks(roles: &[ParamRole]) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut d = 0;
    while d < roles.len() {
        if let ParamRole::Weight { agent, phase, .. } = roles[d] {
            let start = d;
            while d < roles.len()
                && matches!(roles[d], ParamRole::Weight { agent: a, phase: p, .. } if a == agent && p == phase)
            {
                d += 1;
            }
            blocks.push((start, d - start));
        } else {
            d += 1;
        }
    }
    blocks
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, x) in u.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Projects a parameter vector onto the feasible set.
pub fn project(params: &ControllerParams, v: &[f64], horizon: f64) -> ControllerParams {
    let roles = params.roles();
    let mut w = v.to_vec();
    for (d, role) in roles.iter().enumerate() {
        if let ParamRole::Duration { .. } = role {
            w[d] = w[d].clamp(0.0, horizon);
        }
    }
    for (start, len) in weight_blocks(&roles) {
        let block = &w[start..start + len];
        let sum: f64 = block.iter().sum();
        let feasible = block.iter().all(|x| (0.0..=1.0).contains(x)) && (sum - 1.0).abs() <= 1e-12;
        if !feasible {
            let proj = project_simplex(block);
            w[start..start + len].copy_from_slice(&proj);
        }
    }
    params.with_vector(&w)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Armijo-backtracked projected descent from `initial`.
pub fn optimize(
    scenario: &Scenario,
    initial: &ControllerParams,
    config: &DescentConfig,
    options: &SimOptions,
) -> Result<OptimizeResult> {
    config.check()?;
    if let Some(v) = validate_params(initial, scenario).first() {
        return Err(Error::InvalidParams(v.to_string()));
    }
    let horizon = scenario.horizon;
    let mut params = initial.clone();
    let mut options = options.clone();
    options.record_samples = false;
    options.trace_sensitivities = false;
    let options = &options;
    let mut report = ipa::evaluate(scenario, &params, options)?;
    let mut records = vec![IterateRecord {
        iteration: 0,
        params: params.clone(),
        cost: report.cost,
        grad_norm: report.norm(),
        step: 0.0,
        backtracks: 0,
        unexcited_agents: report.unexcited_agents.clone(),
    }];
    let mut primal = options.clone();
    primal.sensitivities = false;
    primal.trace_sensitivities = false;
    let mut reason = StopReason::MaxIterations;
    for iteration in 1..=config.max_iterations {
        let theta = params.to_vector();
        let direction = feasible_direction_full(&params, &report.gradient, horizon)?;
        if direction.iter().all(|&p| p.abs() <= 1e-14) {
            reason = StopReason::ZeroDirection;
            break;
        }
        let mut step = config.initial_step;
        let mut backtracks = 0;
        let accepted = loop {
            let raw: Vec<f64> = theta.iter().zip(&direction).map(|(t, p)| t + step * p).collect();
            let trial = project(&params, &raw, horizon);
            let moved: Vec<f64> = trial.to_vector().iter().zip(&theta).map(|(a, b)| a - b).collect();
            let decrease = dot(&report.gradient, &moved);
            if decrease < 0.0 {
                let cost = simulate(scenario, &trial, &primal)?.cost;
                if cost <= report.cost + config.armijo_c1 * decrease {
                    break Some(trial);
                }
            }
            if backtracks == config.max_backtracks {
                break None;
            }
            step *= config.backtrack_factor;
            backtracks += 1;
        };
        let Some(trial) = accepted else {
            reason = StopReason::BacktrackingExhausted;
            break;
        };
        let next = ipa::evaluate(scenario, &trial, options)?;
        let gain = report.cost - next.cost;
        params = trial;
        report = next;
        records.push(IterateRecord {
            iteration,
            params: params.clone(),
            cost: report.cost,
            grad_norm: report.norm(),
            step,
            backtracks,
            unexcited_agents: report.unexcited_agents.clone(),
        });
        if gain < config.stall_tolerance {
            reason = StopReason::Stalled;
            break;
        }
    }
    Ok(OptimizeResult {
        params,
        records,
        reason,
        final_gradient: report,
    })
}

/// Random initial parameters from a random target visiting sequence.
pub fn random_initialization(
    scenario: &Scenario,
    variant: Variant,
    phases: usize,
    gains: PracticalGains,
    seed: u64,
) -> ControllerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = random_visit_plan(scenario, phases, &mut rng);
    match variant {
        Variant::Optimal => optimal_from_plan(&plan, scenario),
        Variant::Practical => practical_from_plan(&plan, scenario.num_targets(), gains),
    }
}

/// Independent descents from `restarts` seeded random initializations
/// (seeds `config.seed`, `config.seed + 1`, ...), run in parallel.
pub fn optimize_restarts(
    scenario: &Scenario,
    variant: Variant,
    phases: usize,
    gains: PracticalGains,
    restarts: usize,
    config: &DescentConfig,
    options: &SimOptions,
) -> Result<Vec<OptimizeResult>> {
    (0..restarts as u64)
        .into_par_iter()
        .map(|k| {
            let init = random_initialization(scenario, variant, phases, gains, config.seed.wrapping_add(k));
            optimize(scenario, &init, config, options)
        })
        .collect()
}

/// Lowest final cost among several runs.
pub fn best_of(results: &[OptimizeResult]) -> Option<&OptimizeResult> {
    results
        .iter()
        .min_by(|a, b| a.final_cost().total_cmp(&b.final_cost()))
}
