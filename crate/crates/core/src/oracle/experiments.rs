//! Static, deadzone and noise experiment harnesses.

use rayon::prelude::*;
use serde::Serialize;

use crate::controllers::{
    optimal_from_plan, practical_from_plan, ControllerParams, PracticalGains, TrackingCombination, Variant,
    VisitPlan,
};
use crate::error::Result;
use crate::model::Scenario;
use crate::optimizer::{optimize, random_initialization, DescentConfig, OptimizeResult, StopReason};
use crate::simulator::{simulate, NoiseModel, SimOptions, SimOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Static,
    Deadzone,
    Noise,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExperimentKind::Static => "static",
            ExperimentKind::Deadzone => "deadzone",
            ExperimentKind::Noise => "noise",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    /// Linear-interpolated quantiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let x = p * (v.len() - 1) as f64;
            let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
            v[lo] + (x - lo as f64) * (v[hi] - v[lo])
        };
        Some(Stats {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: q(0.5),
            q25: q(0.25),
            q75: q(0.75),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepetitionRecord {
    pub repetition: usize,
    pub seed: u64,
    pub variant: Variant,
    pub initial_cost: f64,
    pub optimized_cost: f64,
    pub iterations: usize,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub initial: Stats,
    pub optimized: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestRun {
    pub variant: Variant,
    pub cost: f64,
    pub params: ControllerParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub repetitions: Vec<RepetitionRecord>,
    pub summaries: Vec<VariantSummary>,
    pub best: Vec<BestRun>,
    pub checks: Vec<Check>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    pub fn best(&self, variant: Variant) -> Option<&BestRun> {
        self.best.iter().find(|b| b.variant == variant)
    }

    fn summarize(&mut self) {
        for variant in [Variant::Optimal, Variant::Practical] {
            let recs: Vec<&RepetitionRecord> =
                self.repetitions.iter().filter(|r| r.variant == variant).collect();
            let init: Vec<f64> = recs.iter().map(|r| r.initial_cost).collect();
            let opt: Vec<f64> = recs.iter().map(|r| r.optimized_cost).collect();
            if let (Some(initial), Some(optimized)) = (Stats::of(&init), Stats::of(&opt)) {
                self.summaries.push(VariantSummary {
                    variant,
                    initial,
                    optimized,
                });
            }
        }
    }
}

/// Shared knobs for the randomized experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    /// Phases per agent (`L`).
    pub phases: usize,
    pub gains: PracticalGains,
    pub repetitions: usize,
    pub seed: u64,
    pub descent: DescentConfig,
    pub options: SimOptions,
    /// Fixed visiting sequence shared by every repetition; random when absent.
    pub plan: Option<VisitPlan>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            phases: 4,
            gains: PracticalGains::default(),
            repetitions: 50,
            seed: 0,
            descent: DescentConfig::default(),
            options: SimOptions::default(),
            plan: None,
        }
    }
}

fn record(
    repetition: usize,
    seed: u64,
    variant: Variant,
    initial_cost: f64,
    res: &OptimizeResult,
) -> RepetitionRecord {
    RepetitionRecord {
        repetition,
        seed,
        variant,
        initial_cost,
        optimized_cost: res.final_cost(),
        iterations: res.records.len() - 1,
        stop: res.reason,
    }
}

/// One descent per variant and repetition from shared random visiting
/// sequences; `noise` (if any) gets seed `noise.seed + repetition`.
fn run_repetitions(
    scenario: &Scenario,
    settings: &ExperimentSettings,
    noise: Option<&NoiseModel>,
) -> Result<Vec<(RepetitionRecord, OptimizeResult)>> {
    let jobs: Vec<(usize, Variant)> = (0..settings.repetitions)
        .flat_map(|k| [(k, Variant::Optimal), (k, Variant::Practical)])
        .collect();
    jobs.into_par_iter()
        .map(|(k, variant)| {
            let seed = settings.seed.wrapping_add(k as u64);
            let mut options = settings.options.clone();
            if let Some(nm) = noise {
                let mut nm = *nm;
                nm.seed = nm.seed.wrapping_add(k as u64);
                options.noise = Some(nm);
            }
            let init = match (&settings.plan, variant) {
                (Some(plan), Variant::Optimal) => optimal_from_plan(plan, scenario),
                (Some(plan), Variant::Practical) => {
                    practical_from_plan(plan, scenario.num_targets(), settings.gains)
                }
                (None, _) => random_initialization(scenario, variant, settings.phases, settings.gains, seed),
            };
            let descent = DescentConfig {
                seed,
                ..settings.descent.clone()
            };
            let res = optimize(scenario, &init, &descent, &options)?;
            Ok((record(k, seed, variant, res.initial_cost(), &res), res))
        })
        .collect()
}

fn collect_best(runs: &[(RepetitionRecord, OptimizeResult)]) -> Vec<BestRun> {
    [Variant::Optimal, Variant::Practical]
        .into_iter()
        .filter_map(|variant| {
            runs.iter()
                .filter(|(r, _)| r.variant == variant)
                .min_by(|a, b| a.0.optimized_cost.total_cmp(&b.0.optimized_cost))
                .map(|(r, res)| BestRun {
                    variant,
                    cost: r.optimized_cost,
                    params: res.params.clone(),
                })
        })
        .collect()
}

/// Largest tolerated relative gap between the two parameterizations.
pub const STATIC_GAP_TOL: f64 = 0.10;

/// Both parameterizations from the same seeded visiting sequences; the best
/// run of each is compared.
pub fn run_static_experiment(scenario: &Scenario, settings: &ExperimentSettings) -> Result<ExperimentReport> {
    let runs = run_repetitions(scenario, settings, None)?;
    let mut report = ExperimentReport {
        kind: ExperimentKind::Static,
        repetitions: runs.iter().map(|r| r.0.clone()).collect(),
        summaries: Vec::new(),
        best: collect_best(&runs),
        checks: Vec::new(),
    };
    report.summarize();
    if let (Some(o), Some(p)) = (report.best(Variant::Optimal), report.best(Variant::Practical)) {
        let gap = (p.cost - o.cost).abs() / o.cost.min(p.cost);
        report.checks.push(Check {
            name: "cost_gap".into(),
            passed: gap <= STATIC_GAP_TOL,
            detail: format!("optimal {:.6}, practical {:.6}, gap {:.4}", o.cost, p.cost, gap),
        });
    }
    Ok(report)
}

/// Uncertainties at or below this count as zero.
pub const DEADZONE_ZERO_TOL: f64 = 1e-9;
/// Trailing fraction of the horizon over which all uncertainties must be zero.
pub const DEADZONE_WINDOW: f64 = 0.2;

/// Largest `R` over samples with `t ≥ (1 − window)·T`.
pub fn trailing_max_uncertainty(out: &SimOutput, window: f64) -> f64 {
    let from = (1.0 - window) * out.horizon;
    out.samples
        .iter()
        .filter(|s| s.time >= from)
        .flat_map(|s| s.uncertainties.iter().cloned())
        .fold(0.0, f64::max)
}

/// Positions `x` (on a grid of spacing `dx`) from which a lone agent
/// `agent` makes `A − B·p ≤ 0` for every target at time `t`.
pub fn deadzone_positions(scenario: &Scenario, agent: usize, t: f64, dx: f64) -> Vec<f64> {
    let r = scenario.agents[agent].sensing_range;
    let xs: Vec<f64> = scenario
        .targets
        .iter()
        .map(|x| x.trajectory.position_at(t))
        .collect();
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min) - r;
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + r;
    let n = ((hi - lo) / dx).ceil() as usize;
    (0..=n)
        .map(|k| lo + k as f64 * dx)
        .filter(|&x| {
            scenario.targets.iter().zip(&xs).all(|(tg, &th)| {
                let p = (1.0 - (th - x).abs() / r).max(0.0);
                tg.growth_rate - tg.reduction_rate * p <= 0.0
            })
        })
        .collect()
}

/// Optimizes `initial` (mixed tracking weights) and compares against every
/// single-target vertex of the same parameters.
pub fn run_deadzone_experiment(
    scenario: &Scenario,
    initial: &ControllerParams,
    descent: &DescentConfig,
    options: &SimOptions,
) -> Result<ExperimentReport> {
    let res = optimize(scenario, initial, descent, options)?;
    let out = simulate(scenario, &res.params, options)?;
    let trailing = trailing_max_uncertainty(&out, DEADZONE_WINDOW);
    let variant = initial.variant();
    let m = scenario.num_targets();
    let mut baseline = f64::INFINITY;
    for i in 0..m {
        let mut v = res.params.clone();
        set_all_weights(&mut v, &TrackingCombination::vertex(m, i));
        baseline = baseline.min(simulate(scenario, &v, options)?.cost);
    }
    let final_pos: Vec<f64> = out
        .samples
        .last()
        .map(|s| s.positions.clone())
        .unwrap_or_default();
    let zone = deadzone_positions(scenario, 0, scenario.horizon, 1e-3);
    let in_zone = match (zone.first(), zone.last(), final_pos.first()) {
        (Some(&a), Some(&b), Some(&s)) => s >= a - 1e-3 && s <= b + 1e-3,
        _ => false,
    };
    let mut report = ExperimentReport {
        kind: ExperimentKind::Deadzone,
        repetitions: vec![record(0, descent.seed, variant, res.initial_cost(), &res)],
        summaries: Vec::new(),
        best: vec![BestRun {
            variant,
            cost: res.final_cost(),
            params: res.params.clone(),
        }],
        checks: Vec::new(),
    };
    report.summarize();
    report.checks.push(Check {
        name: "trailing_zero".into(),
        passed: trailing <= DEADZONE_ZERO_TOL,
        detail: format!("max R over the trailing {DEADZONE_WINDOW} of the horizon: {trailing:e}"),
    });
    report.checks.push(Check {
        name: "beats_vertex_baseline".into(),
        passed: res.final_cost() < baseline,
        detail: format!("mixed {:.6} vs best vertex {:.6}", res.final_cost(), baseline),
    });
    report.checks.push(Check {
        name: "final_position_in_deadzone".into(),
        passed: in_zone,
        detail: match (zone.first(), zone.last()) {
            (Some(a), Some(b)) => format!("final positions {final_pos:?}, deadzone [{a:.4}, {b:.4}]"),
            _ => "no deadzone exists".into(),
        },
    });
    Ok(report)
}

fn set_all_weights(params: &mut ControllerParams, w: &TrackingCombination) {
    match params {
        ControllerParams::Optimal(agents) => agents
            .iter_mut()
            .for_each(|a| a.combinations.iter_mut().for_each(|c| *c = w.clone())),
        ControllerParams::Practical(agents) => agents
            .iter_mut()
            .for_each(|a| a.combinations.iter_mut().for_each(|c| *c = w.clone())),
    }
}

/// Repeated noisy optimizations of both parameterizations.
pub fn run_noise_experiment(
    scenario: &Scenario,
    settings: &ExperimentSettings,
    noise: &NoiseModel,
) -> Result<ExperimentReport> {
    let runs = run_repetitions(scenario, settings, Some(noise))?;
    let mut report = ExperimentReport {
        kind: ExperimentKind::Noise,
        repetitions: runs.iter().map(|r| r.0.clone()).collect(),
        summaries: Vec::new(),
        best: collect_best(&runs),
        checks: Vec::new(),
    };
    report.summarize();
    if let (Some(o), Some(p)) = (
        report.summary(Variant::Optimal),
        report.summary(Variant::Practical),
    ) {
        let (o, p) = (o.clone(), p.clone());
        report.checks.push(Check {
            name: "practical_not_worse".into(),
            passed: p.optimized.mean <= o.optimized.mean,
            detail: format!(
                "mean optimized cost: practical {:.6}, optimal {:.6}",
                p.optimized.mean, o.optimized.mean
            ),
        });
        for s in [o, p] {
            report.checks.push(Check {
                name: format!("{}_improves", s.variant),
                passed: s.optimized.mean < s.initial.mean,
                detail: format!("mean cost {:.6} -> {:.6}", s.initial.mean, s.optimized.mean),
            });
        }
    }
    Ok(report)
}
