//! Exit criteria. Each test writes one `criterion N PASS|FAIL: ...` line to
//! stderr, bypassing the harness's output capture.
#![allow(clippy::needless_range_loop)]

use std::io::Write;

use permon::canonical::{
    canonicalize_interval, decompose_sensing_sequence, verify_improvement, SampledControl,
};
use permon::config::ScenarioFile;
use permon::controllers::{
    validate_params, ControllerParams, OptimalAgentParams, TrackingCombination, Variant,
};
use permon::ipa;
use permon::model::{AgentSpec, Scenario, TargetSpec};
use permon::optimizer::{feasible_direction_alpha, optimize, random_initialization, OptimizeResult};
use permon::oracle::{
    agrees, finite_diff_gradient, random_instance, random_simplex, run_deadzone_experiment,
    run_noise_experiment, run_static_experiment, trailing_max_uncertainty, DEADZONE_WINDOW,
    DEADZONE_ZERO_TOL, STATIC_GAP_TOL,
};
use permon::simulator::{simulate, SimOptions, SimOutput};
use permon::targets::TargetTrajectory;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, passed: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {}: {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(passed, "criterion {n} failed: {detail}");
}

fn bundled(name: &str) -> ScenarioFile {
    ScenarioFile::load(format!(
        "{}/../../scenarios/{name}.toml",
        env!("CARGO_MANIFEST_DIR")
    ))
    .unwrap()
}

#[test]
fn criterion_01_ipa_matches_finite_differences() {
    let start = std::time::Instant::now();
    let opts = SimOptions::default();
    let (mut compared, mut nonzero, mut failures) = (0usize, 0usize, Vec::new());
    for seed in 0..100u64 {
        for variant in [Variant::Optimal, Variant::Practical] {
            let (sc, params) = random_instance(1000 + seed, variant);
            let ipa = ipa::evaluate(&sc, &params, &opts).unwrap();
            let fd = finite_diff_gradient(&sc, &params, 1e-5, &opts).unwrap();
            let roles = params.roles();
            for d in 0..ipa.gradient.len() {
                if !fd.consistent[d] {
                    continue;
                }
                compared += 1;
                if ipa.gradient[d].abs() > 1e-6 {
                    nonzero += 1;
                }
                if !agrees(ipa.gradient[d], fd.gradient[d], 1e-3, 1e-6) {
                    failures.push(format!(
                        "seed {seed} {variant} {}: ipa {:e} fd {:e}",
                        roles[d], ipa.gradient[d], fd.gradient[d]
                    ));
                }
            }
        }
    }
    let detail = format!(
        "{compared} unmasked components ({nonzero} nonzero) on 100 scenarios x 2 variants, {} disagree, {:.0?}{}",
        failures.len(),
        start.elapsed(),
        failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
    );
    report(1, failures.is_empty() && nonzero > 0, &detail);
}

fn random_playback_case(seed: u64) -> (Scenario, SampledControl) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=3);
    let targets = (0..m)
        .map(|i| {
            let x = -4.0 + 4.0 * i as f64 + rng.gen_range(-0.5..0.5);
            let trajectory = if rng.gen_bool(0.5) {
                TargetTrajectory::stationary(x)
            } else {
                TargetTrajectory::sinusoid(
                    x,
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.6),
                    rng.gen_range(0.0..6.0),
                )
            };
            TargetSpec {
                growth_rate: rng.gen_range(0.5..1.5),
                reduction_rate: rng.gen_range(3.0..6.0),
                initial_uncertainty: rng.gen_range(0.0..3.0),
                trajectory,
            }
        })
        .collect();
    let agents = (0..rng.gen_range(1..=2))
        .map(|_| AgentSpec {
            initial_position: rng.gen_range(-3.0..3.0),
            sensing_range: rng.gen_range(0.6..1.4),
        })
        .collect();
    let horizon = rng.gen_range(6.0..14.0);
    let sc = Scenario::new(agents, targets, horizon, 0.5).unwrap();
    let u = SampledControl::random(
        &sc,
        SampledControl::default_step(horizon),
        rng.gen_range(0.3..1.5),
        &mut rng,
    );
    (sc, u)
}

#[test]
fn criterion_02_canonical_control_never_worse() {
    let opts = SimOptions::default();
    let (mut checked, mut seed, mut worst_gain) = (0, 0u64, f64::NEG_INFINITY);
    let mut problems = Vec::new();
    while checked < 100 {
        seed += 1;
        let (sc, u) = random_playback_case(seed);
        let d = decompose_sensing_sequence(&u, &sc, 0);
        if d.phases.is_empty() {
            continue;
        }
        let ph = d.phases[(seed as usize) % d.phases.len()];
        let c = canonicalize_interval(&u, 0, ph.target, ph.start, ph.end, &sc).unwrap();
        let (old, new) = (u.path(&sc, 0), c.control.path(&sc, 0));
        let slack = 2.0 * u.step;
        if (old.at(c.t1) - new.at(c.t1)).abs() > slack || (old.at(c.t2) - new.at(c.t2)).abs() > slack {
            problems.push(format!("seed {seed}: endpoint mismatch"));
        }
        for k in 0..old.nodes.len() {
            let t = old.node_time(k);
            if t > c.t1 && t < c.t2 {
                let th = sc.targets[ph.target].trajectory.position(t).unwrap();
                if (th - new.nodes[k]).abs() > (th - old.nodes[k]).abs() + slack {
                    problems.push(format!("seed {seed}: farther from target at t = {t}"));
                    break;
                }
            }
        }
        let imp = verify_improvement(&u, &c.control, &sc, &opts).unwrap();
        worst_gain = worst_gain.max(imp.cost_after - imp.cost_before);
        if imp.cost_after > imp.cost_before + 1e-9 {
            problems.push(format!("seed {seed}: {} -> {}", imp.cost_before, imp.cost_after));
        }
        checked += 1;
    }
    let detail = format!(
        "100 random controls, max J(u') - J(u) = {worst_gain:.3e}, {} violations{}",
        problems.len(),
        problems
            .first()
            .map(|p| format!("; first: {p}"))
            .unwrap_or_default()
    );
    report(2, problems.is_empty(), &detail);
}

fn check_run(res: &OptimizeResult, sc: &Scenario) -> Option<String> {
    for w in res.records.windows(2) {
        if w[1].cost > w[0].cost {
            return Some(format!("J rose at iteration {}", w[1].iteration));
        }
    }
    for r in &res.records {
        if let Some(v) = validate_params(&r.params, sc).first() {
            return Some(format!("iteration {}: {v}", r.iteration));
        }
        let check = |c: &TrackingCombination| {
            let s: f64 = c.weights().iter().sum();
            (s - 1.0).abs() <= 1e-9 && c.weights().iter().all(|w| (-1e-9..=1.0 + 1e-9).contains(w))
        };
        let ok = match &r.params {
            ControllerParams::Optimal(a) => a.iter().all(|p| {
                p.combinations.iter().all(check)
                    && p.durations.iter().all(|&d| (0.0..=sc.horizon).contains(&d))
            }),
            ControllerParams::Practical(a) => a.iter().all(|p| {
                p.combinations.iter().all(check)
                    && p.durations.iter().all(|&d| (0.0..=sc.horizon).contains(&d))
            }),
        };
        if !ok {
            return Some(format!("iteration {} infeasible", r.iteration));
        }
    }
    None
}

#[test]
fn criterion_03_descent_is_monotone_and_feasible() {
    let mut runs = 0;
    let mut iterations = 0;
    let mut problems = Vec::new();
    let mut record = |name: String, sc: &Scenario, res: OptimizeResult| {
        runs += 1;
        iterations += res.records.len() - 1;
        if let Some(p) = check_run(&res, sc) {
            problems.push(format!("{name}: {p}"));
        }
    };
    for name in ["example", "static", "deadzone"] {
        let f = bundled(name);
        let r = f.resolve().unwrap();
        let res = optimize(&r.scenario, &r.params, &r.descent, &r.options).unwrap();
        record(name.to_string(), &r.scenario, res);
    }
    let f = bundled("static");
    let r = f.resolve().unwrap();
    for variant in [Variant::Optimal, Variant::Practical] {
        for seed in 0..2 {
            let init = random_initialization(&r.scenario, variant, 4, f.gains(), seed);
            let res = optimize(&r.scenario, &init, &r.descent, &r.options).unwrap();
            record(format!("static {variant} seed {seed}"), &r.scenario, res);
        }
    }
    for seed in 0..6u64 {
        let variant = if seed % 2 == 0 {
            Variant::Optimal
        } else {
            Variant::Practical
        };
        let (sc, params) = random_instance(500 + seed, variant);
        let cfg = permon::optimizer::DescentConfig {
            max_iterations: 30,
            ..Default::default()
        };
        let res = optimize(&sc, &params, &cfg, &SimOptions::default()).unwrap();
        record(format!("instance {seed} {variant}"), &sc, res);
    }
    let detail = format!(
        "{runs} runs, {iterations} accepted iterates, {} violations{}",
        problems.len(),
        problems
            .first()
            .map(|p| format!("; first: {p}"))
            .unwrap_or_default()
    );
    report(3, problems.is_empty(), &detail);
}

fn grid_best(alpha: &[f64], g: &[f64]) -> f64 {
    fn rec(i: usize, left: usize, k: &mut [usize], alpha: &[f64], g: &[f64], best: &mut f64) {
        if i + 1 == k.len() {
            k[i] = left;
            let v: f64 = (0..k.len())
                .map(|j| (k[j] as f64 / 100.0 - alpha[j] + g[j]).powi(2))
                .sum();
            *best = best.min(v);
            return;
        }
        for v in 0..=left {
            k[i] = v;
            rec(i + 1, left - v, k, alpha, g, best);
        }
    }
    let mut best = f64::INFINITY;
    rec(0, 100, &mut vec![0; alpha.len()], alpha, g, &mut best);
    best
}

#[test]
fn criterion_04_weight_direction_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_gap, mut worst_dot) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for k in 0..1000 {
        let m = 1 + k % 4;
        let alpha = if k % 5 == 0 {
            TrackingCombination::vertex(m, k % m).weights().to_vec()
        } else {
            random_simplex(m, &mut rng)
        };
        let g: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let p = feasible_direction_alpha(&alpha, &g).unwrap();
        let ours: f64 = p.iter().zip(&g).map(|(a, b)| (a + b).powi(2)).sum();
        worst_gap = worst_gap.max(ours - grid_best(&alpha, &g));
        worst_dot = worst_dot.max(p.iter().zip(&g).map(|(a, b)| a * b).sum());
    }
    let passed = worst_gap <= 1e-4 && worst_dot <= 0.0;
    report(
        4,
        passed,
        &format!(
            "1000 blocks, max objective excess over grid {worst_gap:.3e}, max <grad, p> {worst_dot:.3e}"
        ),
    );
}

fn regression_runs() -> Vec<(String, Scenario, ControllerParams, SimOptions)> {
    ["example", "static", "deadzone", "noise"]
        .into_iter()
        .map(|name| {
            let r = bundled(name).resolve().unwrap();
            (name.to_string(), r.scenario, r.params, r.options)
        })
        .collect()
}

#[test]
fn criterion_05_step_convergence_and_determinism() {
    let mut worst: f64 = 0.0;
    let mut identical = true;
    for (_, sc, params, opts) in regression_runs() {
        let h = opts.step_for(sc.horizon);
        let coarse = simulate(
            &sc,
            &params,
            &SimOptions {
                step: Some(h),
                ..opts.clone()
            },
        )
        .unwrap();
        let fine = simulate(
            &sc,
            &params,
            &SimOptions {
                step: Some(h / 2.0),
                ..opts.clone()
            },
        )
        .unwrap();
        worst = worst.max((coarse.cost - fine.cost).abs() / fine.cost.abs());
        let sens = opts.clone().with_sensitivities();
        let a = simulate(&sc, &params, &sens).unwrap();
        let b = simulate(&sc, &params, &sens).unwrap();
        identical &= format!("{a:?}") == format!("{b:?}");
    }
    report(
        5,
        worst < 1e-6 && identical,
        &format!("max relative change on step halving {worst:.3e}, repeated runs identical: {identical}"),
    );
}

fn min_uncertainty(out: &SimOutput) -> f64 {
    out.samples
        .iter()
        .flat_map(|s| {
            s.uncertainties
                .iter()
                .chain(s.midpoint_uncertainties.iter().flatten())
        })
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_06_uncertainty_stays_nonnegative() {
    let mut lowest = f64::INFINITY;
    let mut runs = 0;
    for (_, sc, params, opts) in regression_runs() {
        lowest = lowest.min(min_uncertainty(&simulate(&sc, &params, &opts).unwrap()));
        runs += 1;
    }
    for seed in 0..100u64 {
        for variant in [Variant::Optimal, Variant::Practical] {
            let (sc, params) = random_instance(2000 + seed, variant);
            lowest = lowest.min(min_uncertainty(
                &simulate(&sc, &params, &SimOptions::default()).unwrap(),
            ));
            runs += 1;
        }
        let (sc, u) = random_playback_case(3000 + seed);
        lowest = lowest.min(min_uncertainty(&u.simulate(&sc, &SimOptions::default()).unwrap()));
        runs += 1;
    }
    report(
        6,
        lowest >= 0.0,
        &format!("{runs} runs, smallest R over all steps {lowest:e}"),
    );
}

#[test]
fn criterion_07_static_parameterizations_comparable() {
    let f = bundled("static");
    let r = f.resolve().unwrap();
    let rep = run_static_experiment(&r.scenario, &f.experiment_settings().unwrap()).unwrap();
    let o = rep.best(Variant::Optimal).unwrap().cost;
    let p = rep.best(Variant::Practical).unwrap().cost;
    let gap = (p - o).abs() / o.min(p);
    report(
        7,
        gap <= STATIC_GAP_TOL,
        &format!("optimal {o:.6}, practical {p:.6}, relative gap {gap:.4} (limit {STATIC_GAP_TOL})"),
    );
}

#[test]
fn criterion_08_deadzone_held_at_zero() {
    let f = bundled("deadzone");
    let r = f.resolve().unwrap();
    let rep = run_deadzone_experiment(&r.scenario, &r.params, &r.descent, &r.options).unwrap();
    let best = &rep.best[0];
    let out = simulate(&r.scenario, &best.params, &r.options).unwrap();
    let trailing = trailing_max_uncertainty(&out, DEADZONE_WINDOW);
    let mixed = match &best.params {
        ControllerParams::Practical(a) => a[0].combinations[0].weights().iter().all(|&w| w > 0.0),
        ControllerParams::Optimal(a) => a[0].combinations[0].weights().iter().all(|&w| w > 0.0),
    };
    let passed = trailing <= DEADZONE_ZERO_TOL && mixed && rep.passed();
    let checks: Vec<String> = rep
        .checks
        .iter()
        .map(|c| format!("{} {}", c.name, c.passed))
        .collect();
    report(
        8,
        passed,
        &format!(
            "J {:.6}, max R over trailing 20% {trailing:e}, mixed weights {mixed}, checks [{}]",
            best.cost,
            checks.join(", ")
        ),
    );
}

#[test]
fn criterion_09_noise_robustness_direction() {
    let start = std::time::Instant::now();
    let f = bundled("noise");
    let r = f.resolve().unwrap();
    let settings = f.experiment_settings().unwrap();
    let noise = r.options.noise.expect("noise scenario carries a noise model");
    let rep = run_noise_experiment(&r.scenario, &settings, &noise).unwrap();
    let o = rep.summary(Variant::Optimal).unwrap();
    let p = rep.summary(Variant::Practical).unwrap();
    let passed = rep.repetitions.len() == 2 * 50
        && p.optimized.mean <= o.optimized.mean
        && o.optimized.mean < o.initial.mean
        && p.optimized.mean < p.initial.mean;
    report(
        9,
        passed,
        &format!(
            "50 repetitions; mean J initial/optimized: optimal {:.4}/{:.4}, practical {:.4}/{:.4}; {:.0?}",
            o.initial.mean,
            o.optimized.mean,
            p.initial.mean,
            p.optimized.mean,
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_10_idle_agent_flags_missing_excitation() {
    let sc = Scenario::new(
        vec![
            AgentSpec {
                initial_position: 0.0,
                sensing_range: 1.0,
            },
            AgentSpec {
                initial_position: 40.0,
                sensing_range: 1.0,
            },
        ],
        vec![TargetSpec {
            growth_rate: 1.0,
            reduction_rate: 4.0,
            initial_uncertainty: 2.0,
            trajectory: TargetTrajectory::sinusoid(1.0, 1.0, 0.5, 0.0),
        }],
        10.0,
        0.0,
    )
    .unwrap();
    let params = ControllerParams::Optimal(vec![
        OptimalAgentParams {
            switching_points: vec![1.5, 0.5],
            combinations: vec![
                TrackingCombination::vertex(1, 0),
                TrackingCombination::vertex(1, 0),
            ],
            durations: vec![3.0, 3.0],
        },
        OptimalAgentParams {
            switching_points: vec![45.0, 38.0],
            combinations: vec![
                TrackingCombination::vertex(1, 0),
                TrackingCombination::vertex(1, 0),
            ],
            durations: vec![2.0, 2.0],
        },
    ]);
    let rep = ipa::evaluate(&sc, &params, &SimOptions::default()).unwrap();
    let offsets = params.block_offsets();
    let idle_zero = rep.gradient[offsets[1]..offsets[2]].iter().all(|&g| g == 0.0);
    let active_nonzero = rep.gradient[offsets[0]..offsets[1]].iter().any(|&g| g != 0.0);
    let passed =
        idle_zero && active_nonzero && rep.excitation_flag() && rep.unexcited_agents == vec![false, true];
    report(
        10,
        passed,
        &format!(
            "idle block exactly zero: {idle_zero}, flags {:?}, active block nonzero: {active_nonzero}",
            rep.unexcited_agents
        ),
    );
}
