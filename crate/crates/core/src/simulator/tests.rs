use super::*;
use crate::controllers::{OptimalAgentParams, PracticalAgentParams, TrackingCombination};
use crate::model::{cost, AgentSpec, TargetSpec};
use crate::targets::TargetTrajectory;
use proptest::prelude::*;

fn target(traj: TargetTrajectory, a: f64, b: f64, r0: f64) -> TargetSpec {
    TargetSpec {
        growth_rate: a,
        reduction_rate: b,
        initial_uncertainty: r0,
        trajectory: traj,
    }
}

fn agent(s0: f64, r: f64) -> AgentSpec {
    AgentSpec {
        initial_position: s0,
        sensing_range: r,
    }
}

fn go_to(psi: f64, m: usize) -> ControllerParams {
    ControllerParams::Optimal(vec![OptimalAgentParams {
        switching_points: vec![psi],
        combinations: vec![TrackingCombination::vertex(m, 0)],
        durations: vec![1.0],
    }])
}

fn first_event(out: &SimOutput, pred: impl Fn(&EventKind) -> bool) -> f64 {
    out.events
        .iter()
        .find(|e| pred(&e.kind))
        .expect("event present")
        .time
}

#[test]
fn dwelling_on_a_static_target_gives_triangle_cost() {
    let sc = Scenario::new(
        vec![agent(2.0, 1.0)],
        vec![target(TargetTrajectory::stationary(2.0), 1.0, 3.0, 1.0)],
        4.0,
        0.0,
    )
    .unwrap();
    let out = simulate(&sc, &go_to(2.0, 1), &SimOptions::default()).unwrap();
    let t0 = first_event(&out, |k| matches!(k, EventKind::RHitsZero { .. }));
    assert!((t0 - 0.5).abs() < 1e-14, "{t0}");
    // R falls at rate 2 from 1, then stays at 0
    assert!((out.cost - 0.25 / 4.0).abs() < 1e-13, "{}", out.cost);
    assert!(out
        .samples
        .iter()
        .filter(|s| s.time >= 0.5)
        .all(|s| s.uncertainties[0] == 0.0));
    assert_eq!(cost(&out).unwrap(), out.cost);
}

#[test]
fn never_sensing_gives_pure_growth_cost() {
    let sc = Scenario::new(
        vec![agent(-50.0, 1.0)],
        vec![
            target(TargetTrajectory::stationary(5.0), 1.0, 3.0, 2.0),
            target(TargetTrajectory::stationary(9.0), 0.5, 3.0, 0.0),
        ],
        10.0,
        0.0,
    )
    .unwrap();
    let out = simulate(&sc, &go_to(-50.0, 2), &SimOptions::default()).unwrap();
    let expected = (2.0 * 10.0 + 1.0 * 50.0 + 0.5 * 50.0) / 10.0;
    assert!((out.cost - expected).abs() < 1e-12 * expected);
    assert!(!out.agent_sensed[0]);
}

#[test]
fn sense_enter_while_travelling() {
    let sc = Scenario::new(
        vec![agent(0.0, 1.0)],
        vec![target(TargetTrajectory::stationary(3.0), 1.0, 3.0, 1.0)],
        6.0,
        0.0,
    )
    .unwrap();
    let out = simulate(&sc, &go_to(10.0, 1), &SimOptions::default()).unwrap();
    let enter = first_event(&out, |k| matches!(k, EventKind::SenseEnter { .. }));
    let pass = first_event(&out, |k| matches!(k, EventKind::TargetPass { .. }));
    let exit = first_event(&out, |k| matches!(k, EventKind::SenseExit { .. }));
    assert!((enter - 2.0).abs() < 1e-14, "{enter}");
    assert!((pass - 3.0).abs() < 1e-14, "{pass}");
    assert!((exit - 4.0).abs() < 1e-14, "{exit}");
}

#[test]
fn sinusoid_crossings_match_a_fine_grid_scan() {
    let traj = TargetTrajectory::sinusoid(0.0, 2.0, 1.3, 0.2);
    let sc = Scenario::new(
        vec![agent(0.5, 1.0)],
        vec![target(traj.clone(), 1.0, 3.0, 1.0)],
        12.0,
        0.0,
    )
    .unwrap();
    let out = simulate_playback(&sc, 12.0, &[vec![0.0]], &SimOptions::default()).unwrap();
    let logged: Vec<f64> = out
        .events
        .iter()
        .filter(|e| e.time > 0.0)
        .filter(|e| matches!(e.kind, EventKind::SenseEnter { .. } | EventKind::SenseExit { .. }))
        .map(|e| e.time)
        .collect();
    let g = |t: f64| (traj.position_at(t) - 0.5).abs() - 1.0;
    let mut roots = Vec::new();
    let n = 1_200_000;
    for k in 0..n {
        let (a, b) = (12.0 * k as f64 / n as f64, 12.0 * (k + 1) as f64 / n as f64);
        if g(a).signum() != g(b).signum() {
            let (mut lo, mut hi) = (a, b);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if g(mid).signum() == g(lo).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
    }
    assert_eq!(logged.len(), roots.len());
    for (a, b) in logged.iter().zip(&roots) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn mixed_scenario() -> (Scenario, ControllerParams, ControllerParams) {
    let sc = Scenario::new(
        vec![agent(0.0, 1.2), agent(6.0, 0.8)],
        vec![
            target(TargetTrajectory::sinusoid(1.0, 1.5, 0.4, 0.0), 1.0, 4.0, 2.0),
            target(
                TargetTrajectory::piecewise_linear(vec![(0.0, 4.0), (5.0, 6.0), (12.0, 3.0)]).unwrap(),
                0.7,
                3.0,
                1.0,
            ),
            target(TargetTrajectory::stationary(8.0), 1.2, 5.0, 0.5),
        ],
        12.0,
        0.0,
    )
    .unwrap();
    let opt = ControllerParams::Optimal(vec![
        OptimalAgentParams {
            switching_points: vec![1.2, 4.5, 0.0],
            combinations: vec![
                TrackingCombination::new(vec![1.0, 0.0, 0.0]).unwrap(),
                TrackingCombination::new(vec![0.3, 0.7, 0.0]).unwrap(),
                TrackingCombination::new(vec![0.5, 0.5, 0.0]).unwrap(),
            ],
            durations: vec![2.0, 1.5, 3.0],
        },
        OptimalAgentParams {
            switching_points: vec![7.8, 5.0],
            combinations: vec![
                TrackingCombination::new(vec![0.0, 0.0, 1.0]).unwrap(),
                TrackingCombination::new(vec![0.0, 1.0, 0.0]).unwrap(),
            ],
            durations: vec![3.0, 2.0],
        },
    ]);
    let pr = ControllerParams::Practical(vec![
        PracticalAgentParams {
            combinations: vec![
                TrackingCombination::new(vec![1.0, 0.0, 0.0]).unwrap(),
                TrackingCombination::new(vec![0.2, 0.8, 0.0]).unwrap(),
            ],
            durations: vec![4.0, 5.0],
            gain_p: 5.0,
            gain_i: 1.0,
            switch_tolerance: 0.1,
        },
        PracticalAgentParams {
            combinations: vec![
                TrackingCombination::new(vec![0.0, 0.0, 1.0]).unwrap(),
                TrackingCombination::new(vec![0.0, 1.0, 0.0]).unwrap(),
            ],
            durations: vec![3.5, 4.0],
            gain_p: 3.0,
            gain_i: 0.5,
            switch_tolerance: 0.2,
        },
    ]);
    (sc, opt, pr)
}

#[test]
fn runs_are_deterministic_and_sensitivities_do_not_touch_the_state() {
    let (sc, opt, pr) = mixed_scenario();
    for params in [&opt, &pr] {
        let plain = simulate(&sc, params, &SimOptions::default()).unwrap();
        let again = simulate(&sc, params, &SimOptions::default()).unwrap();
        assert_eq!(plain, again);
        let with = simulate(&sc, params, &SimOptions::default().with_sensitivities()).unwrap();
        assert_eq!(plain.samples, with.samples);
        assert_eq!(plain.events, with.events);
        assert_eq!(plain.cost.to_bits(), with.cost.to_bits());
    }
}

#[test]
fn event_log_is_ordered_and_bracketed() {
    let (sc, opt, pr) = mixed_scenario();
    for params in [&opt, &pr] {
        let out = simulate(&sc, params, &SimOptions::default()).unwrap();
        assert_eq!(out.events.first().unwrap().kind, EventKind::Start);
        assert_eq!(out.events.first().unwrap().time, 0.0);
        let last = out.events.last().unwrap();
        assert_eq!(last.kind, EventKind::HorizonEnd);
        assert_eq!(last.time, sc.horizon);
        assert!(out.events.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(out.samples.windows(2).all(|w| w[0].time < w[1].time));
        assert!(out
            .samples
            .iter()
            .all(|s| s.controls.iter().all(|u| u.abs() <= 1.0)));
        assert_eq!(out.samples.last().unwrap().time, sc.horizon);
    }
}

#[test]
fn halving_the_step_barely_moves_the_cost() {
    let (sc, opt, pr) = mixed_scenario();
    for params in [&opt, &pr] {
        let coarse = simulate(
            &sc,
            params,
            &SimOptions {
                step: Some(0.02),
                ..Default::default()
            },
        )
        .unwrap();
        let fine = simulate(
            &sc,
            params,
            &SimOptions {
                step: Some(0.01),
                ..Default::default()
            },
        )
        .unwrap();
        let rel = (coarse.cost - fine.cost).abs() / fine.cost;
        assert!(rel < 1e-6, "relative change {rel}");
    }
}

#[test]
fn practical_activation_matches_bisection_on_the_error() {
    // static target at 3, agent starts at 0; u saturates until K_p e < 1,
    // then e decays as e(t) = e(t1) exp(-K_p (t - t1))
    let sc = Scenario::new(
        vec![agent(0.0, 1.0)],
        vec![target(TargetTrajectory::stationary(3.0), 1.0, 3.0, 1.0)],
        8.0,
        0.0,
    )
    .unwrap();
    let params = ControllerParams::Practical(vec![PracticalAgentParams {
        combinations: vec![TrackingCombination::vertex(1, 0)],
        durations: vec![8.0],
        gain_p: 2.0,
        gain_i: 1.0,
        switch_tolerance: 0.3,
    }]);
    let out = simulate(&sc, &params, &SimOptions::default()).unwrap();
    let sat_exit = first_event(&out, |k| matches!(k, EventKind::SaturationCross { .. }));
    let act = first_event(&out, |k| matches!(k, EventKind::IntegratorActivate { .. }));
    // saturated at +1 until e = 1/K_p
    assert!((sat_exit - 2.5).abs() < 1e-12, "{sat_exit}");
    let e = |t: f64| 0.5 * (-2.0 * (t - 2.5)).exp();
    let (mut lo, mut hi) = (2.5, 8.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if (2.0 * e(mid)).abs() - 0.3 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!((act - hi).abs() < 1e-9, "{act} vs {hi}");
}

#[test]
fn event_cap_reports_chattering() {
    let (sc, opt, _) = mixed_scenario();
    let err = simulate(
        &sc,
        &opt,
        &SimOptions {
            max_events: 3,
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::EventLimit { limit: 3, .. }));
}

#[test]
fn noise_is_reproducible_and_changes_the_run() {
    let (sc, opt, pr) = mixed_scenario();
    for params in [&opt, &pr] {
        let noisy = SimOptions {
            noise: Some(NoiseModel::new(0.3, 0.3, 11)),
            ..Default::default()
        };
        let a = simulate(&sc, params, &noisy).unwrap();
        let b = simulate(&sc, params, &noisy).unwrap();
        assert_eq!(a, b);
        let clean = simulate(&sc, params, &SimOptions::default()).unwrap();
        assert_ne!(a.cost, clean.cost);
        let zero = SimOptions {
            noise: Some(NoiseModel::new(0.0, 0.0, 11)),
            ..Default::default()
        };
        let z = simulate(&sc, params, &zero).unwrap();
        assert!((z.cost - clean.cost).abs() < 1e-9 * clean.cost);
    }
}

#[test]
fn playback_of_constant_control_moves_linearly() {
    let sc = Scenario::new(
        vec![agent(0.0, 1.0)],
        vec![target(TargetTrajectory::stationary(30.0), 1.0, 3.0, 0.0)],
        5.0,
        0.0,
    )
    .unwrap();
    let values = vec![vec![0.5; 50]];
    let out = simulate_playback(&sc, 0.1, &values, &SimOptions::default()).unwrap();
    let last = out.samples.last().unwrap();
    assert!((last.positions[0] - 2.5).abs() < 1e-12);
    assert!((out.cost - 2.5).abs() < 1e-12);
}

fn arb_trajectory() -> impl Strategy<Value = TargetTrajectory> {
    prop_oneof![
        (-5.0..5.0f64).prop_map(TargetTrajectory::stationary),
        (-3.0..3.0f64, 0.0..2.0f64, 0.1..0.5f64, 0.0..6.0f64)
            .prop_map(|(o, a, w, p)| TargetTrajectory::sinusoid(o, a, w, p)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn uncertainties_never_go_negative(
        trajs in proptest::collection::vec(arb_trajectory(), 1..4),
        s0 in -4.0..4.0f64,
        psi in proptest::collection::vec(-5.0..5.0f64, 2),
        phi in proptest::collection::vec(0.0..4.0f64, 2),
        practical in any::<bool>(),
    ) {
        let m = trajs.len();
        let sc = Scenario::new(
            vec![agent(s0, 1.5)],
            trajs.into_iter().map(|t| target(t, 1.0, 6.0, 0.5)).collect(),
            8.0,
            0.0,
        ).unwrap();
        let combos = vec![TrackingCombination::vertex(m, 0), TrackingCombination::uniform(m)];
        let params = if practical {
            ControllerParams::Practical(vec![PracticalAgentParams {
                combinations: combos, durations: phi, gain_p: 5.0, gain_i: 1.0, switch_tolerance: 0.1,
            }])
        } else {
            ControllerParams::Optimal(vec![OptimalAgentParams {
                switching_points: psi, combinations: combos, durations: phi,
            }])
        };
        let out = simulate(&sc, &params, &SimOptions::default()).unwrap();
        prop_assert!(out.min_uncertainty() >= 0.0);
    }
}
