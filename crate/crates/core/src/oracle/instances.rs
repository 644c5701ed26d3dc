use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::controllers::{
    optimal_from_plan, practical_from_plan, random_visit_plan, ControllerParams, PracticalGains,
    TrackingCombination, Variant,
};
use crate::model::{AgentSpec, Scenario, TargetSpec};
use crate::targets::TargetTrajectory;

/// Uniform draw from the probability simplex.
pub fn random_simplex<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn random_trajectory<R: Rng + ?Sized>(horizon: f64, rng: &mut R) -> TargetTrajectory {
    match rng.gen_range(0..3) {
        0 => TargetTrajectory::stationary(rng.gen_range(0.0..10.0)),
        1 => {
            let w: f64 = rng.gen_range(0.1..0.6);
            let amplitude: f64 = rng.gen_range(0.2..0.8) / w;
            TargetTrajectory::sinusoid(
                rng.gen_range(2.0..8.0),
                amplitude.min(3.0),
                w,
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        }
        _ => {
            let legs = rng.gen_range(1..4);
            let mut t = 0.0;
            let mut x = rng.gen_range(1.0..9.0);
            let mut waypoints = vec![(t, x)];
            for k in 0..legs {
                let dt = if k + 1 == legs {
                    (horizon - t).max(1.0)
                } else {
                    rng.gen_range(0.2..0.5) * horizon
                };
                let v: f64 = rng.gen_range(-0.7..0.7);
                t = if k + 1 == legs {
                    horizon.max(t + 1.0)
                } else {
                    t + dt
                };
                x += v * dt;
                waypoints.push((t, x));
            }
            TargetTrajectory::piecewise_linear(waypoints).expect("increasing waypoint times")
        }
    }
}

/// A seeded random problem instance and feasible parameters for it.
///
/// Instances have one or two agents, one to four targets of mixed motion
/// types, horizons in `[5, 20]`, and interior tracking weights.
pub fn random_instance(seed: u64, variant: Variant) -> (Scenario, ControllerParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=2);
    let m = rng.gen_range(1..=4);
    let horizon = rng.gen_range(5.0..20.0);
    let agents = (0..n)
        .map(|_| AgentSpec {
            initial_position: rng.gen_range(0.0..10.0),
            sensing_range: rng.gen_range(0.8..2.0),
        })
        .collect();
    let targets = (0..m)
        .map(|_| {
            let a = rng.gen_range(0.5..1.5);
            TargetSpec {
                growth_rate: a,
                reduction_rate: a * rng.gen_range(2.0..6.0),
                initial_uncertainty: rng.gen_range(0.0..3.0),
                trajectory: random_trajectory(horizon, &mut rng),
            }
        })
        .collect();
    let scenario = Scenario::new(agents, targets, horizon, 0.0).expect("valid random scenario");
    let phases = rng.gen_range(2..=3);
    let plan = random_visit_plan(&scenario, phases, &mut rng);
    let mut params = match variant {
        Variant::Optimal => optimal_from_plan(&plan, &scenario),
        Variant::Practical => practical_from_plan(
            &plan,
            m,
            PracticalGains {
                gain_p: rng.gen_range(2.0..6.0),
                gain_i: rng.gen_range(0.3..1.5),
                switch_tolerance: rng.gen_range(0.05..0.3),
            },
        ),
    };
    let mix = |c: &mut TrackingCombination, rng: &mut ChaCha8Rng| {
        let noise = random_simplex(m, rng);
        let lambda = rng.gen_range(0.5..0.9);
        for (w, z) in c.weights_mut().iter_mut().zip(noise) {
            *w = lambda * *w + (1.0 - lambda) * z;
        }
    };
    match &mut params {
        ControllerParams::Optimal(agents) => {
            for a in agents {
                a.combinations.iter_mut().for_each(|c| mix(c, &mut rng));
                for psi in &mut a.switching_points {
                    *psi += rng.gen_range(-0.5..0.5);
                }
                for phi in &mut a.durations {
                    *phi = phi.max(0.3);
                }
            }
        }
        ControllerParams::Practical(agents) => {
            for a in agents {
                a.combinations.iter_mut().for_each(|c| mix(c, &mut rng));
                for phi in &mut a.durations {
                    *phi = phi.max(0.3);
                }
            }
        }
    }
    (scenario, params)
}
