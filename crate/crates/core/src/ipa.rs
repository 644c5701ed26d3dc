//! Parameter gradients of the cost by infinitesimal perturbation analysis.
//!
//! The simulator carries `s′`, `I′` and `R′` through every segment with the
//! same RK4 stages as the state and applies the jump conditions below at
//! events; this module holds those jump formulas and turns the integrated
//! `∫ Σ R′ dt` into `∇J`.

use crate::controllers::ControllerParams;
use crate::error::{Error, Result};
use crate::model::Scenario;
use crate::simulator::{simulate_unchecked, SegmentContribution, SimOutput};

/// Event-time derivative when an agent moving at `direction` reaches its
/// switching point: `τ′ = sgn·(∂ψ/∂θ − s′(τ⁻))`.
pub fn switching_point_tau(s_prime: &[f64], direction: f64, psi_index: usize) -> Vec<f64> {
    let mut tau: Vec<f64> = s_prime.iter().map(|s| -direction * s).collect();
    tau[psi_index] += direction;
    tau
}

/// Derivative of a practical period boundary `t̄_ℓ = Σ_{k≤ℓ} φ_k`.
pub fn period_end_tau(len: usize, duration_indices: &[usize]) -> Vec<f64> {
    let mut tau = vec![0.0; len];
    for &k in duration_indices {
        tau[k] = 1.0;
    }
    tau
}

/// Derivative of the integrator activation time from the guard
/// `|K_p e| = ε`: `τ′ = −e′ / ė`.
pub fn activation_tau(e_prime: &[f64], e_rate: f64) -> Vec<f64> {
    e_prime.iter().map(|ep| -ep / e_rate).collect()
}

/// State-derivative jump `x′(τ⁺) = x′(τ⁻) + (f(τ⁻) − f(τ⁺)) τ′` for a
/// continuous state whose velocity jumps from `f_minus` to `f_plus`.
pub fn apply_jump(x_prime: &mut [f64], f_minus: f64, f_plus: f64, tau: &[f64]) {
    for (x, t) in x_prime.iter_mut().zip(tau) {
        *x += (f_minus - f_plus) * t;
    }
}

/// `R′` right after `R` reaches zero and enters the clamp.
pub fn zero_clamp_reset(r_prime: &mut [f64]) {
    r_prime.iter_mut().for_each(|v| *v = 0.0);
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    /// `∂J/∂θ` in flattened parameter order.
    pub gradient: Vec<f64>,
    /// Contribution of each inter-event segment to the gradient.
    pub segments: Vec<SegmentContribution>,
    /// Per agent: the agent's gradient block is identically zero and it
    /// never sensed a target.
    pub unexcited_agents: Vec<bool>,
    pub cost: f64,
}

impl GradientReport {
    /// Raised when some agent's block vanishes for lack of sensing events.
    pub fn excitation_flag(&self) -> bool {
        self.unexcited_agents.iter().any(|&b| b)
    }

    pub fn norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Gradient of `J` at `params`, reusing the sensitivities in `sim` when it
/// carries them and re-running the simulation with sensitivities otherwise.
pub fn gradient(scenario: &Scenario, params: &ControllerParams, sim: &SimOutput) -> Result<GradientReport> {
    if sim.params_vector.as_deref() != Some(params.to_vector().as_slice()) {
        return Err(Error::Precondition(
            "simulation was run with different parameters".into(),
        ));
    }
    let rerun;
    let run = if sim.sensitivity.is_some() {
        sim
    } else {
        let opts = sim.options.clone().with_sensitivities();
        rerun = simulate_unchecked(scenario, params, &opts)?;
        if rerun.event_kinds() != sim.event_kinds() {
            return Err(Error::Precondition(
                "event sequence changed on re-simulation".into(),
            ));
        }
        &rerun
    };
    report(run)
}

/// Builds the report from a run that carries sensitivities.
pub fn report(run: &SimOutput) -> Result<GradientReport> {
    let sens = run.sensitivity.as_ref().ok_or(Error::MissingSensitivities)?;
    let scale = 1.0 / run.horizon;
    let gradient: Vec<f64> = sens.integral.iter().map(|v| v * scale).collect();
    let segments = sens
        .segments
        .iter()
        .map(|s| SegmentContribution {
            start: s.start,
            end: s.end,
            integral: s.integral.iter().map(|v| v * scale).collect(),
        })
        .collect();
    let unexcited_agents = (0..sens.block_offsets.len() - 1)
        .map(|j| {
            let block = &gradient[sens.block_offsets[j]..sens.block_offsets[j + 1]];
            block.iter().all(|&g| g == 0.0) && !run.agent_sensed[j]
        })
        .collect();
    Ok(GradientReport {
        gradient,
        segments,
        unexcited_agents,
        cost: run.cost,
    })
}

/// Cost and gradient in one simulation.
pub fn evaluate(
    scenario: &Scenario,
    params: &ControllerParams,
    options: &crate::simulator::SimOptions,
) -> Result<GradientReport> {
    let run = simulate_unchecked(scenario, params, &options.clone().with_sensitivities())?;
    report(&run)
}
