use rayon::prelude::*;

use crate::controllers::{ControllerParams, ParamRole};
use crate::error::Result;
use crate::model::Scenario;
use crate::simulator::{simulate_unchecked, EventKind, SimOptions};

/// Central-difference gradient with a per-component usability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub gradient: Vec<f64>,
    /// `false` where a perturbation changed the event-kind sequence or
    /// left the parameter box, so the quotient says nothing about IPA.
    pub consistent: Vec<bool>,
}

impl FdGradient {
    pub fn consistent_count(&self) -> usize {
        self.consistent.iter().filter(|&&c| c).count()
    }
}

/// `(J(θ + h e_d) − J(θ − h e_d)) / 2h` for every component `d`.
pub fn finite_diff_gradient(
    scenario: &Scenario,
    params: &ControllerParams,
    h: f64,
    options: &SimOptions,
) -> Result<FdGradient> {
    assert!(h > 0.0, "difference step must be positive");
    let mut options = options.clone();
    options.sensitivities = false;
    options.trace_sensitivities = false;
    options.record_samples = false;
    let base = simulate_unchecked(scenario, params, &options)?;
    let base_kinds: Vec<EventKind> = base.event_kinds();
    let theta = params.to_vector();
    let roles = params.roles();
    let results: Vec<Result<(f64, bool)>> = (0..theta.len())
        .into_par_iter()
        .map(|d| {
            let probe = |delta: f64| {
                let mut v = theta.clone();
                v[d] += delta;
                simulate_unchecked(scenario, &params.with_vector(&v), &options)
            };
            let plus = probe(h)?;
            let minus = probe(-h)?;
            let in_box = match roles[d] {
                ParamRole::Duration { .. } => theta[d] - h >= 0.0 && theta[d] + h <= scenario.horizon,
                _ => true,
            };
            let same = plus.event_kinds() == base_kinds && minus.event_kinds() == base_kinds;
            Ok(((plus.cost - minus.cost) / (2.0 * h), same && in_box))
        })
        .collect();
    let mut gradient = Vec::with_capacity(theta.len());
    let mut consistent = Vec::with_capacity(theta.len());
    for r in results {
        let (g, c) = r?;
        gradient.push(g);
        consistent.push(c);
    }
    Ok(FdGradient { gradient, consistent })
}

/// Componentwise agreement test: relative error within `rel_tol` or
/// absolute error within `abs_tol`.
pub fn agrees(ipa: f64, fd: f64, rel_tol: f64, abs_tol: f64) -> bool {
    let err = (ipa - fd).abs();
    err <= abs_tol || err <= rel_tol * ipa.abs().max(fd.abs())
}
