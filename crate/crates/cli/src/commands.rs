use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use permon::model::validate_assumptions;
use permon::oracle::{
    agrees, finite_diff_gradient, run_deadzone_experiment, run_noise_experiment, run_static_experiment,
    ExperimentReport,
};
use permon::{ipa, Error, ScenarioFile};
use serde_json::json;

use crate::output::{self, GradCheckRow};
use crate::{ExperimentArg, Overrides};

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-3;
const FD_ABS_TOL: f64 = 1e-6;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid input: exit status 1.
    Input(String),
    /// Failure while running or writing results: exit status 2.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> CliError {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. }
            | Error::InvalidScenario(_)
            | Error::InvalidTrajectory(_)
            | Error::InvalidParams(_) => CliError::Input(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn load(path: &Path, overrides: &Overrides) -> Result<ScenarioFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut file = ScenarioFile::from_toml_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if let Some(seed) = overrides.seed {
        file.controller.seed = Some(seed);
        file.optimizer.seed = seed;
        if let Some(noise) = file.simulator.noise.as_mut() {
            noise.seed = seed;
        }
        if let Some(exp) = file.experiment.as_mut() {
            exp.seed = Some(seed);
        }
    }
    if let Some(step) = overrides.step {
        file.simulator.step = Some(step);
    }
    if let Some(max_iters) = overrides.max_iters {
        file.optimizer.max_iterations = max_iters;
    }
    Ok(file)
}

fn output_dir(dir: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(dir.to_path_buf())
}

fn echo(file: &ScenarioFile) -> serde_json::Value {
    serde_json::to_value(file).unwrap_or(serde_json::Value::Null)
}

pub fn validate(path: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let file = load(path, overrides)?;
    let r = file.resolve()?;
    let sc = &r.scenario;
    println!(
        "ok: {} agent(s), {} target(s), horizon {}, {} controller with {} parameters",
        sc.agents.len(),
        sc.targets.len(),
        sc.horizon,
        r.params.variant(),
        r.params.num_params()
    );
    let report = validate_assumptions(sc, r.options.step_for(sc.horizon))?;
    println!(
        "max target speed {} (target {} at t = {})",
        report.max_target_speed, report.max_speed_target, report.max_speed_time
    );
    if report.speed_violation {
        println!(
            "warning: target {} moves faster than the agents (speed {} at t = {}); monitoring guarantees do not apply",
            report.max_speed_target, report.max_target_speed, report.max_speed_time
        );
    }
    if let (Some(sep), Some((a, b))) = (report.min_separation, report.min_separation_pair) {
        println!(
            "min target separation {sep} (targets {a} and {b} at t = {}), required {}",
            report.min_separation_time, report.required_separation
        );
        if report.separation_violation {
            println!("warning: targets {a} and {b} come closer than two sensing ranges plus the margin");
        }
    }
    Ok(())
}

pub fn simulate(path: &Path, overrides: &Overrides, out_dir: &Path) -> Result<(), CliError> {
    let file = load(path, overrides)?;
    let r = file.resolve()?;
    let out = permon::simulate(&r.scenario, &r.params, &r.options)?;
    let dir = output_dir(out_dir)?;
    output::write_states(&dir.join("states.csv"), &out)?;
    output::write_events(&dir.join("events.csv"), &out)?;
    output::write_json(
        &dir.join("summary.json"),
        &json!({
            "cost": out.cost,
            "event_count": out.events.len(),
            "step": out.step,
            "config": echo(&file),
        }),
    )?;
    println!("J = {} with {} events", output::num(out.cost), out.events.len());
    Ok(())
}

pub fn optimize(
    path: &Path,
    overrides: &Overrides,
    out_dir: &Path,
    grad_check: bool,
) -> Result<(), CliError> {
    let file = load(path, overrides)?;
    let r = file.resolve()?;
    let res = permon::optimize(&r.scenario, &r.params, &r.descent, &r.options)?;
    let checks = if grad_check {
        let mut rows = Vec::with_capacity(res.records.len());
        for rec in &res.records {
            let g = ipa::evaluate(&r.scenario, &rec.params, &r.options)?;
            let fd = finite_diff_gradient(&r.scenario, &rec.params, FD_STEP, &r.options)?;
            let mut row = GradCheckRow {
                compared: 0,
                disagreements: 0,
                max_abs_diff: 0.0,
            };
            for d in (0..g.gradient.len()).filter(|&d| fd.consistent[d]) {
                row.compared += 1;
                row.max_abs_diff = row.max_abs_diff.max((g.gradient[d] - fd.gradient[d]).abs());
                if !agrees(g.gradient[d], fd.gradient[d], FD_REL_TOL, FD_ABS_TOL) {
                    row.disagreements += 1;
                }
            }
            rows.push(row);
        }
        Some(rows)
    } else {
        None
    };
    let dir = output_dir(out_dir)?;
    output::write_iterates(&dir.join("iterates.csv"), &res.records, checks.as_deref())?;
    let snapshot = file.with_params(&res.params)?;
    output::write_text(&dir.join("final.toml"), &snapshot.to_toml_string()?)?;
    output::write_json(
        &dir.join("summary.json"),
        &json!({
            "initial_cost": res.initial_cost(),
            "final_cost": res.final_cost(),
            "iterations": res.records.len() - 1,
            "stop": res.reason.to_string(),
            "final_grad_norm": res.records.last().map(|r| r.grad_norm),
            "unexcited_agents": res.final_gradient.unexcited_agents,
            "config": echo(&file),
        }),
    )?;
    println!(
        "J {} -> {} after {} iterations ({})",
        output::num(res.initial_cost()),
        output::num(res.final_cost()),
        res.records.len() - 1,
        res.reason
    );
    if res.final_gradient.excitation_flag() {
        eprintln!("warning: some agents never sense a target; their gradient blocks are zero");
    }
    if let Some(rows) = &checks {
        let bad: usize = rows.iter().map(|r| r.disagreements).sum();
        println!(
            "gradient check: {bad} disagreement(s) over {} iterates",
            rows.len()
        );
    }
    Ok(())
}

pub fn experiment(
    kind: ExperimentArg,
    path: &Path,
    overrides: &Overrides,
    out_dir: &Path,
) -> Result<(), CliError> {
    let file = load(path, overrides)?;
    let r = file.resolve()?;
    let report: ExperimentReport = match kind {
        ExperimentArg::Static => run_static_experiment(&r.scenario, &file.experiment_settings()?)?,
        ExperimentArg::Deadzone => run_deadzone_experiment(&r.scenario, &r.params, &r.descent, &r.options)?,
        ExperimentArg::Noise => {
            let noise = r.options.noise.ok_or_else(|| {
                CliError::Input("simulator.noise: the noise experiment needs a noise model".into())
            })?;
            run_noise_experiment(&r.scenario, &file.experiment_settings()?, &noise)?
        }
    };
    let dir = output_dir(out_dir)?;
    output::write_repetitions(&dir.join("repetitions.csv"), &report.repetitions)?;
    for best in &report.best {
        let snapshot = file.with_params(&best.params)?;
        output::write_text(
            &dir.join(format!("best_{}.toml", best.variant)),
            &snapshot.to_toml_string()?,
        )?;
    }
    output::write_json(
        &dir.join("summary.json"),
        &json!({
            "kind": report.kind.to_string(),
            "passed": report.passed(),
            "summaries": report.summaries,
            "best_costs": report.best.iter().map(|b| json!({"variant": b.variant, "cost": b.cost})).collect::<Vec<_>>(),
            "checks": report.checks,
            "config": echo(&file),
        }),
    )?;
    for c in &report.checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    Ok(())
}
