use std::fs;
use std::path::Path;

use permon::optimizer::IterateRecord;
use permon::oracle::RepetitionRecord;
use permon::SimOutput;

use crate::commands::CliError;

/// Shortest decimal that parses back to the same `f64`, with an exponent
/// outside `[1e-5, 1e16)`.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt(v: Option<usize>) -> String {
    v.map(|i| i.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_states(path: &Path, out: &SimOutput) -> Result<(), CliError> {
    let (n, m) = out
        .samples
        .first()
        .map(|s| (s.positions.len(), s.uncertainties.len()))
        .unwrap_or_default();
    let mut header = vec!["time".to_string()];
    header.extend((1..=n).map(|i| format!("s_{i}")));
    header.extend((1..=m).map(|i| format!("R_{i}")));
    header.extend((1..=n).map(|i| format!("u_{i}")));
    header.extend((1..=m).map(|i| format!("theta_{i}")));
    let mut w = writer(path)?;
    let io = |e| CliError::io(path, e);
    w.write_record(&header).map_err(io)?;
    for s in &out.samples {
        let row = std::iter::once(s.time)
            .chain(s.positions.iter().copied())
            .chain(s.uncertainties.iter().copied())
            .chain(s.controls.iter().copied())
            .chain(s.targets.iter().copied())
            .map(num);
        w.write_record(row).map_err(io)?;
    }
    finish(w, path)
}

pub fn write_events(path: &Path, out: &SimOutput) -> Result<(), CliError> {
    let mut w = writer(path)?;
    let io = |e| CliError::io(path, e);
    w.write_record(["time", "kind", "agent_index", "target_index", "phase_index"])
        .map_err(io)?;
    for e in &out.events {
        w.write_record([
            num(e.time),
            e.kind.name().to_string(),
            opt(e.kind.agent_index()),
            opt(e.kind.target_index()),
            opt(e.kind.phase_index()),
        ])
        .map_err(io)?;
    }
    finish(w, path)
}

/// Finite-difference comparison for one iterate.
pub struct GradCheckRow {
    pub compared: usize,
    pub disagreements: usize,
    pub max_abs_diff: f64,
}

pub fn write_iterates(
    path: &Path,
    records: &[IterateRecord],
    checks: Option<&[GradCheckRow]>,
) -> Result<(), CliError> {
    let mut w = writer(path)?;
    let io = |e| CliError::io(path, e);
    let mut header = vec!["iteration", "J", "grad_norm", "step", "backtracks"];
    if checks.is_some() {
        header.extend(["fd_compared", "fd_disagreements", "fd_max_abs_diff"]);
    }
    w.write_record(&header).map_err(io)?;
    for (k, r) in records.iter().enumerate() {
        let mut row = vec![
            r.iteration.to_string(),
            num(r.cost),
            num(r.grad_norm),
            num(r.step),
            r.backtracks.to_string(),
        ];
        if let Some(c) = checks.map(|c| &c[k]) {
            row.extend([
                c.compared.to_string(),
                c.disagreements.to_string(),
                num(c.max_abs_diff),
            ]);
        }
        w.write_record(&row).map_err(io)?;
    }
    finish(w, path)
}

pub fn write_repetitions(path: &Path, records: &[RepetitionRecord]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    let io = |e| CliError::io(path, e);
    w.write_record([
        "repetition",
        "seed",
        "variant",
        "initial_cost",
        "optimized_cost",
        "iterations",
        "stop",
    ])
    .map_err(io)?;
    for r in records {
        w.write_record([
            r.repetition.to_string(),
            r.seed.to_string(),
            r.variant.to_string(),
            num(r.initial_cost),
            num(r.optimized_cost),
            r.iterations.to_string(),
            r.stop.to_string(),
        ])
        .map_err(io)?;
    }
    finish(w, path)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    text.push('\n');
    write_text(path, &text)
}
