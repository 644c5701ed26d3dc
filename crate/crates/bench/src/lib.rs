//! Shared fixtures for the criterion benchmarks in `benches/`.

use std::path::Path;

use permon::config::Resolved;
use permon::ScenarioFile;

/// Loads and resolves one of the scenarios under `scenarios/`.
pub fn bundled(name: &str) -> Resolved {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.toml"));
    ScenarioFile::load(&path)
        .and_then(|f| f.resolve())
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
