//! TOML scenario files: scenario, controller, simulator and optimizer
//! settings in one document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controllers::{
    validate_params, ControllerParams, OptimalAgentParams, PracticalAgentParams, PracticalGains, Variant,
    VisitPlan,
};
use crate::error::{Error, Result};
use crate::model::{AgentSpec, Scenario, TargetSpec};
use crate::optimizer::{random_initialization, DescentConfig};
use crate::oracle::ExperimentSettings;
use crate::simulator::{NoiseModel, SimOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    Random,
    #[default]
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub variant: Variant,
    #[serde(default)]
    pub initial: InitialKind,
    /// Phases per agent for random initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<PracticalGains>,
    /// Per-agent parameters when `initial = "explicit"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_events: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseModel>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Per agent, `[target, duration]` pairs shared by both variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<VisitPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub horizon: f64,
    #[serde(default)]
    pub separation_margin: f64,
    pub agents: Vec<AgentSpec>,
    pub targets: Vec<TargetSpec>,
    pub controller: ControllerSection,
    #[serde(default)]
    pub simulator: SimulatorSection,
    #[serde(default)]
    pub optimizer: DescentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentSection>,
}

/// Everything needed to run: validated scenario, parameters and options.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub scenario: Scenario,
    pub params: ControllerParams,
    pub options: SimOptions,
    pub descent: DescentConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Splits `"agents[0].sensing_range must be positive"` into path and message.
fn split_path(msg: &str) -> (String, String) {
    let msg = msg.trim();
    match msg.split_once(' ') {
        Some((head, rest)) if rest.starts_with("must") || head.ends_with(':') => {
            (head.trim_end_matches(':').to_string(), msg.to_string())
        }
        _ => ("scenario".into(), msg.to_string()),
    }
}

impl ScenarioFile {
    pub fn from_toml_str(text: &str) -> Result<ScenarioFile> {
        toml::from_str(text).map_err(|e| {
            let path = match e.span() {
                Some(span) => format!("line {}", line_of(text, span.start)),
                None => "document".into(),
            };
            Error::Config {
                path,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ScenarioFile> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            path: "document".into(),
            message: e.to_string(),
        })
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let sc = Scenario {
            agents: self.agents.clone(),
            targets: self.targets.clone(),
            horizon: self.horizon,
            separation_margin: self.separation_margin,
        };
        sc.validate().map_err(|e| match e {
            Error::InvalidScenario(msg) => {
                let (path, message) = split_path(&msg);
                Error::Config { path, message }
            }
            other => other,
        })?;
        Ok(sc)
    }

    pub fn gains(&self) -> PracticalGains {
        self.controller.gains.unwrap_or_default()
    }

    /// Initial controller parameters, drawn or read from the file.
    pub fn params(&self, scenario: &Scenario) -> Result<ControllerParams> {
        let c = &self.controller;
        let params = match c.initial {
            InitialKind::Random => {
                let phases = c.phases.ok_or_else(|| Error::Config {
                    path: "controller.phases".into(),
                    message: "required when initial = \"random\"".into(),
                })?;
                if phases == 0 {
                    return Err(Error::Config {
                        path: "controller.phases".into(),
                        message: "must be positive".into(),
                    });
                }
                random_initialization(scenario, c.variant, phases, self.gains(), c.seed.unwrap_or(0))
            }
            InitialKind::Explicit => {
                if c.agents.is_empty() {
                    return Err(Error::Config {
                        path: "controller.agents".into(),
                        message: "explicit parameters are missing".into(),
                    });
                }
                let convert_err = |j: usize, e: toml::de::Error| Error::Config {
                    path: format!("controller.agents[{j}]"),
                    message: e.message().to_string(),
                };
                match c.variant {
                    Variant::Optimal => ControllerParams::Optimal(
                        c.agents
                            .iter()
                            .enumerate()
                            .map(|(j, t)| {
                                t.clone()
                                    .try_into::<OptimalAgentParams>()
                                    .map_err(|e| convert_err(j, e))
                            })
                            .collect::<Result<_>>()?,
                    ),
                    Variant::Practical => ControllerParams::Practical(
                        c.agents
                            .iter()
                            .enumerate()
                            .map(|(j, t)| {
                                let mut t = t.clone();
                                let g = self.gains();
                                for (k, v) in [
                                    ("gain_p", g.gain_p),
                                    ("gain_i", g.gain_i),
                                    ("switch_tolerance", g.switch_tolerance),
                                ] {
                                    t.entry(k).or_insert(toml::Value::Float(v));
                                }
                                t.try_into::<PracticalAgentParams>()
                                    .map_err(|e| convert_err(j, e))
                            })
                            .collect::<Result<_>>()?,
                    ),
                }
            }
        };
        if let Some(v) = validate_params(&params, scenario).into_iter().next() {
            return Err(Error::Config {
                path: v.path,
                message: v.message,
            });
        }
        Ok(params)
    }

    pub fn sim_options(&self) -> Result<SimOptions> {
        let mut o = SimOptions::default();
        if let Some(step) = self.simulator.step {
            if !(step > 0.0) {
                return Err(Error::Config {
                    path: "simulator.step".into(),
                    message: "must be positive".into(),
                });
            }
            o.step = Some(step);
        }
        if let Some(max) = self.simulator.max_events {
            o.max_events = max;
        }
        if let Some(noise) = self.simulator.noise {
            noise.check().map_err(|e| Error::Config {
                path: "simulator.noise".into(),
                message: e.to_string(),
            })?;
            o.noise = Some(noise);
        }
        Ok(o)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let scenario = self.scenario()?;
        let params = self.params(&scenario)?;
        let options = self.sim_options()?;
        self.optimizer.check().map_err(|e| Error::Config {
            path: "optimizer".into(),
            message: e.to_string(),
        })?;
        Ok(Resolved {
            scenario,
            params,
            options,
            descent: self.optimizer.clone(),
        })
    }

    /// Copy of this file with explicit initial parameters `params`.
    pub fn with_params(&self, params: &ControllerParams) -> Result<ScenarioFile> {
        let to_tables = |v: toml::Value| -> Result<Vec<toml::Table>> {
            match v {
                toml::Value::Array(items) => items
                    .into_iter()
                    .map(|x| match x {
                        toml::Value::Table(t) => Ok(t),
                        _ => Err(Error::Config {
                            path: "controller.agents".into(),
                            message: "agent parameters must serialize to tables".into(),
                        }),
                    })
                    .collect(),
                _ => unreachable!("agent lists serialize to arrays"),
            }
        };
        let ser = |e: toml::ser::Error| Error::Config {
            path: "controller.agents".into(),
            message: e.to_string(),
        };
        let agents = match params {
            ControllerParams::Optimal(a) => to_tables(toml::Value::try_from(a).map_err(ser)?)?,
            ControllerParams::Practical(a) => to_tables(toml::Value::try_from(a).map_err(ser)?)?,
        };
        let mut out = self.clone();
        out.controller.variant = params.variant();
        out.controller.initial = InitialKind::Explicit;
        out.controller.agents = agents;
        Ok(out)
    }

    /// Randomized-experiment settings with file values as defaults.
    pub fn experiment_settings(&self) -> Result<ExperimentSettings> {
        let exp = self.experiment.clone().unwrap_or_default();
        let defaults = ExperimentSettings::default();
        if let Some(plan) = &exp.plan {
            let m = self.targets.len();
            if plan.agents.len() != self.agents.len() {
                return Err(Error::Config {
                    path: "experiment.plan".into(),
                    message: format!(
                        "{} agent schedules for {} agents",
                        plan.agents.len(),
                        self.agents.len()
                    ),
                });
            }
            for (j, visits) in plan.agents.iter().enumerate() {
                if visits.is_empty() {
                    return Err(Error::Config {
                        path: format!("experiment.plan[{j}]"),
                        message: "at least one visit is required".into(),
                    });
                }
                for (l, &(i, d)) in visits.iter().enumerate() {
                    if i >= m || !(d >= 0.0) {
                        return Err(Error::Config {
                            path: format!("experiment.plan[{j}][{l}]"),
                            message: format!("needs a target below {m} and a nonnegative duration"),
                        });
                    }
                }
            }
        }
        Ok(ExperimentSettings {
            phases: self.controller.phases.unwrap_or(defaults.phases),
            gains: self.gains(),
            repetitions: exp.repetitions.unwrap_or(defaults.repetitions),
            seed: exp.seed.or(self.controller.seed).unwrap_or(defaults.seed),
            descent: self.optimizer.clone(),
            options: self.sim_options()?,
            plan: exp.plan,
        })
    }
}
