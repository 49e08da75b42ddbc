//! JSON configuration documents.
//!
//! A document is either an explicit game
//!
//! ```json
//! { "c": {"scaled_identity": 0.038}, "k": [[0.08]], "eta": 0.1,
//!   "coupling_lower": [0.0], "coupling_upper": [0.04],
//!   "populations": [{"agents": [{"quad": 1.0, "lin": [0.0], "lower": [0.0],
//!                                "upper": [1.0], "budget": 0.5}]}],
//!   "schedule": {"kind": "harmonic", "offset": 1.0} }
//! ```
//!
//! or an EV scenario with overrides on top of the defaults
//! (`{"ev_scenario": {"agents_per_population": 20}, "eta": 1.0}`). Either
//! form may carry a `run` section with iteration settings and a graph.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::RunSettings;
use crate::error::{Error, Result};
use crate::ev::{self, EvScenarioParams};
use crate::game::{AgentProfile, GameConfig, Matrix, PopulationSpec, StepSchedule, Vector};
use crate::network::{GraphGenerator, GraphSequence};
use crate::serde_util;

/// Dense row-major matrix or `{"scaled_identity": a}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    ScaledIdentity { scaled_identity: f64 },
    Dense(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, n: usize) -> Result<Matrix> {
        match self {
            MatrixSpec::ScaledIdentity { scaled_identity } => Ok(Matrix::identity(n, n) * *scaled_identity),
            MatrixSpec::Dense(rows) => {
                let m = serde_util::from_rows(rows).map_err(Error::InvalidArgument)?;
                if m.nrows() != n || m.ncols() != n {
                    let actual = if m.nrows() != n { m.nrows() } else { m.ncols() };
                    return Err(Error::dim("matrix", n, actual));
                }
                Ok(m)
            }
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        MatrixSpec::Dense(serde_util::rows(m))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationDoc {
    pub agents: Vec<AgentProfile>,
    /// Uniform `1 / N_l` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
}

/// Explicit game, field for field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameDoc {
    pub c: MatrixSpec,
    pub k: MatrixSpec,
    #[serde(default = "default_eta")]
    pub eta: f64,
    pub coupling_lower: Vec<f64>,
    pub coupling_upper: Vec<f64>,
    pub populations: Vec<PopulationDoc>,
    #[serde(default)]
    pub schedule: StepSchedule,
}

fn default_eta() -> f64 {
    crate::game::DEFAULT_ETA
}

/// EV instance with optional overrides of `K`, `eta` and the schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDoc {
    pub ev_scenario: EvScenarioParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<StepSchedule>,
}

/// Iteration settings and graph stored next to a game.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settings: Option<RunSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphGenerator>,
    /// Spread of the seeded perturbation around the default start.
    #[serde(default)]
    pub init_perturbation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConfigBody {
    Scenario(ScenarioDoc),
    Game(GameDoc),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigDocument {
    #[serde(flatten)]
    pub body: ConfigBody,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSection>,
}

impl Default for EvScenarioParams {
    fn default() -> Self {
        ev::build_default()
    }
}

impl GameDoc {
    pub fn from_config(config: &GameConfig) -> Self {
        GameDoc {
            c: MatrixSpec::from_matrix(&config.c),
            k: MatrixSpec::from_matrix(&config.k),
            eta: config.eta,
            coupling_lower: config.coupling_lower.as_slice().to_vec(),
            coupling_upper: config.coupling_upper.as_slice().to_vec(),
            populations: config
                .populations
                .iter()
                .map(|p| PopulationDoc {
                    agents: p.agents.clone(),
                    delta: Some(p.delta.clone()),
                })
                .collect(),
            schedule: config.schedule.clone(),
        }
    }

    pub fn to_config(&self) -> Result<GameConfig> {
        let n = self.coupling_lower.len();
        let populations = self
            .populations
            .iter()
            .map(|p| match &p.delta {
                Some(delta) => PopulationSpec {
                    agents: p.agents.clone(),
                    delta: delta.clone(),
                },
                None => PopulationSpec::uniform(p.agents.clone()),
            })
            .collect();
        let config = GameConfig {
            c: self.c.to_matrix(n)?,
            k: self.k.to_matrix(n)?,
            eta: self.eta,
            coupling_lower: Vector::from_vec(self.coupling_lower.clone()),
            coupling_upper: Vector::from_vec(self.coupling_upper.clone()),
            populations,
            schedule: self.schedule.clone(),
        };
        config.check_structure()?;
        Ok(config)
    }
}

impl ScenarioDoc {
    pub fn to_config(&self) -> Result<GameConfig> {
        let p = &self.ev_scenario;
        let k = match &self.k {
            Some(spec) => spec.to_matrix(p.n)?,
            None => ev::default_k(p.n),
        };
        let eta = self.eta.unwrap_or(ev::DESK_ETA);
        let schedule = self.schedule.clone().unwrap_or_else(ev::desk_schedule);
        ev::to_canonical(p, k, eta, schedule)
    }
}

impl ConfigDocument {
    pub fn from_json_str(text: &str) -> Result<Self> {
        // Dispatch on the key first so field errors are reported against the
        // right document shape.
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        let run = value.as_object_mut().and_then(|o| o.remove("run"));
        let body = if value.get("ev_scenario").is_some() {
            ConfigBody::Scenario(serde_json::from_value(value)?)
        } else {
            ConfigBody::Game(serde_json::from_value(value)?)
        };
        let run = match run {
            Some(mut r) => {
                // Partial settings fill in from the defaults for this shape.
                if let Some(given) = r.get_mut("settings").and_then(|s| s.as_object_mut()) {
                    let base = match &body {
                        ConfigBody::Scenario(_) => ev::desk_run_settings(),
                        ConfigBody::Game(_) => RunSettings::default(),
                    };
                    let serde_json::Value::Object(mut merged) = serde_json::to_value(base)? else {
                        unreachable!("settings serialize to an object")
                    };
                    merged.extend(std::mem::take(given));
                    *given = merged;
                }
                Some(serde_json::from_value(r)?)
            }
            None => None,
        };
        Ok(ConfigDocument { body, run })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn game(config: &GameConfig) -> Self {
        ConfigDocument {
            body: ConfigBody::Game(GameDoc::from_config(config)),
            run: None,
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_config(&self) -> Result<GameConfig> {
        match &self.body {
            ConfigBody::Scenario(s) => s.to_config(),
            ConfigBody::Game(g) => g.to_config(),
        }
    }

    pub fn scenario(&self) -> Option<&EvScenarioParams> {
        match &self.body {
            ConfigBody::Scenario(s) => Some(&s.ev_scenario),
            ConfigBody::Game(_) => None,
        }
    }

    /// Settings from the `run` section, else the EV desk settings for
    /// scenario documents, else the library defaults.
    pub fn settings(&self) -> RunSettings {
        match (self.run.as_ref().and_then(|r| r.settings.clone()), &self.body) {
            (Some(s), _) => s,
            (None, ConfigBody::Scenario(_)) => ev::desk_run_settings(),
            (None, ConfigBody::Game(_)) => RunSettings::default(),
        }
    }

    /// Graph from the `run` section, else a Metropolis path over the
    /// populations.
    pub fn graph(&self, num_populations: usize) -> Result<GraphSequence> {
        match self.run.as_ref().and_then(|r| r.graph.clone()) {
            Some(g) => GraphSequence::new(num_populations, g),
            None => Ok(GraphSequence::path(num_populations)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
        "c": {"scaled_identity": 0.5},
        "k": [[1.0, 0.0], [0.0, 2.0]],
        "eta": 0.1,
        "coupling_lower": [0.0, 0.0],
        "coupling_upper": [1.0, 1.0],
        "populations": [{"agents": [
            {"quad": 1.0, "lin": [0.1, 0.2], "lower": [0.0, 0.0], "upper": [1.0, 1.0], "budget": 1.0},
            {"quad": 2.0, "lin": [0.0, 0.0], "lower": [0.0, 0.0], "upper": [1.0, 1.0], "budget": 0.5}
        ]}]
    }"#;

    #[test]
    fn explicit_game_with_shorthand() {
        let doc = ConfigDocument::from_json_str(SMALL).unwrap();
        let cfg = doc.to_config().unwrap();
        assert_eq!(cfg.c, Matrix::identity(2, 2) * 0.5);
        assert_eq!(cfg.k[(1, 1)], 2.0);
        assert_eq!(cfg.populations[0].delta, vec![0.5, 0.5]);
        assert_eq!(cfg.schedule, StepSchedule::Harmonic { offset: 1.0 });
        let no_eta = SMALL.replace(r#""eta": 0.1,"#, "");
        assert_ne!(no_eta, SMALL);
        assert_eq!(
            ConfigDocument::from_json_str(&no_eta).unwrap().to_config().unwrap().eta,
            0.1
        );
        assert_eq!(doc.settings(), RunSettings::default());
    }

    #[test]
    fn game_round_trip() {
        let cfg = ConfigDocument::from_json_str(SMALL).unwrap().to_config().unwrap();
        let text = ConfigDocument::game(&cfg).to_json_pretty().unwrap();
        let back = ConfigDocument::from_json_str(&text).unwrap().to_config().unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn scenario_overrides() {
        let doc = ConfigDocument::from_json_str(
            r#"{"ev_scenario": {"agents_per_population": 3, "num_populations": 2}, "eta": 0.5}"#,
        )
        .unwrap();
        let cfg = doc.to_config().unwrap();
        assert_eq!(cfg.total_agents(), 6);
        assert_eq!(cfg.eta, 0.5);
        assert_eq!(cfg.k, ev::default_k(14));
        assert_eq!(doc.settings(), ev::desk_run_settings());
    }

    #[test]
    fn partial_settings_fill_from_defaults() {
        let doc = ConfigDocument::from_json_str(r#"{"ev_scenario": {}, "run": {"settings": {"max_iterations": 7}}}"#)
            .unwrap();
        let expected = RunSettings {
            max_iterations: 7,
            ..ev::desk_run_settings()
        };
        assert_eq!(doc.settings(), expected);
        let bad = r#"{"ev_scenario": {}, "run": {"settings": {"max_iterations": "x"}}}"#;
        assert!(ConfigDocument::from_json_str(bad).is_err());
    }

    #[test]
    fn wrong_matrix_size_is_rejected() {
        let text = SMALL.replace("[[1.0, 0.0], [0.0, 2.0]]", "[[1.0]]");
        let doc = ConfigDocument::from_json_str(&text).unwrap();
        assert!(matches!(doc.to_config(), Err(Error::Dimension { .. })));
    }

    #[test]
    fn run_section() {
        let text = SMALL.trim_end().trim_end_matches('}').to_string()
            + r#", "run": {"graph": {"kind": "ring_rotation", "period": 1}, "init_perturbation": 0.01}}"#;
        let doc = ConfigDocument::from_json_str(&text).unwrap();
        assert_eq!(doc.run.as_ref().unwrap().init_perturbation, 0.01);
        assert!(doc.graph(1).is_ok());
    }
}
