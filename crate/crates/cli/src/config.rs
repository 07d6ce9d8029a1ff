use std::fs;
use std::path::{Path, PathBuf};

use dfsense_core::decision::DecisionConfig;
use dfsense_core::floodsim::ScenarioConfig;
use dfsense_core::pipeline::{EvalConfig, TrainConfig};
use dfsense_core::selector::ImleConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Default locations used when a command is not given explicit paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub scenarios: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            scenarios: "runs/scenarios".into(),
            checkpoint: "runs/checkpoint".into(),
            out: "runs/out".into(),
        }
    }
}

/// Everything one run needs, as a single TOML document.
///
/// The top-level `seed` replaces `scenario.seed` and `train.seed` when the
/// configuration is resolved.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub decision: DecisionConfig,
    pub imle: ImleConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config types serialise to TOML")
    }

    /// Applies the seed override, propagates the seed and validates.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.scenario.seed = self.seed;
        self.train.seed = self.seed;
        self.train.window = self.scenario.window;
        self.train.validate()?;
        self.decision.validate()?;
        self.imle.validate()?;
        if self.eval.k == 0 || self.eval.knn_k == 0 {
            return Err(CliError::usage("eval.k and eval.knn_k must be at least 1"));
        }
        Ok(self)
    }
}
