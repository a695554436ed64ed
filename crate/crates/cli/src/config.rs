//! TOML configuration: every table is optional and falls back to the
//! built-in defaults printed by `--print-config`.

use std::path::Path;

use fatigue_core::harness::{FairnessConfig, NullConfig, RunConfig};
use fatigue_core::synthgen::CohortSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub cohort: CohortSpec,
    pub run: RunConfig,
    pub null: NullConfig,
    pub fairness: FairnessConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises to TOML")
    }

    /// Applies `--seed` to the cohort and both evaluation plans.
    pub fn with_seed(mut self, seed: Option<u64>) -> Config {
        if let Some(s) = seed {
            self.cohort.seed = s;
            self.run.plan_seed = s;
            self.null.plan_seed = s;
        }
        self
    }
}

/// Reads a cohort spec file (TOML or JSON by extension).
pub fn load_spec(path: &Path) -> Result<CohortSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read spec file {}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Data(format!("invalid spec file {}: {e}", path.display())))
}
