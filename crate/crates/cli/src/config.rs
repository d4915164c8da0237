use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use koopman_core::checks::report::hash_json;
use koopman_core::checks::SuiteConfig;
use koopman_core::control::ControlConfig;
use koopman_core::setup::{default_fits, default_systems, FitBlock, SystemBlock};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_OUTPUT_DIR: &str = "koopman-out";

/// Everything a run depends on. Unknown keys are rejected; omitted sections
/// take the shipped defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_systems")]
    pub systems: BTreeMap<String, SystemBlock>,
    #[serde(default = "default_fits")]
    pub fits: BTreeMap<String, FitBlock>,
    #[serde(default)]
    pub checks: SuiteConfig,
    #[serde(default)]
    pub control: ControlConfig,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: DEFAULT_SEED,
            output_dir: None,
            systems: default_systems(),
            fits: default_fits(),
            checks: SuiteConfig::default(),
            control: ControlConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Static checks run before any computation.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for (name, block) in &self.systems {
            block.spec().map_err(|e| CliError::Config(format!("system `{name}`: {e}")))?;
        }
        for (name, fit) in &self.fits {
            if let Some(g) = fit.ridge {
                if !g.is_finite() || g < 0.0 {
                    return Err(CliError::Config(format!("fit `{name}`: ridge must be >= 0")));
                }
            }
        }
        if let Some(block) = self.systems.get(&self.control.system) {
            let arity = block.spec().map_err(|e| CliError::Config(e.to_string()))?.control_arity();
            if arity > 0 {
                for s in &self.control.scenarios {
                    s.schedule
                        .validate(arity)
                        .map_err(|e| CliError::Config(format!("control scenario `{}`: {e}", s.name)))?;
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the JSON config with the output directory left out, so the
    /// hash depends only on what determines the results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        hash_json(&serde_json::to_value(&c).expect("config serializes"))
    }

    pub fn system(&self, name: &str) -> Result<&SystemBlock, CliError> {
        self.systems.get(name).ok_or_else(|| {
            CliError::Config(format!(
                "unknown system `{name}` (configured: {})",
                self.systems.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn fit(&self, name: &str) -> Result<&FitBlock, CliError> {
        self.fits.get(name).ok_or_else(|| {
            CliError::Config(format!(
                "unknown fit `{name}` (configured: {})",
                self.fits.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"schema_version": 1, "sede": 3}"#),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"schema_version": 1, "checks": {"lemma1": {"tol": 1}}}"#),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn wrong_schema_version() {
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{}"#).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
