//! Experiment configuration: one TOML file with a section per model.

use std::path::Path;

use cfdialog_core::bicogan::BicoganConfig;
use cfdialog_core::bicogan::NoiseMode;
use cfdialog_core::counterfactual::{CfSpec, Strategy, TraitTracking};
use cfdialog_core::d3qn::PolicyConfig;
use cfdialog_core::dppr::DpprConfig;
use cfdialog_core::reward::RewardConfig;
use cfdialog_core::rng::derive_seed;
use cfdialog_core::synthworld::WorldConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic dialogues to generate.
    pub dialogues: usize,
    /// Share of dialogues used to fit trait regressors; the rest scores them.
    pub train_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dialogues: 1000, train_ratio: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualConfig {
    pub strategy: Strategy,
    pub noise: NoiseMode,
    pub traits: TraitTracking,
    pub with_replacement: bool,
    /// Databases handed to the policy after balance selection.
    pub databases: usize,
    /// Databases generated before balance selection.
    pub pool: usize,
    /// Extra databases per strategy for the alignment comparison.
    pub strategy_probe: usize,
    pub balance_reference: BalanceReference,
}

/// Reference total that splits databases into above and below.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceReference {
    /// Reward-model total over the factual dialogues.
    #[default]
    Predicted,
    /// Sum of recorded outcomes of the factual dialogues.
    Recorded,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        let spec = CfSpec::default();
        CounterfactualConfig {
            strategy: spec.strategy,
            noise: spec.noise,
            traits: spec.traits,
            with_replacement: spec.with_replacement,
            databases: 100,
            pool: 400,
            strategy_probe: 3,
            balance_reference: BalanceReference::Predicted,
        }
    }
}

impl CounterfactualConfig {
    pub fn spec(&self) -> CfSpec {
        CfSpec {
            strategy: self.strategy,
            noise: self.noise.clone(),
            traits: self.traits,
            with_replacement: self.with_replacement,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Window sizes of the regression table.
    pub windows: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { windows: vec![1, 2, 4, 8] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every model seed is derived from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub dppr: DpprConfig,
    pub bicogan: BicoganConfig,
    pub counterfactual: CounterfactualConfig,
    pub reward: RewardConfig,
    pub policy: PolicyConfig,
    pub metrics: MetricsConfig,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Sets `path` (dot separated) in `table` to `value`, read as a TOML literal
/// when possible and as a string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(invalid(format!("override `{assignment}` has an empty key")));
    }
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.trim().into())),
        Err(_) => toml::Value::String(raw.trim().into()),
    };
    let mut node = table;
    for key in &keys[..keys.len() - 1] {
        let entry = node.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("override `{path}`: `{key}` is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| invalid(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| invalid(format!("config field `{}`: {}", e.path(), e.inner())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.world.validate().map_err(|e| invalid(e.to_string()))?;
        self.policy.validate().map_err(|e| invalid(e.to_string()))?;
        if self.data.dialogues < 4 {
            return Err(invalid(format!("data.dialogues must be at least 4, got {}", self.data.dialogues)));
        }
        if !(self.data.train_ratio > 0.0 && self.data.train_ratio < 1.0) {
            return Err(invalid(format!("data.train_ratio must lie in (0, 1), got {}", self.data.train_ratio)));
        }
        let cf = &self.counterfactual;
        if cf.databases == 0 {
            return Err(invalid("counterfactual.databases must be positive"));
        }
        if cf.pool < cf.databases {
            return Err(invalid(format!(
                "counterfactual.pool ({}) must be at least counterfactual.databases ({})",
                cf.pool, cf.databases
            )));
        }
        if self.metrics.windows.contains(&0) {
            return Err(invalid("metrics.windows entries must be positive"));
        }
        let turns = self.world.actions_per_episode();
        if self.dppr.window == 0 || self.dppr.window > turns {
            return Err(invalid(format!("dppr.window must lie in 1..={turns}, got {}", self.dppr.window)));
        }
        if cf.strategy.excluded_prefix() >= turns {
            return Err(invalid(format!(
                "counterfactual.strategy {} leaves no actions at world.T = {}",
                cf.strategy.number(),
                self.world.horizon
            )));
        }
        for (name, q) in [("bicogan.tolerance_quantile", self.bicogan.tolerance_quantile)] {
            if !(0.0..=1.0).contains(&q) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {q}")));
            }
        }
        Ok(())
    }

    /// The config with every model seed derived from the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.world.seed = derive_seed(s, "world");
        c.dppr.seed = derive_seed(s, "dppr");
        c.bicogan.seed = derive_seed(s, "bicogan");
        c.reward.seed = derive_seed(s, "reward");
        c.policy.seed = derive_seed(s, "policy");
        c
    }

    /// Seed for stage-level sampling that has no model section.
    pub fn stage_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    pub fn strategy(&self) -> Strategy {
        self.counterfactual.strategy
    }

    /// SHA-256 of the canonical JSON of the resolved config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.resolved()).unwrap_or_default();
        hex::encode(Sha256::digest(json))
    }
}
