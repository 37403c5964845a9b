use std::path::Path;

use serde::{Deserialize, Serialize};

use deimlab::burgers::BurgersConfig;
use deimlab::node::{CnnConfig, NodeTrainConfig};
use deimlab::sampler::TrainConfig;
use deimlab::vortex::{InitTag, VortexConfig};
use deimlab::windowed::WindowSpec;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RomSettings {
    /// POD modes of the state.
    pub modes: usize,
    /// DEIM points (and nonlinear-term modes).
    pub points: usize,
}

impl Default for RomSettings {
    fn default() -> Self {
        RomSettings { modes: 12, points: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveSettings {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for AdaptiveSettings {
    fn default() -> Self {
        AdaptiveSettings {
            hidden: vec![256, 256],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NodeSettings {
    /// Initial configuration whose trajectory is used for training.
    pub train_init: InitTag,
    pub cnn: CnnConfig,
    pub train: NodeTrainConfig,
}

impl Default for NodeSettings {
    fn default() -> Self {
        NodeSettings {
            train_init: InitTag::Horizontal,
            cnn: CnnConfig::default(),
            train: NodeTrainConfig::default(),
        }
    }
}

/// Every tunable of every pipeline stage. Only `seed` is mandatory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub burgers: BurgersConfig,
    #[serde(default)]
    pub rom: RomSettings,
    #[serde(default)]
    pub adaptive: AdaptiveSettings,
    #[serde(default)]
    pub vortex: VortexConfig,
    #[serde(default)]
    pub node: NodeSettings,
    #[serde(default)]
    pub window: WindowSpec,
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            burgers: BurgersConfig::default(),
            rom: RomSettings::default(),
            adaptive: AdaptiveSettings::default(),
            vortex: VortexConfig::default(),
            node: NodeSettings::default(),
            window: WindowSpec::default(),
        }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        let to_cfg = |e: deimlab::Error| CliError::Config(e.to_string());
        self.burgers.validate().map_err(to_cfg)?;
        self.vortex.validate().map_err(to_cfg)?;
        self.adaptive.train.validate().map_err(to_cfg)?;
        self.window.validate().map_err(to_cfg)?;
        if self.rom.modes == 0 || self.rom.points == 0 || self.rom.points > self.burgers.n {
            return Err(CliError::Config(format!("invalid ROM sizes {:?}", self.rom)));
        }
        if self.adaptive.hidden.iter().any(|&h| h == 0) {
            return Err(CliError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration as TOML.
    pub fn echo(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Other(e.to_string()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is always representable as JSON")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(ExperimentConfig::parse("[rom]\nmodes = 12\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("seed = 1\n[rom]\nmodse = 12\n").is_err());
        assert!(ExperimentConfig::parse("seed = 1\ntypo = 3\n").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig::parse("seed = 5\n[vortex]\nn = 64\n").unwrap();
        assert_eq!(cfg.vortex.n, 64);
        assert_eq!(cfg.burgers.n_steps, 300);
        assert_eq!(ExperimentConfig::parse(&cfg.echo().unwrap()).unwrap(), cfg);
    }
}
