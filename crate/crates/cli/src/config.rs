//! The TOML configuration shared by every subcommand.
//!
//! Values come from the built-in defaults, then `--config FILE`, then flags.
//! `--dump-config` prints the merged result, which parses back to itself.

use std::path::{Path, PathBuf};

use fxsr::schedules::ScheduleVariant;
use fxsr::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Missing sections take their defaults; a present `train` section must be complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub train: TrainConfig,
    pub serve: ServeConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainConfig::full(ScheduleVariant::Pd, 4),
            serve: ServeConfig::default(),
        }
    }
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            models: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_byte_identically() {
        let text = Config::default().to_toml();
        let back = Config::from_toml(&text).unwrap();
        assert_eq!(back, Config::default());
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn toy_preset_with_init_round_trips() {
        let mut c = Config::default();
        c.train = TrainConfig::toy(ScheduleVariant::Ds, 8);
        c.train.init_checkpoint = Some("runs/pre/latest.safetensors".into());
        c.train.degradation.jpeg_quality = Some(75);
        c.serve.models = Some("models".into());
        c.set_seed(17);
        let text = c.to_toml();
        assert_eq!(Config::from_toml(&text).unwrap().to_toml(), text);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c = Config::from_toml("seed = 4\n[serve]\nport = 9000\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.serve.port, 9000);
        assert_eq!(c.serve.host, "127.0.0.1");
        assert_eq!(c.train, Config::default().train);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{}\nbogus = 1\n", Config::default().to_toml());
        let err = Config::from_toml(&text).unwrap_err();
        assert_eq!(err.code, crate::EXIT_CONFIG);
        assert!(err.message.contains("bogus"), "{}", err.message);
    }
}
