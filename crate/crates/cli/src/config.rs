//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::Path;

use mvgr_core::embedlib::Level;
use mvgr_core::eval::ExperimentConfig;
use mvgr_core::uplift::{UpliftGenConfig, UpliftTrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub level: Level,
    /// Clusters for `embed cluster` and `embed project`.
    pub k: usize,
    /// Neighbours returned by `embed query`.
    pub top_k: usize,
    pub max_iters: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            level: Level::County,
            k: 4,
            top_k: 5,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpliftRunConfig {
    pub generator: UpliftGenConfig,
    pub train: UpliftTrainConfig,
    pub test_fraction: f64,
    /// Append library vectors to the sample features.
    pub augment: bool,
    pub level: Level,
    pub permutations: usize,
}

impl Default for UpliftRunConfig {
    fn default() -> Self {
        Self {
            generator: UpliftGenConfig::default(),
            train: UpliftTrainConfig::default(),
            test_fraction: 0.3,
            augment: true,
            level: Level::County,
            permutations: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Required here or on the command line. Replaces every nested seed.
    pub seed: Option<u64>,
    pub experiment: ExperimentConfig,
    pub embed: EmbedConfig,
    pub uplift: UpliftRunConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.to_string();
            // The path already ends in the unknown field itself.
            let key = match msg.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
                Some(field) if path == "." || path.is_empty() => field.to_string(),
                _ => path,
            };
            CliError::Usage {
                message: format!("config key `{key}`: {msg}"),
                key: Some(key),
            }
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies the seed override, pushes the seed into nested configs and
    /// validates everything.
    pub fn resolve(mut self, seed: Option<u64>) -> CliResult<Self> {
        let seed = seed.or(self.seed).ok_or_else(|| CliError::Usage {
            message: "no seed: set `seed` in the config or pass --seed".into(),
            key: Some("seed".into()),
        })?;
        self.seed = Some(seed);
        self.experiment.seed = seed;
        self.experiment = self.experiment.seeded();
        self.uplift.generator.seed = seed;
        self.uplift.train.seed = seed;
        self.experiment.validate()?;
        self.uplift.generator.validate()?;
        self.uplift.train.validate()?;
        if !(self.uplift.test_fraction > 0.0 && self.uplift.test_fraction < 1.0) {
            return Err(CliError::usage("invalid config: uplift.test_fraction must lie in (0, 1)"));
        }
        if self.embed.k == 0 || self.embed.top_k == 0 || self.uplift.permutations == 0 {
            return Err(CliError::usage("invalid config: embed.k, embed.top_k and uplift.permutations must be positive"));
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved configs carry a seed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_nested_key_is_named() {
        match RunConfig::parse(r#"{"seed": 1, "experiment": {"city": {"hex_radus": 3}}}"#) {
            Err(CliError::Usage { key, .. }) => assert_eq!(key.as_deref(), Some("experiment.city.hex_radus")),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse(r#"{"sed": 1}"#) {
            Err(CliError::Usage { key, .. }) => assert_eq!(key.as_deref(), Some("sed")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seed_is_mandatory_and_propagates() {
        assert!(RunConfig::default().resolve(None).is_err());
        let c = RunConfig::default().resolve(Some(9)).unwrap();
        assert_eq!(c.experiment.city.seed, 9);
        assert_eq!(c.uplift.train.seed, 9);
        let c = RunConfig::parse(r#"{"seed": 3}"#).unwrap().resolve(Some(4)).unwrap();
        assert_eq!(c.seed(), 4);
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }
}
