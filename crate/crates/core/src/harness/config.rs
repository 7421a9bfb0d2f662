//! TOML configuration of the benchmark harness. Every section is optional
//! and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::N_WAYPOINTS;
use super::scene::{RigConfig, SceneConfig};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::geometry::RigDeltaRange;
use crate::losses::LossWeights;
use crate::membank::BankConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangesConfig {
    /// `default`, `superset` or `subset`.
    pub preset: String,
    /// In-range deltas sampled per scene for the augmentation summary.
    pub augment_samples: usize,
    pub seed: u64,
}

impl Default for RangesConfig {
    fn default() -> Self {
        Self {
            preset: "default".into(),
            augment_samples: 3,
            seed: 99,
        }
    }
}

impl RangesConfig {
    pub fn range(&self) -> Result<RigDeltaRange> {
        RigDeltaRange::preset(&self.preset)
            .ok_or_else(|| Error::Config(format!("ranges.preset: unknown range preset '{}'", self.preset)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossesConfig {
    /// Perceptual weight inside reconstruction losses.
    pub lambda_p: f64,
    pub weights: LossWeights,
}

impl Default for LossesConfig {
    fn default() -> Self {
        Self {
            lambda_p: 0.2,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// One scene per seed.
    pub seeds: Vec<u64>,
    /// Index of the evaluated timestep.
    pub current_step: usize,
    /// Past timesteps fed to the memory bank.
    pub history: usize,
    pub parallel: bool,
    pub write_pngs: bool,
    /// Ego footprint for the collision metric, meters.
    pub ego_length: f64,
    pub ego_width: f64,
    /// Seed of the frozen attention and keypoint heads.
    pub head_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1],
            current_step: 2,
            history: 2,
            parallel: true,
            write_pngs: false,
            ego_length: 4.0,
            ego_width: 1.8,
            head_seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub scene: SceneConfig,
    pub rig: RigConfig,
    pub ranges: RangesConfig,
    pub losses: LossesConfig,
    pub bank: BankConfig,
    pub distill: DistillConfig,
    pub benchmark: BenchmarkConfig,
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.ranges.range()?;
        self.losses.weights.validate()?;
        let b = &self.benchmark;
        if b.seeds.is_empty() {
            return Err(Error::Config("benchmark.seeds: no scenes to evaluate".into()));
        }
        if b.history > b.current_step {
            return Err(Error::Config(format!(
                "benchmark.history ({}) exceeds benchmark.current_step ({})",
                b.history, b.current_step
            )));
        }
        let needed = b.current_step + N_WAYPOINTS + 1;
        if self.scene.n_timesteps < needed {
            return Err(Error::Config(format!(
                "scene.n_timesteps must be at least {needed} to cover the planning horizon"
            )));
        }
        if self.bank.capacity == 0 || self.bank.heads == 0 {
            return Err(Error::Config("bank.capacity and bank.heads must be positive".into()));
        }
        if self.distill.n_samples == 0 {
            return Err(Error::Config("distill.n_samples must be positive".into()));
        }
        if !(self.losses.lambda_p >= 0.0) {
            return Err(Error::Config("losses.lambda_p must be nonnegative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = HarnessConfig::default();
        cfg.validate().unwrap();
        assert_eq!(HarnessConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(HarnessConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = HarnessConfig::from_toml("[scene]\nn_objets = 3\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("n_objets")), "{err}");
        let err = HarnessConfig::from_toml("[bogus]\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn empty_seed_list_is_a_config_error() {
        let err = HarnessConfig::from_toml("[benchmark]\nseeds = []\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(HarnessConfig::from_toml("[ranges]\npreset = \"huge\"\n").is_err());
        assert!(HarnessConfig::from_toml("[scene]\nn_timesteps = 4\n").is_err());
    }
}
