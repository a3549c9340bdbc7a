//! Run configuration: one TOML file with `[world]`, `[train]` and
//! `[ablate]` sections. Every key is optional and defaults to the values
//! the acceptance run uses, so an empty file is a valid config.
//!
//! ```toml
//! seed = 0
//!
//! [world]
//! num_base = 20
//! context_mix = 0.3
//!
//! [train]
//! epochs = 12
//! drop_epochs = [8, 11]
//! distill_proposals = "mvit_like"
//!
//! [train.loss]
//! tau = 20.0
//! rkd = { beta1 = 0.15, beta2 = 0.15 }
//!
//! [ablate]
//! seeds = 3
//! ```
//!
//! The master seed drives the world, the datasets and training alike.

use std::path::Path;

use ovdet_core::simworld::WorldConfig;
use ovdet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Seeds `seed, seed + 1, …` are run.
    pub seeds: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: 3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.world_config().validate()?;
        cfg.train_config().validate()?;
        if cfg.ablate.seeds == 0 {
            return Err(ovdet_core::Error::InvalidConfig("ablate.seeds must be positive").into());
        }
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) if !p.is_file() => Err(CliError::Path { path: p.to_path_buf(), reason: "config file not found" }),
            Some(p) => Self::parse(&std::fs::read_to_string(p).map_err(io_err(p))?),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig { seed: self.seed, ..self.world.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_run() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let t = cfg.train_config();
        assert_eq!((t.base_lr, t.momentum, t.weight_decay, t.top_k), (0.02, 0.9, 1e-4, 5));
        assert_eq!(t.drop_epochs, vec![8, 11]);
        assert_eq!((t.loss.ils.alpha, t.loss.rkd.beta1, t.loss.rkd.beta2), (0.1, 0.15, 0.15));
        assert_eq!(t.cls_per_det, 4);
        assert_eq!(cfg.ablate.seeds, 3);
    }

    #[test]
    fn sections_override_and_typos_fail() {
        let cfg = RunConfig::parse("seed = 4\n[world]\nnum_novel = 3\n[train.loss]\ntau = 10.0\n").unwrap();
        assert_eq!(cfg.world_config().seed, 4);
        assert_eq!(cfg.train_config().seed, 4);
        assert_eq!(cfg.world.num_novel, 3);
        assert_eq!(cfg.train.loss.tau, 10.0);
        assert!(RunConfig::parse("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::parse("[train]\ncls_per_det = 0\n").is_err());
    }
}
