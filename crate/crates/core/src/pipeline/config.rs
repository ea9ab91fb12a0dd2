use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{CodecArch, LossWeights, Stage1Config};
use crate::error::{Error, Result};
use crate::metrics::FeatureTrainConfig;
use crate::synthdata::{DatasetConfig, MotionKind, NUM_KEYPOINTS};
use crate::transformer::{Policy, RoiConfig, Stage2Config, TargetKind, TransformerArch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Dataset root written by `make-data`.
    pub data_dir: PathBuf,
    /// Checkpoints, loss logs and the lock file.
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct GenerationConfig {
    pub policy: Policy,
    pub seed: u64,
}


/// Every hyperparameter of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: DatasetConfig,
    pub codec: CodecArch,
    pub transformer: TransformerArch,
    pub features: FeatureTrainConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub generation: GenerationConfig,
    /// Checkpoint interval in optimizer steps.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            data: DatasetConfig::default(),
            codec: CodecArch::default(),
            transformer: TransformerArch::default(),
            features: FeatureTrainConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            generation: GenerationConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl RunConfig {
    /// Reduced preset that trains both stages in minutes on one CPU core:
    /// 32×32 frames, an 8×8 latent grid (l = 64) and small models.
    pub fn acceptance() -> Self {
        Self {
            paths: Paths::default(),
            data: DatasetConfig {
                image_size: 32,
                train_sequences: 10,
                test_sequences: 2,
                frames: 5,
                seed: 7,
            },
            codec: CodecArch {
                image_size: 32,
                depth: 2,
                channels: vec![32, 64, 64],
                code_dim: 32,
                codebook_size: 128,
                disc_channels: [16, 32],
            },
            transformer: TransformerArch {
                seq_len: 64,
                keypoints: NUM_KEYPOINTS,
                codebook_size: 128,
                width: 64,
                blocks: 2,
                heads: 4,
                ff_mult: 4,
            },
            features: FeatureTrainConfig {
                steps: 150,
                batch: 16,
                lr: 2e-3,
            },
            stage1: Stage1Config {
                steps: 3000,
                batch: 4,
                lr: 2e-3,
                decay_after: 1500,
                weights: LossWeights::default(),
                adv_warmup: 10_000,
                dead_code_steps: 500,
                seed: 1,
            },
            stage2: Stage2Config {
                steps: 3000,
                batch: 8,
                lr: 1e-3,
                warmup: 200,
                roi: Some(RoiConfig::default()),
                target: TargetKind::Patchwork,
                seed: 2,
            },
            generation: GenerationConfig {
                policy: Policy::Greedy,
                seed: 3,
            },
            checkpoint_every: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.transformer.validate()?;
        if self.data.image_size != self.codec.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} != codec.image_size {}",
                self.data.image_size, self.codec.image_size
            )));
        }
        if self.transformer.seq_len != self.codec.seq_len() {
            return Err(Error::Config(format!(
                "transformer.seq_len {} must equal (image_size / 2^depth)^2 = {}",
                self.transformer.seq_len,
                self.codec.seq_len()
            )));
        }
        if self.transformer.codebook_size != self.codec.codebook_size {
            return Err(Error::Config(format!(
                "transformer.codebook_size {} != codec.codebook_size {}",
                self.transformer.codebook_size, self.codec.codebook_size
            )));
        }
        if self.transformer.keypoints != NUM_KEYPOINTS {
            return Err(Error::Config(format!(
                "transformer.keypoints must be {NUM_KEYPOINTS} for synthetic data"
            )));
        }
        if self.stage1.batch == 0 || self.stage2.batch == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch sizes and checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_classes(&self) -> usize {
        MotionKind::ALL.len()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Digest of the settings that determine the feature network.
    pub fn features_hash(&self) -> String {
        digest(&(&self.data, &self.features))
    }

    /// Digest of the settings that determine stage-1 artifacts.
    pub fn stage1_hash(&self) -> String {
        digest(&(&self.data, &self.codec, &self.features, &self.stage1))
    }

    /// Digest of the settings that determine stage-2 artifacts.
    pub fn stage2_hash(&self) -> String {
        digest(&(self.stage1_hash(), &self.transformer, &self.stage2))
    }
}

fn digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        RunConfig::default().validate().unwrap();
        RunConfig::acceptance().validate().unwrap();
        assert_eq!(RunConfig::default().codec.seq_len(), 256);
        assert_eq!(RunConfig::acceptance().codec.seq_len(), 64);
    }

    #[test]
    fn toml_round_trip_and_hashes() {
        let cfg = RunConfig::acceptance();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.stage2_hash(), cfg.stage2_hash());
        let mut other = cfg.clone();
        other.stage2.lr *= 2.0;
        assert_eq!(other.stage1_hash(), cfg.stage1_hash());
        assert_ne!(other.stage2_hash(), cfg.stage2_hash());
        let mut moved = cfg.clone();
        moved.paths.run_dir = "elsewhere".into();
        assert_eq!(moved.stage2_hash(), cfg.stage2_hash());
        other.stage1.lr *= 2.0;
        assert_ne!(other.stage1_hash(), cfg.stage1_hash());
    }

    #[test]
    fn inconsistent_configs_rejected() {
        let mut cfg = RunConfig::default();
        cfg.transformer.seq_len = 64;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.data.image_size = 32;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::from_toml("checkpoint_every = \"soon\"").is_err());
    }
}
