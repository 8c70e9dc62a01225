//! Experiment configuration: one TOML file covering data, alignment, model,
//! per-stage training and decoding.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusSpec, SpecAugPolicy};
use crate::decoding::DecodeConfig;
use crate::encoder::{ConformerConfig, FusionConfig, Insert, Variant};
use crate::frontend::VisualFrontendConfig;
use crate::training::{ModelConfig, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestConfig {
    pub utterances: usize,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self { utterances: 40 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub iterations: usize,
    pub max_components: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            max_components: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfigs {
    pub audio: TrainConfig,
    pub video: TrainConfig,
    pub fusion: TrainConfig,
    pub lm: TrainConfig,
}

impl Default for StageConfigs {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            audio: t.clone(),
            video: t.clone(),
            fusion: t.clone(),
            lm: t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed: drives the corpus, initializations and data order.
    pub seed: u64,
    /// Enforces the structural limits of the full-size model.
    #[serde(default)]
    pub paper_scale: bool,
    #[serde(default)]
    pub data: CorpusSpec,
    #[serde(default)]
    pub test: TestConfig,
    #[serde(default)]
    pub gmm: GmmConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: StageConfigs,
    #[serde(default)]
    pub decode: DecodeConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    PaperScaleValidate,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-scale-validate" => Ok(Preset::PaperScaleValidate),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk or paper-scale-validate)"
            ))),
        }
    }
}

fn stage(epochs: usize, peak_lr: f64, warmup_steps: u64, batch_size: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        peak_lr,
        warmup_steps,
        batch_size,
        ..Default::default()
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::PaperScaleValidate => Self::paper_scale(),
        }
    }

    /// Small enough to run the whole recipe on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            seed: 1,
            paper_scale: false,
            data: CorpusSpec {
                num_units: 6,
                feature_dim: 20,
                video_height: 16,
                video_width: 16,
                num_utterances: 160,
                utterance_length_range: (2, 4),
                duration_range: (12, 16),
                noise_std: 1.5,
                video_noise_std: 0.1,
                visual_informativeness: 0.5,
                seed: 1,
            },
            test: TestConfig { utterances: 40 },
            gmm: GmmConfig::default(),
            model: ModelConfig {
                conformer: ConformerConfig {
                    d_model: 64,
                    n_head: 4,
                    d_ffn: 128,
                    conv_kernel: 5,
                },
                fusion: FusionConfig {
                    variant: Variant::Cmfe,
                    n_early: 2,
                    n_late: 1,
                    insert: Insert::Outer,
                    n_vblock: 1,
                },
                visual: VisualFrontendConfig { channels: vec![8, 16, 32] },
                video_blocks: 1,
                decoder_layers: 1,
                lm_layers: 1,
            },
            train: StageConfigs {
                audio: stage(12, 2e-3, 40, 8),
                video: TrainConfig {
                    spec_aug: SpecAugPolicy::none(),
                    ..stage(6, 2e-3, 40, 8)
                },
                fusion: stage(12, 2e-3, 40, 8),
                lm: stage(6, 2e-3, 20, 16),
            },
            decode: DecodeConfig {
                beam: 4,
                ..Default::default()
            },
        }
    }

    /// Full-size structure; meant for validating configurations rather than
    /// running on a workstation.
    pub fn paper_scale() -> Self {
        let t = stage(50, 6e-4, 6000, 8);
        Self {
            seed: 1,
            paper_scale: true,
            data: CorpusSpec {
                visual_informativeness: 0.5,
                seed: 1,
                ..Default::default()
            },
            test: TestConfig::default(),
            gmm: GmmConfig::default(),
            model: ModelConfig {
                conformer: ConformerConfig::paper(),
                fusion: FusionConfig {
                    variant: Variant::Cmfe,
                    n_early: 3,
                    n_late: 9,
                    insert: Insert::Outer,
                    n_vblock: 2,
                },
                visual: VisualFrontendConfig::default(),
                video_blocks: 3,
                decoder_layers: 6,
                lm_layers: 6,
            },
            train: StageConfigs {
                audio: t.clone(),
                video: TrainConfig {
                    spec_aug: SpecAugPolicy::none(),
                    ..t.clone()
                },
                fusion: t.clone(),
                lm: t,
            },
            decode: DecodeConfig::default(),
        }
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Replaces the master seed; the corpus seed follows it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.seed != self.seed {
            return Err(Error::Config(format!(
                "data.seed ({}) must equal the top-level seed ({}); set `seed` instead",
                self.data.seed, self.seed
            )));
        }
        self.data.validate()?;
        if self.test.utterances == 0 {
            return Err(Error::Config("test.utterances must be positive".into()));
        }
        if self.gmm.iterations == 0 || self.gmm.max_components == 0 {
            return Err(Error::Config("gmm iterations and max_components must be positive".into()));
        }
        self.model.conformer.validate()?;
        self.model.fusion.validate(self.paper_scale)?;
        if self.model.fusion.variant == Variant::Cmfe && self.model.fusion.n_vblock > self.model.video_blocks {
            return Err(Error::Config(format!(
                "fusion uses {} visual blocks but video pre-training trains only {}",
                self.model.fusion.n_vblock, self.model.video_blocks
            )));
        }
        if self.model.decoder_layers == 0 || self.model.lm_layers == 0 {
            return Err(Error::Config("decoder_layers and lm_layers must be positive".into()));
        }
        for t in [&self.train.audio, &self.train.video, &self.train.fusion, &self.train.lm] {
            t.validate()?;
        }
        self.decode.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Training seeds per stage, derived from the master seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let h = Sha256::digest(format!("{}:{stage}", self.seed).as_bytes());
        u64::from_le_bytes(h[..8].try_into().unwrap())
    }
}
