//! The three trainable networks: audio-only, video-only senone classifier,
//! and the audio-visual fusion model.

use avsr_autograd::nn::{Builder, Linear};
use avsr_autograd::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ctc::ctc_loss;
use super::decoder::{Memory, TransformerDecoder};
use super::{joint_loss_node, visual_pretrain_loss, TrainConfig};
use crate::corpus::{normalize_utterance, Utterance};
use crate::encoder::{add_positions, run_blocks, ConformerBlock, ConformerConfig, EncoderOutput, FusionConfig, FusionEncoder, Variant};
use crate::frontend::{audio_out_len, standardize_frames, AudioFrontend, Upsampler, VisualFrontend, VisualFrontendConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainAudio,
    PretrainVideo,
    FinetuneFusion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainAudio => "pretrain_audio",
            Stage::PretrainVideo => "pretrain_video",
            Stage::FinetuneFusion => "finetune_fusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conformer: ConformerConfig,
    pub fusion: FusionConfig,
    pub visual: VisualFrontendConfig,
    /// Conformer blocks of the video-only pre-training network.
    pub video_blocks: usize,
    pub decoder_layers: usize,
    pub lm_layers: usize,
}

/// Data-dependent sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    pub num_senones: usize,
}

/// One training or evaluation item. `audio` is already normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub audio: Tensor,
    pub video: Tensor,
    pub transcript: Vec<usize>,
    /// Frame-level senone labels; only used by video pre-training.
    pub labels: Vec<usize>,
}

impl Example {
    /// Normalizes the utterance's audio; `labels` may be empty outside video
    /// pre-training.
    pub fn from_utterance(u: &Utterance, labels: Vec<usize>) -> Result<Self> {
        Ok(Self {
            id: u.id.clone(),
            audio: normalize_utterance(&u.audio)?.into_tensor(),
            video: u.video.frames().clone(),
            transcript: u.transcript.clone(),
            labels,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AvsrModel {
    pub stage: Stage,
    pub dims: Dims,
    audio_fe: Option<AudioFrontend>,
    visual_fe: Option<VisualFrontend>,
    audio_blocks: Vec<ConformerBlock>,
    video_blocks: Vec<ConformerBlock>,
    upsampler: Option<Upsampler>,
    senone_head: Option<Linear>,
    fusion: Option<FusionEncoder>,
    ctc: Option<Linear>,
    pub decoder: Option<TransformerDecoder>,
}

fn all_valid(n: usize) -> Vec<bool> {
    vec![true; n]
}

impl AvsrModel {
    pub fn build(stage: Stage, cfg: &ModelConfig, dims: Dims, paper_scale: bool, seed: u64) -> Result<(ParamStore, Self)> {
        cfg.conformer.validate()?;
        cfg.fusion.validate(paper_scale)?;
        let d = cfg.conformer.d_model;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut ps, &mut rng);
        let mut m = Self {
            stage,
            dims,
            audio_fe: None,
            visual_fe: None,
            audio_blocks: Vec::new(),
            video_blocks: Vec::new(),
            upsampler: None,
            senone_head: None,
            fusion: None,
            ctc: None,
            decoder: None,
        };
        if stage != Stage::PretrainVideo {
            m.audio_fe = Some(AudioFrontend::new(&mut b.pp("audio.frontend"), dims.feature_dim, d)?);
        }
        if stage != Stage::PretrainAudio {
            m.visual_fe = Some(VisualFrontend::new(&mut b.pp("visual"), &cfg.visual, dims.height, dims.width, d)?);
        }
        match stage {
            Stage::PretrainAudio => {
                m.audio_blocks = (0..cfg.fusion.audio_blocks())
                    .map(|i| ConformerBlock::new(&mut b.pp(format!("audio.enc.{i}")), &cfg.conformer))
                    .collect::<Result<_>>()?;
            }
            Stage::PretrainVideo => {
                m.video_blocks = (0..cfg.video_blocks)
                    .map(|i| ConformerBlock::new(&mut b.pp(format!("visual.enc.{i}")), &cfg.conformer))
                    .collect::<Result<_>>()?;
                m.upsampler = Some(Upsampler::new(&mut b.pp("upsampler"), d)?);
                m.senone_head = Some(Linear::new(&mut b.pp("senone"), d, dims.num_senones)?);
            }
            Stage::FinetuneFusion => {
                m.fusion = Some(FusionEncoder::new(&mut b, &cfg.fusion, &cfg.conformer, paper_scale)?);
            }
        }
        if stage != Stage::PretrainVideo {
            m.ctc = Some(Linear::new(&mut b.pp("ctc"), d, dims.vocab + 1)?);
            let memories = if stage == Stage::FinetuneFusion && cfg.fusion.variant == Variant::TmSeq { 2 } else { 1 };
            m.decoder = Some(TransformerDecoder::new(
                &mut b.pp("decoder"),
                &cfg.conformer,
                cfg.decoder_layers,
                dims.vocab,
                memories,
            )?);
        }
        Ok((ps, m))
    }

    pub fn blank(&self) -> usize {
        self.dims.vocab
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        if self.audio_fe.is_some() && ex.audio.cols() != self.dims.feature_dim {
            return Err(Error::Config(format!(
                "{}: feature dim {} but the model expects {}",
                ex.id,
                ex.audio.cols(),
                self.dims.feature_dim
            )));
        }
        Ok(())
    }

    fn embed_video(&self, g: &mut Graph, video: &Tensor) -> Result<Var> {
        let fe = self.visual_fe.as_ref().ok_or_else(|| Error::Config("model has no visual branch".into()))?;
        let v = g.constant(standardize_frames(video));
        fe.forward(g, v, &all_valid(video.rows()))
    }

    /// Visual frontend output before any conformer block, `[T_v, d_model]`.
    pub fn visual_embeddings(&self, params: &ParamStore, video: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(params);
        let v = self.embed_video(&mut g, video)?;
        Ok(g.value(v).clone())
    }

    /// Encoder output for the audio-only and fusion networks.
    pub fn encode(&self, g: &mut Graph, ex: &Example) -> Result<EncoderOutput> {
        self.check_example(ex)?;
        let fe = self.audio_fe.as_ref().ok_or_else(|| Error::Config("model has no audio branch".into()))?;
        let a = g.constant(ex.audio.clone());
        let a = fe.forward(g, a, &all_valid(ex.audio.rows()))?;
        let a = add_positions(g, a)?;
        let a_valid = all_valid(audio_out_len(ex.audio.rows()));
        match &self.fusion {
            None => {
                let h = run_blocks(g, &self.audio_blocks, a, &a_valid)?;
                Ok(EncoderOutput {
                    audio: h,
                    audio_valid: a_valid,
                    video: None,
                    video_valid: Vec::new(),
                })
            }
            Some(f) => {
                let v = self.embed_video(g, &ex.video)?;
                let v = add_positions(g, v)?;
                f.forward(g, a, &a_valid, v, &all_valid(ex.video.rows()))
            }
        }
    }

    pub fn memories<'a>(enc: &'a EncoderOutput) -> Vec<Memory<'a>> {
        let mut m = vec![Memory {
            value: enc.audio,
            valid: &enc.audio_valid,
        }];
        if let Some(v) = enc.video {
            m.push(Memory {
                value: v,
                valid: &enc.video_valid,
            });
        }
        m
    }

    pub fn ctc_logits(&self, g: &mut Graph, enc: &EncoderOutput) -> Result<Var> {
        let ctc = self.ctc.as_ref().ok_or_else(|| Error::Config("model has no CTC head".into()))?;
        Ok(ctc.forward(g, enc.audio)?)
    }

    /// Per-frame senone logits `[4 T_v, S]` of the video-only network.
    pub fn frame_logits(&self, g: &mut Graph, video: &Tensor) -> Result<Var> {
        let (Some(up), Some(head)) = (&self.upsampler, &self.senone_head) else {
            return Err(Error::Config("frame logits need the video pre-training network".into()));
        };
        let valid = all_valid(video.rows());
        let v = self.embed_video(g, video)?;
        let v = add_positions(g, v)?;
        let v = run_blocks(g, &self.video_blocks, v, &valid)?;
        let u = up.forward(g, v, &valid)?;
        Ok(head.forward(g, u)?)
    }

    /// Training loss of one example plus named component values.
    pub fn loss(&self, g: &mut Graph, ex: &Example, tc: &TrainConfig) -> Result<(Var, Vec<(&'static str, f64)>)> {
        if self.stage == Stage::PretrainVideo {
            let logits = self.frame_logits(g, &ex.video)?;
            let l = visual_pretrain_loss(g, logits, &ex.labels)?;
            let v = g.value(l).data()[0];
            return Ok((l, vec![("ce", v)]));
        }
        let enc = self.encode(g, ex)?;
        let logits = self.ctc_logits(g, &enc)?;
        let ctc = ctc_loss(g, logits, &ex.transcript, self.blank())?;
        let mems = Self::memories(&enc);
        let att = self.decoder.as_ref().unwrap().nll(g, &ex.transcript, &mems, tc.label_smoothing)?;
        let total = joint_loss_node(g, ctc, att, tc.lambda_ctc)?;
        let comps = vec![("ctc", g.value(ctc).data()[0]), ("att", g.value(att).data()[0])];
        Ok((total, comps))
    }
}

/// Transformer language model over transcripts.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub net: TransformerDecoder,
}

impl LanguageModel {
    pub fn build(cfg: &ModelConfig, vocab: usize, seed: u64) -> Result<(ParamStore, Self)> {
        cfg.conformer.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut ps, &mut rng);
        let net = TransformerDecoder::new(&mut b.pp("lm"), &cfg.conformer, cfg.lm_layers, vocab, 0)?;
        Ok((ps, Self { net }))
    }

    /// A transcript-only training item.
    pub fn example(id: &str, transcript: &[usize]) -> Example {
        Example {
            id: id.to_string(),
            audio: Tensor::zeros(&[0, 1]),
            video: Tensor::zeros(&[0, 1, 1]),
            transcript: transcript.to_vec(),
            labels: Vec::new(),
        }
    }
}

impl super::trainer::Objective for LanguageModel {
    fn loss(&self, g: &mut Graph, ex: &Example, tc: &TrainConfig) -> Result<(Var, Vec<(&'static str, f64)>)> {
        let l = self.net.nll(g, &ex.transcript, &[], tc.label_smoothing)?;
        let v = g.value(l).data()[0];
        Ok((l, vec![("lm", v)]))
    }

    fn augments_audio(&self) -> bool {
        false
    }
}
