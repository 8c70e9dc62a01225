use avsr_autograd::nn::{Builder, Linear};
use avsr_autograd::{Graph, Var};

use super::attention::{align_rows, CrossAttention};
use super::conformer::ConformerBlock;
use super::{run_blocks, ConformerConfig, FusionConfig, Insert, Variant};
use crate::{Error, Result};

/// Concatenates the early-layer visual embeddings over channels and projects
/// them back to `d_model`.
#[derive(Clone, Debug)]
pub struct VisualMemory {
    pub proj: Linear,
    pub n: usize,
}

impl VisualMemory {
    pub fn new(b: &mut Builder, n: usize, d_model: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&mut b.pp("proj"), n * d_model, d_model)?,
            n,
        })
    }

    pub fn forward(&self, g: &mut Graph, memories: &[Var]) -> Result<Var> {
        if memories.len() != self.n {
            return Err(Error::Config(format!(
                "visual memory expects {} inputs, got {}",
                self.n,
                memories.len()
            )));
        }
        let t = g.shape(memories[0])[0];
        if let Some(&m) = memories.iter().find(|&&m| g.shape(m)[0] != t) {
            return Err(Error::LengthMismatch {
                what: "visual memory input".into(),
                expected: t,
                got: g.shape(m)[0],
            });
        }
        let cat = if memories.len() == 1 { memories[0] } else { g.concat_cols(memories)? };
        Ok(self.proj.forward(g, cat)?)
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Cmfe {
        ca: Vec<CrossAttention>,
        memory: VisualMemory,
    },
    Baseline {
        v_ca: CrossAttention,
        a_ca: CrossAttention,
    },
    TmCtc {
        proj: Linear,
    },
    TmSeq,
}

/// Output of a fusion encoder. `video` is set only for TM-Seq, whose decoder
/// attends to both memories.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub audio: Var,
    pub audio_valid: Vec<bool>,
    pub video: Option<Var>,
    pub video_valid: Vec<bool>,
}

/// Audio conformer stack (`audio.enc.*`), visual conformer stack
/// (`visual.enc.*`) and the variant-specific fusion parameters (`fusion.*`).
#[derive(Clone, Debug)]
pub struct FusionEncoder {
    pub cfg: FusionConfig,
    pub audio_blocks: Vec<ConformerBlock>,
    pub visual_blocks: Vec<ConformerBlock>,
    kind: Kind,
}

impl FusionEncoder {
    /// `b` is the model root; parameter names are absolute.
    pub fn new(b: &mut Builder, cfg: &FusionConfig, conf: &ConformerConfig, paper_scale: bool) -> Result<Self> {
        cfg.validate(paper_scale)?;
        conf.validate()?;
        let d = conf.d_model;
        let audio_blocks = (0..cfg.audio_blocks())
            .map(|i| ConformerBlock::new(&mut b.pp(format!("audio.enc.{i}")), conf))
            .collect::<Result<_>>()?;
        let visual_blocks = (0..cfg.n_vblock)
            .map(|i| ConformerBlock::new(&mut b.pp(format!("visual.enc.{i}")), conf))
            .collect::<Result<_>>()?;
        let kind = match cfg.variant {
            Variant::Cmfe => Kind::Cmfe {
                ca: (0..cfg.audio_blocks())
                    .map(|i| CrossAttention::new(&mut b.pp(format!("fusion.ca.{i}")), d, conf.n_head))
                    .collect::<Result<_>>()?,
                memory: VisualMemory::new(&mut b.pp("fusion.memory"), cfg.n_early, d)?,
            },
            Variant::Baseline => Kind::Baseline {
                v_ca: CrossAttention::new(&mut b.pp("fusion.v_ca"), d, conf.n_head)?,
                a_ca: CrossAttention::new(&mut b.pp("fusion.a_ca"), d, conf.n_head)?,
            },
            Variant::TmCtc => Kind::TmCtc {
                proj: Linear::no_bias(&mut b.pp("fusion.proj"), d, d)?,
            },
            Variant::TmSeq => Kind::TmSeq,
        };
        Ok(Self {
            cfg: cfg.clone(),
            audio_blocks,
            visual_blocks,
            kind,
        })
    }

    /// `a` and `v` are positioned frontend embeddings.
    pub fn forward(&self, g: &mut Graph, a: Var, a_valid: &[bool], v: Var, v_valid: &[bool]) -> Result<EncoderOutput> {
        let out = |audio, video| EncoderOutput {
            audio,
            audio_valid: a_valid.to_vec(),
            video,
            video_valid: v_valid.to_vec(),
        };
        match &self.kind {
            Kind::Cmfe { ca, memory } => {
                let h = self.cmfe(g, a, a_valid, v, v_valid, ca, memory)?;
                Ok(out(h, None))
            }
            Kind::Baseline { v_ca, a_ca } => {
                let ve = run_blocks(g, &self.visual_blocks, v, v_valid)?;
                let ae = run_blocks(g, &self.audio_blocks, a, a_valid)?;
                let v2 = v_ca.forward(g, ve, ve, ae, a_valid, v_valid)?;
                let h = a_ca.forward(g, ae, ae, v2, v_valid, a_valid)?;
                Ok(out(h, None))
            }
            Kind::TmCtc { proj } => {
                let ve = run_blocks(g, &self.visual_blocks, v, v_valid)?;
                let ae = run_blocks(g, &self.audio_blocks, a, a_valid)?;
                let va = align_rows(g, ve, a_valid)?;
                let p = proj.forward(g, va)?;
                let h = g.add(ae, p)?;
                Ok(out(h, None))
            }
            Kind::TmSeq => {
                let ve = run_blocks(g, &self.visual_blocks, v, v_valid)?;
                let ae = run_blocks(g, &self.audio_blocks, a, a_valid)?;
                Ok(out(ae, Some(ve)))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn cmfe(
        &self,
        g: &mut Graph,
        a: Var,
        a_valid: &[bool],
        v: Var,
        v_valid: &[bool],
        ca: &[CrossAttention],
        memory: &VisualMemory,
    ) -> Result<Var> {
        let n = self.cfg.n_early;
        let mut h = a;
        let mut vis = v;
        let mut memories = Vec::with_capacity(n);
        for (i, block) in self.audio_blocks.iter().enumerate() {
            let query = if i < n {
                if let Some(vb) = self.visual_blocks.get(i) {
                    vis = vb.forward(g, vis, v_valid)?;
                }
                memories.push(vis);
                vis
            } else {
                if i == n {
                    // X_V^O is built once and shared by every late layer.
                    vis = memory.forward(g, &memories)?;
                }
                vis
            };
            let q = align_rows(g, query, a_valid)?;
            let layer = &ca[i];
            h = match self.cfg.insert {
                Insert::Outer => {
                    let x = layer.forward(g, h, q, h, a_valid, a_valid)?;
                    block.forward(g, x, a_valid)?
                }
                Insert::Inner => {
                    let mut hook = |g: &mut Graph, x: Var| layer.forward(g, x, q, x, a_valid, a_valid);
                    block.forward_inner(g, h, a_valid, Some(&mut hook))?
                }
            };
        }
        Ok(h)
    }
}
