//! Conformer blocks, cross-attention and the fusion encoders.

pub mod attention;
pub mod conformer;
pub mod fusion;

use avsr_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::frontend::sinusoid;
use crate::{Error, Result};

pub use attention::{align_rows, CrossAttention, MultiHeadAttention};
pub use conformer::ConformerBlock;
pub use fusion::{EncoderOutput, FusionEncoder, VisualMemory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub d_model: usize,
    pub n_head: usize,
    pub d_ffn: usize,
    pub conv_kernel: usize,
}

impl ConformerConfig {
    pub fn paper() -> Self {
        Self {
            d_model: 512,
            n_head: 8,
            d_ffn: 2048,
            conv_kernel: 5,
        }
    }

    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_head: 4,
            d_ffn: 256,
            conv_kernel: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_head == 0 || self.d_model == 0 || self.d_model % self.n_head != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_head {}",
                self.d_model, self.n_head
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        if self.d_ffn == 0 {
            return Err(Error::Config("d_ffn must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    TmCtc,
    TmSeq,
    Cmfe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insert {
    Inner,
    Outer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub variant: Variant,
    /// Early fusion layers `N`.
    pub n_early: usize,
    /// Late fusion layers `M`.
    pub n_late: usize,
    pub insert: Insert,
    /// Conformer blocks in the visual branch.
    pub n_vblock: usize,
}

impl FusionConfig {
    pub fn audio_blocks(&self) -> usize {
        self.n_early + self.n_late
    }

    /// `paper_scale` additionally enforces `N + M = 12` and `N` in `1..=3`.
    pub fn validate(&self, paper_scale: bool) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_early == 0 {
            return bad("fusion needs at least one early layer".into());
        }
        if self.variant == Variant::Cmfe && self.n_vblock > self.n_early {
            return bad(format!(
                "CMFE n_vblock {} exceeds early layers {}",
                self.n_vblock, self.n_early
            ));
        }
        if self.variant != Variant::Cmfe && self.n_vblock == 0 {
            return bad(format!("{:?} needs at least one visual block", self.variant));
        }
        if paper_scale {
            if !(1..=3).contains(&self.n_early) {
                return bad(format!("paper scale needs N in [1, 3], got {}", self.n_early));
            }
            if self.n_early + self.n_late != 12 {
                return bad(format!(
                    "paper scale needs N + M = 12, got {}",
                    self.n_early + self.n_late
                ));
            }
        }
        Ok(())
    }
}

/// Sequences zero-padded to a common length plus validity masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub data: Vec<Tensor>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl PaddedBatch {
    pub fn new(seqs: &[Tensor]) -> Self {
        let max_len = seqs.iter().map(Tensor::rows).max().unwrap_or(0);
        Self {
            data: seqs.iter().map(|s| s.pad_rows(max_len - s.rows(), 0.0)).collect(),
            lengths: seqs.iter().map(Tensor::rows).collect(),
            max_len,
        }
    }

    pub fn mask(&self, i: usize) -> Vec<bool> {
        (0..self.max_len).map(|t| t < self.lengths[i]).collect()
    }
}

/// Adds sinusoidal positions to `[T, d]` embeddings.
pub fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let [t, d] = [g.shape(x)[0], g.shape(x)[1]];
    let pe = g.constant(sinusoid(t, d));
    Ok(g.add(x, pe)?)
}

pub fn run_blocks(g: &mut Graph, blocks: &[ConformerBlock], mut x: Var, valid: &[bool]) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, x, valid)?;
    }
    Ok(x)
}
