//! Transformer decoder and language model.
//!
//! Tokens `0..vocab` are units; index `vocab` doubles as start and end of
//! sequence, so both networks predict `vocab + 1` classes.

use avsr_autograd::nn::{Builder, LayerNorm, Linear};
use avsr_autograd::{Graph, ParamId, Var};

use crate::encoder::attention::MultiHeadAttention;
use crate::encoder::conformer::FeedForward;
use crate::encoder::{add_positions, ConformerConfig};
use crate::{Error, Result};

/// Encoder memory a decoder layer attends to.
#[derive(Clone, Copy, Debug)]
pub struct Memory<'a> {
    pub value: Var,
    pub valid: &'a [bool],
}

#[derive(Clone, Debug)]
struct Sublayer {
    ln: LayerNorm,
    att: MultiHeadAttention,
}

impl Sublayer {
    fn new(b: &mut Builder, d: usize, h: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(&mut b.pp("ln"), d)?,
            att: MultiHeadAttention::new(&mut b.pp("att"), d, h)?,
        })
    }
}

/// Pre-norm layer: causal self-attention, one cross-attention per memory,
/// feed-forward.
#[derive(Clone, Debug)]
struct Layer {
    self_att: Sublayer,
    cross: Vec<Sublayer>,
    ff: FeedForward,
}

impl Layer {
    fn forward(&self, g: &mut Graph, x: Var, memories: &[Memory]) -> Result<Var> {
        let h = self.self_att.ln.forward(g, x)?;
        let a = self.self_att.att.forward(g, h, h, None, true)?;
        let mut x = g.add(x, a)?;
        for (sub, mem) in self.cross.iter().zip(memories) {
            let h = sub.ln.forward(g, x)?;
            let a = sub.att.forward(g, h, mem.value, Some(mem.valid), false)?;
            x = g.add(x, a)?;
        }
        let f = self.ff.forward(g, x)?;
        Ok(g.add(x, f)?)
    }
}

/// Autoregressive transformer. With `num_memories = 0` it is a language
/// model.
#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    emb: ParamId,
    layers: Vec<Layer>,
    ln_out: LayerNorm,
    out: Linear,
    pub vocab: usize,
    pub num_memories: usize,
}

impl TransformerDecoder {
    pub fn new(b: &mut Builder, cfg: &ConformerConfig, layers: usize, vocab: usize, num_memories: usize) -> Result<Self> {
        let d = cfg.d_model;
        let names = ["src", "vsrc"];
        if num_memories > names.len() {
            return Err(Error::Config(format!("decoder supports at most 2 memories, got {num_memories}")));
        }
        let emb = b.uniform("emb", &[vocab + 1, d], d)?;
        let layers = (0..layers)
            .map(|i| {
                let mut lb = b.pp(format!("layers.{i}"));
                Ok(Layer {
                    self_att: Sublayer::new(&mut lb.pp("self"), d, cfg.n_head)?,
                    cross: names[..num_memories]
                        .iter()
                        .map(|n| Sublayer::new(&mut lb.pp(n), d, cfg.n_head))
                        .collect::<Result<_>>()?,
                    ff: FeedForward::new(&mut lb.pp("ff"), d, cfg.d_ffn)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            emb,
            layers,
            ln_out: LayerNorm::new(&mut b.pp("ln_out"), d)?,
            out: Linear::new(&mut b.pp("out"), d, vocab + 1)?,
            vocab,
            num_memories,
        })
    }

    pub fn sos(&self) -> usize {
        self.vocab
    }

    pub fn eos(&self) -> usize {
        self.vocab
    }

    /// Logits `[len(prefix) + 1, vocab + 1]` for the positions after
    /// `<sos> prefix`.
    pub fn logits(&self, g: &mut Graph, prefix: &[usize], memories: &[Memory]) -> Result<Var> {
        if memories.len() != self.num_memories {
            return Err(Error::Config(format!(
                "decoder expects {} memories, got {}",
                self.num_memories,
                memories.len()
            )));
        }
        if let Some(&t) = prefix.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::Config(format!("token {t} outside vocabulary {}", self.vocab)));
        }
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(self.sos());
        ids.extend_from_slice(prefix);
        let table = g.param(self.emb);
        let x = g.embedding(table, &ids)?;
        let mut x = add_positions(g, x)?;
        for l in &self.layers {
            x = l.forward(g, x, memories)?;
        }
        let x = self.ln_out.forward(g, x)?;
        Ok(self.out.forward(g, x)?)
    }

    /// Teacher-forced negative log-likelihood of `target <eos>`.
    pub fn nll(&self, g: &mut Graph, target: &[usize], memories: &[Memory], smoothing: f64) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::Empty("attention target is empty".into()));
        }
        let logits = self.logits(g, target, memories)?;
        let mut out = target.to_vec();
        out.push(self.eos());
        Ok(g.cross_entropy(logits, &out, smoothing)?)
    }

    /// Log-probabilities over `vocab + 1` classes for the token after `prefix`.
    pub fn next_logprobs(&self, g: &mut Graph, prefix: &[usize], memories: &[Memory]) -> Result<Vec<f64>> {
        let logits = self.logits(g, prefix, memories)?;
        let lp = g.log_softmax(logits);
        Ok(g.value(lp).row(prefix.len()).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use avsr_autograd::{ParamStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ConformerConfig {
        ConformerConfig {
            d_model: 8,
            n_head: 2,
            d_ffn: 16,
            conv_kernel: 3,
        }
    }

    #[test]
    fn uniform_output_gives_log_classes() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = TransformerDecoder::new(&mut Builder::new(&mut ps, &mut rng).pp("decoder"), &cfg(), 1, 4, 1).unwrap();
        ps.set("decoder.out.w", Tensor::zeros(&[8, 5])).unwrap();
        ps.set("decoder.out.b", Tensor::zeros(&[5])).unwrap();
        let mut g = Graph::new(&ps);
        let mem = g.constant(Tensor::full(&[3, 8], 0.5));
        let m = [Memory { value: mem, valid: &[true; 3] }];
        let nll = dec.nll(&mut g, &[1, 2], &m, 0.0).unwrap();
        assert!((g.value(nll).data()[0] - 3.0 * 5f64.ln()).abs() < 1e-12);
        assert!(matches!(dec.nll(&mut g, &[], &m, 0.0), Err(Error::Empty(_))));
    }
}
