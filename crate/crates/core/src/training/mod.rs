//! Losses, models, checkpoints and the training loop.

pub mod checkpoint;
pub mod ctc;
pub mod decoder;
pub mod model;
pub mod trainer;

use avsr_autograd::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::SpecAugPolicy;
use crate::{Error, Result};

pub use checkpoint::{apply_map, load_checkpoint, save_checkpoint, CheckpointMeta, Init, MapAudit};
pub use ctc::{ctc_loss, ctc_nll};
pub use decoder::{Memory, TransformerDecoder};
pub use model::{AvsrModel, Dims, Example, LanguageModel, ModelConfig, Stage};
pub use trainer::{train, Objective, StepRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_ctc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    pub spec_aug: SpecAugPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ctc: 0.3,
            beta1: 0.9,
            beta2: 0.999,
            peak_lr: 6e-4,
            warmup_steps: 6000,
            epochs: 10,
            batch_size: 8,
            label_smoothing: 0.1,
            clip_norm: 5.0,
            spec_aug: SpecAugPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return Err(Error::Config(format!("lambda_ctc {} outside [0, 1]", self.lambda_ctc)));
        }
        if self.batch_size == 0 || self.warmup_steps == 0 {
            return Err(Error::Config("batch_size and warmup_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }
}

/// Linear warm-up to `peak` over `warmup` steps, then inverse square-root
/// decay. Steps count from 1.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("learning-rate steps start at 1".into()));
    }
    if step <= warmup {
        Ok(peak * (step as f64 / warmup as f64))
    } else {
        Ok(peak * (warmup as f64 / step as f64).sqrt())
    }
}

/// Negated multi-task objective: `-(lambda log P_ctc + (1 - lambda) log P_att)`.
pub fn joint_loss(logp_ctc: f64, logp_att: f64, lambda: f64) -> f64 {
    -(lambda * logp_ctc + (1.0 - lambda) * logp_att)
}

/// Graph form of [`joint_loss`] over negative log-likelihood nodes.
pub fn joint_loss_node(g: &mut Graph, nll_ctc: Var, nll_att: Var, lambda: f64) -> Result<Var> {
    let c = g.scale(nll_ctc, lambda);
    let a = g.scale(nll_att, 1.0 - lambda);
    Ok(g.add(c, a)?)
}

/// Summed frame cross entropy against senone labels.
pub fn visual_pretrain_loss(g: &mut Graph, frame_logits: Var, labels: &[usize]) -> Result<Var> {
    let frames = g.shape(frame_logits)[0];
    if frames != labels.len() {
        return Err(Error::LengthMismatch {
            what: format!("upsampled video ({frames} frames) vs alignment labels"),
            expected: frames,
            got: labels.len(),
        });
    }
    Ok(g.cross_entropy(frame_logits, labels, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use avsr_autograd::{ParamStore, Tensor};

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at(6000, 6e-4, 6000).unwrap(), 6e-4);
        assert_eq!(lr_at(3000, 6e-4, 6000).unwrap(), 3e-4);
        assert_eq!(lr_at(24000, 6e-4, 6000).unwrap(), 3e-4);
        assert!(lr_at(0, 6e-4, 6000).is_err());
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert!((joint_loss(-10.0, -20.0, 0.3) - 17.0).abs() < 1e-12);
        assert_eq!(joint_loss(-10.0, -20.0, 1.0), 10.0);
        assert_eq!(joint_loss(-10.0, -20.0, 0.0), 20.0);
    }

    #[test]
    fn pretrain_loss_values() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let uniform = g.constant(Tensor::zeros(&[100, 12]));
        let labels: Vec<usize> = (0..100).map(|t| t % 12).collect();
        let l = visual_pretrain_loss(&mut g, uniform, &labels).unwrap();
        assert!((g.value(l).data()[0] - 100.0 * 12f64.ln()).abs() < 1e-8);
        let mut sharp = Tensor::full(&[3, 4], -1e4);
        for t in 0..3 {
            sharp.row_mut(t)[t] = 0.0;
        }
        let sharp = g.constant(sharp);
        let l = visual_pretrain_loss(&mut g, sharp, &[0, 1, 2]).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        assert!(matches!(
            visual_pretrain_loss(&mut g, sharp, &[0, 1]),
            Err(Error::LengthMismatch { expected: 3, got: 2, .. })
        ));
    }
}
