//! Mini-batch training loop with length-bucketed batches.

use std::collections::BTreeMap;

use avsr_autograd::optim::{Adam, AdamConfig};
use avsr_autograd::{Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{AvsrModel, Example};
use super::{lr_at, TrainConfig};
use crate::corpus::{spec_augment, FeatureSequence};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    /// Mean per-utterance loss of the batch.
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
}

/// Shuffles, groups neighbours of similar length into batches, and shuffles
/// the batch order.
fn batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    let mut out = Vec::new();
    for bucket in idx.chunks(batch_size * 4) {
        let mut bucket = bucket.to_vec();
        bucket.sort_by_key(|&i| (lengths[i], i));
        out.extend(bucket.chunks(batch_size).map(<[usize]>::to_vec));
    }
    out.shuffle(rng);
    out
}

/// Anything the loop can train: a per-example loss plus whether audio
/// augmentation applies.
pub trait Objective {
    fn loss(&self, g: &mut Graph, ex: &Example, tc: &TrainConfig) -> Result<(Var, Vec<(&'static str, f64)>)>;
    fn augments_audio(&self) -> bool;
}

impl Objective for AvsrModel {
    fn loss(&self, g: &mut Graph, ex: &Example, tc: &TrainConfig) -> Result<(Var, Vec<(&'static str, f64)>)> {
        AvsrModel::loss(self, g, ex, tc)
    }

    fn augments_audio(&self) -> bool {
        self.stage != super::Stage::PretrainVideo
    }
}

/// Trains `params` in place for `tc.epochs` epochs; `on_step` sees every
/// record as it is produced.
pub fn train(
    model: &impl Objective,
    params: &mut ParamStore,
    data: &[Example],
    tc: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    tc.validate()?;
    if data.is_empty() && tc.epochs > 0 {
        return Err(Error::Empty("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(AdamConfig {
        beta1: tc.beta1,
        beta2: tc.beta2,
        clip_norm: Some(tc.clip_norm),
        ..Default::default()
    });
    let lengths: Vec<usize> = data.iter().map(|e| e.audio.rows().max(e.transcript.len())).collect();
    let mut records = Vec::new();
    for _ in 0..tc.epochs {
        for batch in batches(&lengths, tc.batch_size, &mut rng) {
            let step = opt.steps_taken() + 1;
            let lr = lr_at(step, tc.peak_lr, tc.warmup_steps)?;
            let mut g = Graph::new(params);
            let mut total = None;
            let mut comps: BTreeMap<String, f64> = BTreeMap::new();
            for &i in &batch {
                let mut ex = data[i].clone();
                if model.augments_audio() {
                    let f = FeatureSequence::new(ex.audio)?;
                    ex.audio = spec_augment(&f, &tc.spec_aug, &mut rng).into_tensor();
                }
                let (l, parts) = model.loss(&mut g, &ex, tc)?;
                for (k, v) in parts {
                    *comps.entry(k.to_string()).or_default() += v / batch.len() as f64;
                }
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite loss at step {step}")));
            }
            let grads = g.backward(loss)?;
            drop(g);
            opt.step(params, &grads, lr);
            let rec = StepRecord {
                step,
                lr,
                loss: value,
                components: comps,
            };
            on_step(&rec)?;
            records.push(rec);
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_index_once() {
        let lengths: Vec<usize> = (0..23).map(|i| (i * 7) % 11).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batches(&lengths, 4, &mut rng);
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(b.iter().all(|x| x.len() <= 4));
    }
}
