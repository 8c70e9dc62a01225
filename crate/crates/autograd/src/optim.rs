use crate::{Grads, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm above which gradients are rescaled. `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> f64 {
        let norm = grads.global_norm();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            let m = self.m[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * clip;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn minimizes_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.insert("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&ps);
                let x = g.param(id);
                let sq = g.mul(x, x).unwrap();
                let l = g.sum(sq);
                g.backward(l).unwrap()
            };
            opt.step(&mut ps, &grads, 0.05);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g).
        let mut ps = ParamStore::new();
        let id = ps.insert("x", Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
        let mut grads = Grads::new(1);
        grads.add_slice(id, &[1], &[0.5]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut ps, &grads, 0.1);
        assert!((ps.get(id).data()[0] - 0.9).abs() < 1e-6);
    }
}
