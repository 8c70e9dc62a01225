//! Parameterized building blocks shared by the model code.

use rand_chacha::ChaCha8Rng;

use crate::{Graph, ParamId, ParamStore, Result, Tensor, Var};

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn pp(&mut self, name: impl AsRef<str>) -> Builder<'_> {
        let prefix = self.full(name.as_ref());
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let full = self.full(name);
        self.store.uniform(full, shape, fan_in, self.rng)
    }

    /// He-style uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// which keeps activations from shrinking through stacks of
    /// rectifier-like layers.
    pub fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let full = self.full(name);
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.store.uniform_bound(full, shape, bound, self.rng)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let full = self.full(name);
        self.store.zeros(full, shape)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let full = self.full(name);
        self.store.ones(full, shape)
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full(name);
        self.store.insert(full, value)
    }
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: b.uniform("w", &[d_in, d_out], d_in)?,
            b: Some(b.uniform("b", &[d_out], d_in)?),
        })
    }

    pub fn no_bias(b: &mut Builder, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: b.uniform("w", &[d_in, d_out], d_in)?,
            b: None,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(b: &mut Builder, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.ones("gamma", &[d])?,
            beta: b.zeros("beta", &[d])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}
