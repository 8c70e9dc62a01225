use avsr_autograd::nn::{Builder, LayerNorm, Linear};
use avsr_autograd::{Graph, Var};

use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_head: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, d_model: usize, n_head: usize) -> Result<Self> {
        if n_head == 0 || d_model % n_head != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by n_head {n_head}"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut b.pp("q"), d_model, d_model)?,
            k: Linear::new(&mut b.pp("k"), d_model, d_model)?,
            v: Linear::new(&mut b.pp("v"), d_model, d_model)?,
            o: Linear::new(&mut b.pp("o"), d_model, d_model)?,
            n_head,
            d_model,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        q_in: Var,
        kv_in: Var,
        key_valid: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, q_in, kv_in, key_valid, causal)?.0)
    }

    /// Also returns the per-head attention matrices `[T_q, T_k]`. Queries with
    /// no admissible key get an all-zero weight row and hence a zero context
    /// vector before the output projection.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        q_in: Var,
        kv_in: Var,
        key_valid: Option<&[bool]>,
        causal: bool,
    ) -> Result<(Var, Vec<Var>)> {
        for x in [q_in, kv_in] {
            if g.shape(x).len() != 2 || g.shape(x)[1] != self.d_model {
                return Err(Error::Config(format!(
                    "attention expects width {}, got {:?}",
                    self.d_model,
                    g.shape(x)
                )));
            }
        }
        let q = self.q.forward(g, q_in)?;
        let k = self.k.forward(g, kv_in)?;
        let v = self.v.forward(g, kv_in)?;
        let dk = self.d_model / self.n_head;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_head);
        let mut weights = Vec::with_capacity(self.n_head);
        for h in 0..self.n_head {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let p = g.softmax_masked(s, key_valid, causal)?;
            heads.push(g.matmul(p, vh)?);
            weights.push(p);
        }
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        Ok((self.o.forward(g, ctx)?, weights))
    }
}

/// Residual cross-attention: `stream + Attn(LN(query), LN(kv))`, where
/// `query` has already been aligned to the stream length.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub att: MultiHeadAttention,
}

impl CrossAttention {
    pub fn new(b: &mut Builder, d_model: usize, n_head: usize) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(&mut b.pp("ln_q"), d_model)?,
            ln_kv: LayerNorm::new(&mut b.pp("ln_kv"), d_model)?,
            att: MultiHeadAttention::new(&mut b.pp("att"), d_model, n_head)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        stream: Var,
        query: Var,
        kv: Var,
        kv_valid: &[bool],
        out_valid: &[bool],
    ) -> Result<Var> {
        if g.shape(stream)[0] != g.shape(query)[0] {
            return Err(Error::LengthMismatch {
                what: "cross-attention query".into(),
                expected: g.shape(stream)[0],
                got: g.shape(query)[0],
            });
        }
        let q = self.ln_q.forward(g, query)?;
        let kv = self.ln_kv.forward(g, kv)?;
        let a = self.att.forward(g, q, kv, Some(kv_valid), false)?;
        let a = g.mask_rows(a, out_valid)?;
        Ok(g.add(stream, a)?)
    }
}

/// Truncates or zero-extends `x` to `len` rows and zeroes invalid rows.
pub fn align_rows(g: &mut Graph, x: Var, valid: &[bool]) -> Result<Var> {
    let r = g.resize_rows(x, valid.len());
    Ok(g.mask_rows(r, valid)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use avsr_autograd::{ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mha() -> (ParamStore, MultiHeadAttention) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MultiHeadAttention::new(&mut Builder::new(&mut ps, &mut rng), 8, 2).unwrap();
        (ps, m)
    }

    #[test]
    fn rows_sum_to_one_over_valid_keys() {
        let (ps, m) = mha();
        let mut g = Graph::new(&ps);
        let q = g.constant(random(&[5, 8], 2));
        let kv = g.constant(random(&[7, 8], 3));
        let valid = [true, true, false, true, true, false, true];
        let (_, w) = m.forward_with_weights(&mut g, q, kv, Some(&valid), false).unwrap();
        for p in w {
            let p = g.value(p);
            for i in 0..5 {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(p.at(i, 2), 0.0);
            }
        }
    }

    #[test]
    fn single_valid_key_returns_its_value_projection() {
        let (ps, m) = mha();
        let mut g = Graph::new(&ps);
        let q = g.constant(random(&[3, 8], 2));
        let kv_t = random(&[4, 8], 3);
        let kv = g.constant(kv_t.clone());
        let out = m.forward(&mut g, q, kv, Some(&[false, false, true, false]), false).unwrap();
        let key = g.constant(kv_t.slice_rows(2, 1));
        let v = m.v.forward(&mut g, key).unwrap();
        let expected = m.o.forward(&mut g, v).unwrap();
        for i in 0..3 {
            for j in 0..8 {
                assert!((g.value(out).at(i, j) - g.value(expected).at(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_key_perturbation_is_invisible() {
        let (ps, m) = mha();
        let valid = [true, true, true, false, false];
        let kv = random(&[5, 8], 3);
        let mut kv2 = kv.clone();
        kv2.row_mut(3).iter_mut().for_each(|v| *v += 10.0);
        let mut g = Graph::new(&ps);
        let q = g.constant(random(&[4, 8], 2));
        let a = g.constant(kv);
        let b = g.constant(kv2);
        let oa = m.forward(&mut g, q, a, Some(&valid), false).unwrap();
        let ob = m.forward(&mut g, q, b, Some(&valid), false).unwrap();
        assert!(g.value(oa).max_abs_diff(g.value(ob)) < 1e-12);
    }

    #[test]
    fn fully_masked_query_gets_zero_context() {
        let (ps, m) = mha();
        let mut g = Graph::new(&ps);
        let q = g.constant(random(&[2, 8], 2));
        let kv = g.constant(random(&[3, 8], 3));
        let out = m.forward(&mut g, q, kv, Some(&[false; 3]), false).unwrap();
        let bias = ps.get(m.o.b.unwrap()).clone();
        for i in 0..2 {
            assert_eq!(g.value(out).row(i), bias.data());
        }
    }

    #[test]
    fn head_divisibility() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(MultiHeadAttention::new(&mut Builder::new(&mut ps, &mut rng), 10, 4).is_err());
    }
}
