//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters
//! are read straight out of a borrowed [`ParamStore`] so building a graph never
//! copies weights. [`Graph::backward`] walks the tape in reverse and returns the
//! parameter gradients.

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::gemm;
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Kernel geometry for [`Graph::conv3d`] over `[T, H, W, C]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dSpec {
    pub fn out_dims(&self, t: usize, h: usize, w: usize) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (i, n) in [t, h, w].into_iter().enumerate() {
            let padded = n + 2 * self.pad[i];
            if padded < self.kernel[i] || self.stride[i] == 0 {
                return Err(Error::Shape(format!(
                    "conv axis {i}: length {n} too short for kernel {}",
                    self.kernel[i]
                )));
            }
            out[i] = (padded - self.kernel[i]) / self.stride[i] + 1;
        }
        Ok(out)
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Silu(Var),
    Relu(Var),
    Sigmoid(Var),
    Glu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ResizeRows(Var),
    MaskRows { a: Var, keep: Vec<bool> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    DepthwiseConv1d { x: Var, w: Var },
    Conv3d { x: Var, w: Var, spec: Conv3dSpec, cols: Vec<f64> },
    ConvTranspose1d { x: Var, w: Var, stride: usize, pad: usize },
    MeanSpatial(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f64 },
    CustomScalar { x: Var, grad: Tensor },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn mm(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = if b_t {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}{}",
                av.shape(),
                bv.shape(),
                if b_t { "^T" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), b_t, &mut out, 0.0);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, b_t }))
    }

    /// `a @ b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false)
    }

    /// `a @ b^T` for 2-D operands.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, true)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "elementwise {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.len() != c {
            return Err(Error::Shape(format!(
                "row broadcast of {:?} onto {:?}",
                rv.shape(),
                av.shape()
            )));
        }
        let mut t = av.clone();
        for r in t.data_mut().chunks_mut(c.max(1)) {
            for (x, y) in r.iter_mut().zip(rv.data()) {
                if mul {
                    *x *= y
                } else {
                    *x += y
                }
            }
        }
        let op = if mul {
            Op::MulRow { a, row }
        } else {
            Op::AddRow { a, row }
        };
        Ok(self.push(t, op))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push(t, Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// Gated linear unit over the column axis: `x[:, :c] * sigmoid(x[:, c:])`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c2) = (av.rows(), av.cols());
        if c2 % 2 != 0 {
            return Err(Error::Shape(format!("glu needs even width, got {c2}")));
        }
        let c = c2 / 2;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = av.row(i);
            out.extend((0..c).map(|j| row[j] * sigmoid(row[c + j])));
        }
        let t = Tensor::new(&[r, c], out)?;
        Ok(self.push(t, Op::Glu(a)))
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c {
            return Err(Error::Shape(format!(
                "layer_norm width {c} vs gamma {:?}",
                gv.shape()
            )));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax. `key_valid` masks columns, `causal` masks `j > i`.
    /// Rows with no admissible column produce all zeros.
    pub fn softmax_masked(
        &mut self,
        x: Var,
        key_valid: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(m) = key_valid {
            if m.len() != c {
                return Err(Error::Shape(format!("mask length {} vs width {c}", m.len())));
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let ok = |j: usize| key_valid.is_none_or(|m| m[j]) && (!causal || j <= i);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut s = 0.0;
            for j in 0..c {
                if ok(j) {
                    o[j] = (row[j] - mx).exp();
                    s += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None, false)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut t = xv.clone();
        for row in t.data_mut().chunks_mut(c.max(1)) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(t, Op::LogSoftmax(x))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if start + len > c {
            return Err(Error::Shape(format!("slice {start}+{len} of width {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let t = Tensor::new(&[r, len], out)?;
        Ok(self.push(t, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::Shape("concat_cols with ragged row counts".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(&[r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Truncates to, or zero-extends up to, `rows` leading-axis entries.
    pub fn resize_rows(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        let t = if rows <= av.rows() {
            av.slice_rows(0, rows)
        } else {
            av.pad_rows(rows - av.rows(), 0.0)
        };
        self.push(t, Op::ResizeRows(a))
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let av = self.value(a);
        if keep.len() != av.rows() {
            return Err(Error::Shape(format!(
                "row mask length {} vs {} rows",
                keep.len(),
                av.rows()
            )));
        }
        let mut t = av.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                t.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(self.push(
            t,
            Op::MaskRows {
                a,
                keep: keep.to_vec(),
            },
        ))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Shape(format!("embedding id {id} >= table size {v}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Per-channel convolution over time for `[T, C]` inputs with a `[k, C]`
    /// kernel, "same" zero padding (`k` odd).
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (t, c) = (xv.rows(), xv.cols());
        let k = wv.rows();
        if wv.cols() != c || k % 2 == 0 {
            return Err(Error::Shape(format!(
                "depthwise kernel {:?} for width {c}",
                wv.shape()
            )));
        }
        let p = k / 2;
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            let o = &mut out[ti * c..(ti + 1) * c];
            for j in 0..k {
                let src = ti + j;
                if src < p || src - p >= t {
                    continue;
                }
                let xr = xv.row(src - p);
                let wr = wv.row(j);
                for ci in 0..c {
                    o[ci] += xr[ci] * wr[ci];
                }
            }
        }
        let out = Tensor::new(&[t, c], out)?;
        Ok(self.push(out, Op::DepthwiseConv1d { x, w }))
    }

    /// Dense convolution over `[T, H, W, Cin]` inputs with a
    /// `[kt*kh*kw*Cin, Cout]` weight; output `[T', H', W', Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, spec: Conv3dSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 4 {
            return Err(Error::Shape(format!("conv3d input {:?}", xv.shape())));
        }
        let [t, h, wd, cin] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let [kt, kh, kw] = spec.kernel;
        let kdim = kt * kh * kw * cin;
        if wv.rows() != kdim {
            return Err(Error::Shape(format!(
                "conv3d weight {:?}, expected {kdim} rows",
                wv.shape()
            )));
        }
        let cout = wv.cols();
        let [ot, oh, ow] = spec.out_dims(t, h, wd)?;
        let npos = ot * oh * ow;
        let mut cols = vec![0.0; npos * kdim];
        let xd = xv.data();
        for a in 0..ot {
            for b in 0..oh {
                for c in 0..ow {
                    let base = ((a * oh + b) * ow + c) * kdim;
                    for jt in 0..kt {
                        let it = (a * spec.stride[0] + jt) as isize - spec.pad[0] as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for jh in 0..kh {
                            let ih = (b * spec.stride[1] + jh) as isize - spec.pad[1] as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for jw in 0..kw {
                                let iw =
                                    (c * spec.stride[2] + jw) as isize - spec.pad[2] as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                let src = (((it as usize * h + ih as usize) * wd) + iw as usize)
                                    * cin;
                                let dst = base + ((jt * kh + jh) * kw + jw) * cin;
                                cols[dst..dst + cin].copy_from_slice(&xd[src..src + cin]);
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; npos * cout];
        gemm(npos, kdim, cout, &cols, false, wv.data(), false, &mut out, 0.0);
        let out = Tensor::new(&[ot, oh, ow, cout], out)?;
        Ok(self.push(out, Op::Conv3d { x, w, spec, cols }))
    }

    /// Transposed convolution over time: `[T, Cin]` with a `[Cin, k*Cout]`
    /// weight gives `[(T-1)*stride - 2*pad + k, Cout]`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (t, cin) = (xv.rows(), xv.cols());
        if wv.rows() != cin || wv.cols() % k != 0 {
            return Err(Error::Shape(format!(
                "conv_transpose1d weight {:?} for input width {cin}, kernel {k}",
                wv.shape()
            )));
        }
        let cout = wv.cols() / k;
        let full = (t - 1) * stride + k;
        if full < 2 * pad + 1 {
            return Err(Error::Shape("conv_transpose1d output would be empty".into()));
        }
        let out_len = full - 2 * pad;
        let mut z = vec![0.0; t * k * cout];
        gemm(t, cin, k * cout, xv.data(), false, wv.data(), false, &mut z, 0.0);
        let mut out = vec![0.0; out_len * cout];
        for ti in 0..t {
            for j in 0..k {
                let pos = ti * stride + j;
                if pos < pad || pos - pad >= out_len {
                    continue;
                }
                let o = (pos - pad) * cout;
                let zs = (ti * k + j) * cout;
                for c in 0..cout {
                    out[o + c] += z[zs + c];
                }
            }
        }
        let out = Tensor::new(&[out_len, cout], out)?;
        Ok(self.push(
            out,
            Op::ConvTranspose1d {
                x,
                w,
                stride,
                pad,
            },
        ))
    }

    /// Averages `[T, H, W, C]` over the spatial axes, giving `[T, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 4 {
            return Err(Error::Shape(format!("mean_spatial input {:?}", xv.shape())));
        }
        let [t, h, w, c] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let hw = h * w;
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            for p in 0..hw {
                let src = (ti * hw + p) * c;
                for ci in 0..c {
                    out[ti * c + ci] += xv.data()[src + ci];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= hw as f64);
        let out = Tensor::new(&[t, c], out)?;
        Ok(self.push(out, Op::MeanSpatial(x)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Summed cross entropy of row-wise logits against integer targets with
    /// uniform label smoothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if targets.len() != r {
            return Err(Error::Shape(format!(
                "{} targets for {r} logit rows",
                targets.len()
            )));
        }
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(Error::Shape(format!("target {y} >= classes {c}")));
            }
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            let mean_logp = row.iter().map(|v| v - lse).sum::<f64>() / c as f64;
            loss -= (1.0 - smoothing) * (row[y] - lse) + smoothing * mean_logp;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
            },
        ))
    }

    /// Attaches an externally computed scalar `value` of `x` together with
    /// `d value / d x`.
    pub fn custom_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::Shape(format!(
                "custom gradient {:?} vs input {:?}",
                grad.shape(),
                self.value(x).shape()
            )));
        }
        Ok(self.push(Tensor::scalar(value), Op::CustomScalar { x, grad }))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::new(self.params.len());
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Grads,
    ) {
        let node = &self.nodes[i];
        let y = self.value(Var(i));
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.add_slice(*id, self.params.get(*id).shape(), g),
            Op::MatMul { a, b, b_t } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = y.cols();
                // dA = G * B'^T
                let ga = self.acc(grads, *a);
                gemm(m, n, k, g, false, bv.data(), !*b_t, ga, 1.0);
                let gb = self.acc(grads, *b);
                if *b_t {
                    // B is n x k: dB = G^T * A
                    gemm(n, m, k, g, true, av.data(), false, gb, 1.0);
                } else {
                    // dB = A^T * G
                    gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                add_into(self.acc(grads, *a), g);
                add_into(self.acc(grads, *b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.acc(grads, *a), g);
                self.acc(grads, *b).iter_mut().zip(g).for_each(|(x, d)| *x -= d);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = self.acc(grads, *a);
                for j in 0..g.len() {
                    ga[j] += g[j] * bv[j];
                }
                let gb = self.acc(grads, *b);
                for j in 0..g.len() {
                    gb[j] += g[j] * av[j];
                }
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a).iter_mut().zip(g).for_each(|(x, d)| *x += d * s);
            }
            Op::AddRow { a, row } => {
                add_into(self.acc(grads, *a), g);
                let c = self.value(*row).len();
                let gr = self.acc(grads, *row);
                for chunk in g.chunks(c.max(1)) {
                    add_into(gr, chunk);
                }
            }
            Op::MulRow { a, row } => {
                let rv = self.value(*row).data();
                let av = self.value(*a).data();
                let c = rv.len();
                let ga = self.acc(grads, *a);
                for (j, d) in g.iter().enumerate() {
                    ga[j] += d * rv[j % c];
                }
                let gr = self.acc(grads, *row);
                for (j, d) in g.iter().enumerate() {
                    gr[j % c] += d * av[j];
                }
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                let ga = self.acc(grads, *a);
                for j in 0..g.len() {
                    let s = sigmoid(av[j]);
                    ga[j] += g[j] * s * (1.0 + av[j] * (1.0 - s));
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let ga = self.acc(grads, *a);
                for j in 0..g.len() {
                    if av[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let yd = y.data();
                let ga = self.acc(grads, *a);
                for j in 0..g.len() {
                    ga[j] += g[j] * yd[j] * (1.0 - yd[j]);
                }
            }
            Op::Glu(a) => {
                let av = self.value(*a);
                let c = av.cols() / 2;
                let r = av.rows();
                let mut local = vec![0.0; r * 2 * c];
                for i in 0..r {
                    let row = av.row(i);
                    for j in 0..c {
                        let s = sigmoid(row[c + j]);
                        let d = g[i * c + j];
                        local[i * 2 * c + j] = d * s;
                        local[i * 2 * c + c + j] = d * row[j] * s * (1.0 - s);
                    }
                }
                add_into(self.acc(grads, *a), &local);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).len();
                let gv = self.value(*gamma).data().to_vec();
                let r = rstd.len();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    let hi = &xhat[i * c..(i + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        dgamma[j] += gi[j] * hi[j];
                        dbeta[j] += gi[j];
                        let dh = gi[j] * gv[j];
                        sum_d += dh;
                        sum_dh += dh * hi[j];
                    }
                    for j in 0..c {
                        let dh = gi[j] * gv[j];
                        dx[i * c + j] =
                            rstd[i] * (dh - sum_d / c as f64 - hi[j] * sum_dh / c as f64);
                    }
                }
                add_into(self.acc(grads, *x), &dx);
                add_into(self.acc(grads, *gamma), &dgamma);
                add_into(self.acc(grads, *beta), &dbeta);
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let yd = y.data();
                let gx = self.acc(grads, *x);
                for i in 0..y.rows() {
                    let yr = &yd[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                let yd = y.data();
                let gx = self.acc(grads, *x);
                for i in 0..y.rows() {
                    let gr = &g[i * c..(i + 1) * c];
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        gx[i * c + j] += gr[j] - yd[i * c + j].exp() * s;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let c = self.value(*a).cols();
                let len = y.cols();
                let ga = self.acc(grads, *a);
                for i in 0..y.rows() {
                    add_into(
                        &mut ga[i * c + start..i * c + start + len],
                        &g[i * len..(i + 1) * len],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let gp = self.acc(grads, p);
                    for i in 0..y.rows() {
                        add_into(
                            &mut gp[i * c..(i + 1) * c],
                            &g[i * total + off..i * total + off + c],
                        );
                    }
                    off += c;
                }
            }
            Op::ResizeRows(a) => {
                let n = self.value(*a).len().min(g.len());
                add_into(&mut self.acc(grads, *a)[..n], &g[..n]);
            }
            Op::MaskRows { a, keep } => {
                let c = y.cols();
                let ga = self.acc(grads, *a);
                for (i, &k) in keep.iter().enumerate() {
                    if k {
                        add_into(&mut ga[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = y.cols();
                let gt = self.acc(grads, *table);
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                }
            }
            Op::Reshape(a) => add_into(self.acc(grads, *a), g),
            Op::DepthwiseConv1d { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (t, c) = (xv.rows(), xv.cols());
                let k = wv.rows();
                let p = k / 2;
                let mut dx = vec![0.0; t * c];
                let mut dw = vec![0.0; k * c];
                for ti in 0..t {
                    let gr = &g[ti * c..(ti + 1) * c];
                    for j in 0..k {
                        let src = ti + j;
                        if src < p || src - p >= t {
                            continue;
                        }
                        let s = src - p;
                        let xr = xv.row(s);
                        let wr = wv.row(j);
                        for ci in 0..c {
                            dx[s * c + ci] += gr[ci] * wr[ci];
                            dw[j * c + ci] += gr[ci] * xr[ci];
                        }
                    }
                }
                add_into(self.acc(grads, *x), &dx);
                add_into(self.acc(grads, *w), &dw);
            }
            Op::Conv3d { x, w, spec, cols } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [t, h, wd, cin] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
                let kdim = wv.rows();
                let cout = wv.cols();
                let [ot, oh, ow] = [y.shape()[0], y.shape()[1], y.shape()[2]];
                let npos = ot * oh * ow;
                let gw = self.acc(grads, *w);
                gemm(kdim, npos, cout, cols, true, g, false, gw, 1.0);
                let mut dcols = vec![0.0; npos * kdim];
                gemm(npos, cout, kdim, g, false, wv.data(), true, &mut dcols, 0.0);
                let [kt, kh, kw] = spec.kernel;
                let gx = self.acc(grads, *x);
                for a in 0..ot {
                    for b in 0..oh {
                        for c in 0..ow {
                            let base = ((a * oh + b) * ow + c) * kdim;
                            for jt in 0..kt {
                                let it = (a * spec.stride[0] + jt) as isize - spec.pad[0] as isize;
                                if it < 0 || it >= t as isize {
                                    continue;
                                }
                                for jh in 0..kh {
                                    let ih =
                                        (b * spec.stride[1] + jh) as isize - spec.pad[1] as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for jw in 0..kw {
                                        let iw = (c * spec.stride[2] + jw) as isize
                                            - spec.pad[2] as isize;
                                        if iw < 0 || iw >= wd as isize {
                                            continue;
                                        }
                                        let dst = (((it as usize * h + ih as usize) * wd)
                                            + iw as usize)
                                            * cin;
                                        let src = base + ((jt * kh + jh) * kw + jw) * cin;
                                        add_into(&mut gx[dst..dst + cin], &dcols[src..src + cin]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ConvTranspose1d { x, w, stride, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (t, cin) = (xv.rows(), xv.cols());
                let cout = y.cols();
                let k = wv.cols() / cout;
                let out_len = y.rows();
                let mut dz = vec![0.0; t * k * cout];
                for ti in 0..t {
                    for j in 0..k {
                        let pos = ti * stride + j;
                        if pos < *pad || pos - pad >= out_len {
                            continue;
                        }
                        let o = (pos - pad) * cout;
                        let zs = (ti * k + j) * cout;
                        dz[zs..zs + cout].copy_from_slice(&g[o..o + cout]);
                    }
                }
                let gx = self.acc(grads, *x);
                gemm(t, k * cout, cin, &dz, false, wv.data(), true, gx, 1.0);
                let gw = self.acc(grads, *w);
                gemm(cin, t, k * cout, xv.data(), true, &dz, false, gw, 1.0);
            }
            Op::MeanSpatial(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (t, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
                let gx = self.acc(grads, *x);
                for ti in 0..t {
                    for p in 0..hw {
                        let dst = (ti * hw + p) * c;
                        for ci in 0..c {
                            gx[dst + ci] += g[ti * c + ci] / hw as f64;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let d = g[0];
                self.acc(grads, *a).iter_mut().for_each(|x| *x += d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let d = g[0];
                let mut dl = vec![0.0; lv.len()];
                for (i, &yi) in targets.iter().enumerate() {
                    let row = lv.row(i);
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let q = smoothing / c as f64 + if j == yi { 1.0 - smoothing } else { 0.0 };
                        dl[i * c + j] = d * ((row[j] - lse).exp() - q);
                    }
                }
                add_into(self.acc(grads, *logits), &dl);
            }
            Op::CustomScalar { x, grad } => {
                let d = g[0];
                self.acc(grads, *x)
                    .iter_mut()
                    .zip(grad.data())
                    .for_each(|(a, b)| *a += d * b);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sum(exp(xs)))`, returning `-inf` for empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}
