//! Audio and visual frontends and the 4x temporal upsampler.
//!
//! All modules take a per-frame validity mask so that padded batches give the
//! same valid outputs as unpadded inputs.

use avsr_autograd::nn::{Builder, Linear};
use avsr_autograd::{Conv3dSpec, Graph, ParamId, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Output length of two stride-2, kernel-3, padding-1 convolutions.
pub fn audio_out_len(t: usize) -> usize {
    t.div_ceil(2).div_ceil(2)
}

pub fn valid_mask(len: usize, total: usize) -> Vec<bool> {
    (0..total).map(|i| i < len).collect()
}

fn count_valid(valid: &[bool]) -> usize {
    valid.iter().take_while(|&&v| v).count()
}

/// Sinusoidal absolute position table, `[t, d]`.
pub fn sinusoid(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(&[t, d], data).expect("sinusoid shape")
}

/// Convolution over `[T, H, W, Cin]` followed by a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv3dSpec,
}

impl Conv {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, spec: Conv3dSpec, bias: bool) -> Result<Self> {
        let fan_in = spec.kernel.iter().product::<usize>() * cin;
        Ok(Self {
            w: b.he_uniform("w", &[fan_in, cout], fan_in)?,
            b: if bias { Some(b.zeros("b", &[cout])?) } else { None },
            spec,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.conv3d(x, w, self.spec)?;
        let Some(bias) = self.b else { return Ok(y) };
        let shape = g.shape(y).to_vec();
        let c = shape[3];
        let flat = g.reshape(y, &[shape[0] * shape[1] * shape[2], c])?;
        let bias = g.param(bias);
        let flat = g.add_row(flat, bias)?;
        Ok(g.reshape(flat, &shape)?)
    }
}

fn time_conv(k: usize, stride: usize, pad: usize) -> Conv3dSpec {
    Conv3dSpec {
        kernel: [k, 1, 1],
        stride: [stride, 1, 1],
        pad: [pad, 0, 0],
    }
}

/// Two stride-2 temporal convolutions and a linear map to `d_model`.
#[derive(Clone, Debug)]
pub struct AudioFrontend {
    pub conv1: Conv,
    pub conv2: Conv,
    pub proj: Linear,
    pub feature_dim: usize,
    pub d_model: usize,
}

impl AudioFrontend {
    pub fn new(b: &mut Builder, feature_dim: usize, d_model: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(&mut b.pp("conv1"), feature_dim, d_model, time_conv(3, 2, 1), true)?,
            conv2: Conv::new(&mut b.pp("conv2"), d_model, d_model, time_conv(3, 2, 1), true)?,
            proj: Linear::new(&mut b.pp("proj"), d_model, d_model)?,
            feature_dim,
            d_model,
        })
    }

    /// `[T, D]` features with validity flags to `[audio_out_len(T), d_model]`.
    pub fn forward(&self, g: &mut Graph, x: Var, valid: &[bool]) -> Result<Var> {
        let [t, d] = [g.shape(x)[0], g.shape(x)[1]];
        if d != self.feature_dim || g.shape(x).len() != 2 {
            return Err(Error::Config(format!(
                "audio frontend expects [T, {}], got {:?}",
                self.feature_dim,
                g.shape(x)
            )));
        }
        let n = count_valid(valid);
        let x = g.mask_rows(x, valid)?;
        let x = g.reshape(x, &[t, 1, 1, d])?;
        let h = self.conv1.forward(g, x)?;
        let h = g.silu(h);
        let t1 = g.shape(h)[0];
        let h = g.mask_rows(h, &valid_mask(n.div_ceil(2), t1))?;
        let h = self.conv2.forward(g, h)?;
        let h = g.silu(h);
        let t2 = g.shape(h)[0];
        let h = g.reshape(h, &[t2, self.d_model])?;
        let h = self.proj.forward(g, h)?;
        Ok(g.mask_rows(h, &valid_mask(audio_out_len(n), t2))?)
    }
}

/// Standardizes every frame of `[T_v, H, W]` to zero mean and unit variance
/// over its pixels. Constant frames become zero.
pub fn standardize_frames(video: &Tensor) -> Tensor {
    let mut out = video.clone();
    let hw: usize = video.shape()[1..].iter().product();
    if hw == 0 {
        return out;
    }
    for frame in out.data_mut().chunks_mut(hw) {
        let mean = frame.iter().sum::<f64>() / hw as f64;
        let var = frame.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / hw as f64;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        frame.iter_mut().for_each(|x| *x = (*x - mean) * inv);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualFrontendConfig {
    /// Stem output channels followed by the output channels of each
    /// residual block.
    pub channels: Vec<usize>,
}

impl Default for VisualFrontendConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 64, 64],
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResBlock {
    /// Blocks that widen the channel count also halve the spatial size.
    fn new(b: &mut Builder, cin: usize, cout: usize) -> Result<Self> {
        let s = if cout > cin { 2 } else { 1 };
        let k3 = |stride: usize| Conv3dSpec {
            kernel: [1, 3, 3],
            stride: [1, stride, stride],
            pad: [0, 1, 1],
        };
        let k1 = Conv3dSpec {
            kernel: [1, 1, 1],
            stride: [1, s, s],
            pad: [0, 0, 0],
        };
        Ok(Self {
            conv1: Conv::new(&mut b.pp("conv1"), cin, cout, k3(s), true)?,
            conv2: Conv::new(&mut b.pp("conv2"), cout, cout, k3(1), true)?,
            shortcut: if cin != cout || s != 1 {
                Some(Conv::new(&mut b.pp("shortcut"), cin, cout, k1, false)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        let y = g.add(h, s)?;
        Ok(g.silu(y))
    }
}

/// 3-D convolution stem, residual 2-D blocks, spatial average pooling and a
/// linear map to `d_model`.
#[derive(Clone, Debug)]
pub struct VisualFrontend {
    stem: Conv,
    res: Vec<ResBlock>,
    proj: Linear,
    pub height: usize,
    pub width: usize,
}

impl VisualFrontend {
    pub const STEM: Conv3dSpec = Conv3dSpec {
        kernel: [3, 3, 3],
        stride: [1, 2, 2],
        pad: [1, 1, 1],
    };

    /// `b` should be scoped at the visual branch (names `stem.*`, `res.{i}.*`,
    /// `proj.*`).
    pub fn new(b: &mut Builder, cfg: &VisualFrontendConfig, height: usize, width: usize, d_model: usize) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.channels.contains(&0) {
            return Err(Error::Config("visual frontend needs positive channel counts".into()));
        }
        let stem = Conv::new(&mut b.pp("stem"), 1, cfg.channels[0], Self::STEM, true)?;
        let res = cfg
            .channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| ResBlock::new(&mut b.pp(format!("res.{i}")), w[0], w[1]))
            .collect::<Result<_>>()?;
        let last = *cfg.channels.last().unwrap();
        Ok(Self {
            stem,
            res,
            proj: Linear::new(&mut b.pp("proj"), last, d_model)?,
            height,
            width,
        })
    }

    /// `[T_v, H, W]` frames to `[T_v, d_model]`.
    pub fn forward(&self, g: &mut Graph, v: Var, valid: &[bool]) -> Result<Var> {
        let shape = g.shape(v).to_vec();
        if shape.len() != 3 || shape[1] != self.height || shape[2] != self.width {
            return Err(Error::Config(format!(
                "visual frontend expects [T_v, {}, {}], got {shape:?}",
                self.height, self.width
            )));
        }
        let v = g.mask_rows(v, valid)?;
        let x = g.reshape(v, &[shape[0], shape[1], shape[2], 1])?;
        let h = self.stem.forward(g, x)?;
        let mut h = g.silu(h);
        for r in &self.res {
            h = r.forward(g, h)?;
        }
        let pooled = g.mean_spatial(h)?;
        let out = self.proj.forward(g, pooled)?;
        Ok(g.mask_rows(out, valid)?)
    }
}

/// Two transposed temporal convolutions (kernel 4, stride 2, padding 1),
/// giving exactly four output frames per input frame.
#[derive(Clone, Debug)]
pub struct Upsampler {
    l1: (ParamId, ParamId),
    l2: (ParamId, ParamId),
}

impl Upsampler {
    const K: usize = 4;

    pub fn new(b: &mut Builder, d_model: usize) -> Result<Self> {
        let mut layer = |name: &str| -> Result<(ParamId, ParamId)> {
            let mut s = b.pp(name);
            Ok((
                s.uniform("w", &[d_model, Self::K * d_model], d_model * 2)?,
                s.uniform("b", &[d_model], d_model * 2)?,
            ))
        };
        Ok(Self {
            l1: layer("l1")?,
            l2: layer("l2")?,
        })
    }

    fn layer(g: &mut Graph, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let w = g.param(w);
        let y = g.conv_transpose1d(x, w, Self::K, 2, 1)?;
        let b = g.param(b);
        Ok(g.add_row(y, b)?)
    }

    /// `[T_v, d]` to `[4 T_v, d]`.
    pub fn forward(&self, g: &mut Graph, x: Var, valid: &[bool]) -> Result<Var> {
        let n = count_valid(valid);
        let x = g.mask_rows(x, valid)?;
        let h = Self::layer(g, x, self.l1)?;
        let h = g.silu(h);
        let t1 = g.shape(h)[0];
        let h = g.mask_rows(h, &valid_mask(2 * n, t1))?;
        let h = Self::layer(g, h, self.l2)?;
        let t2 = g.shape(h)[0];
        Ok(g.mask_rows(h, &valid_mask(4 * n, t2))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use avsr_autograd::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn audio_lengths() {
        assert_eq!(audio_out_len(48), 12);
        assert_eq!(audio_out_len(100), 25);
        assert_eq!(audio_out_len(1), 1);
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fe = AudioFrontend::new(&mut Builder::new(&mut ps, &mut rng).pp("audio.frontend"), 80, 16).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.constant(random(&[48, 80], 1));
        let y = fe.forward(&mut g, x, &[true; 48]).unwrap();
        assert_eq!(g.shape(y), &[12, 16]);
        let x = g.constant(random(&[48, 79], 1));
        assert!(matches!(fe.forward(&mut g, x, &[true; 48]), Err(Error::Config(_))));
    }

    #[test]
    fn audio_padding_invariance() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fe = AudioFrontend::new(&mut Builder::new(&mut ps, &mut rng), 6, 8).unwrap();
        let x = random(&[22, 6], 2);
        let padded = Tensor::new(&[30, 6], {
            let mut d = x.data().to_vec();
            d.extend(random(&[8, 6], 3).into_data());
            d
        })
        .unwrap();
        let mut g = Graph::new(&ps);
        let a = g.constant(x);
        let a = fe.forward(&mut g, a, &[true; 22]).unwrap();
        let b = g.constant(padded);
        let b = fe.forward(&mut g, b, &valid_mask(22, 30)).unwrap();
        let n = audio_out_len(22);
        assert_eq!(g.shape(a)[0], n);
        assert!(g.value(b).slice_rows(0, n).max_abs_diff(g.value(a)) < 1e-12);
    }

    #[test]
    fn visual_shapes_and_zero_input() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = VisualFrontendConfig { channels: vec![4, 8] };
        let fe = VisualFrontend::new(&mut Builder::new(&mut ps, &mut rng).pp("visual"), &cfg, 8, 8, 32).unwrap();
        ps.set("visual.proj.b", Tensor::zeros(&[32])).unwrap();
        assert!(ps.id("visual.res.0.shortcut.w").is_some());
        let mut g = Graph::new(&ps);
        let v = g.constant(Tensor::zeros(&[12, 8, 8]));
        let y = fe.forward(&mut g, v, &[true; 12]).unwrap();
        assert_eq!(g.shape(y), &[12, 32]);
        assert!(g.value(y).is_finite());
        let v = g.constant(Tensor::zeros(&[12, 8, 9]));
        assert!(matches!(fe.forward(&mut g, v, &[true; 12]), Err(Error::Config(_))));
    }

    #[test]
    fn upsampler_length_contract() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let up = Upsampler::new(&mut Builder::new(&mut ps, &mut rng).pp("upsampler"), 4).unwrap();
        for t in [1, 25] {
            let mut g = Graph::new(&ps);
            let x = g.constant(random(&[t, 4], t as u64));
            let y = up.forward(&mut g, x, &vec![true; t]).unwrap();
            assert_eq!(g.shape(y), &[4 * t, 4]);
        }
    }

    #[test]
    fn sinusoid_first_rows() {
        let p = sinusoid(2, 4);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.at(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((p.at(1, 3) - (0.01f64).cos()).abs() < 1e-15);
    }
}
