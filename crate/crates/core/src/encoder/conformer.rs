use avsr_autograd::nn::{Builder, LayerNorm, Linear};
use avsr_autograd::{Graph, ParamId, Var};

use super::attention::MultiHeadAttention;
use super::ConformerConfig;
use crate::Result;

#[derive(Clone, Debug)]
pub struct FeedForward {
    ln: LayerNorm,
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, d_model: usize, d_ffn: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(&mut b.pp("ln"), d_model)?,
            l1: Linear::new(&mut b.pp("l1"), d_model, d_ffn)?,
            l2: Linear::new(&mut b.pp("l2"), d_ffn, d_model)?,
        })
    }

    /// Without the residual connection.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln.forward(g, x)?;
        let h = self.l1.forward(g, h)?;
        let h = g.silu(h);
        Ok(self.l2.forward(g, h)?)
    }
}

/// Pointwise expansion with GLU, depthwise temporal convolution,
/// normalization, SiLU and a pointwise projection.
#[derive(Clone, Debug)]
pub struct ConvModule {
    ln: LayerNorm,
    pw1: Linear,
    dw_w: ParamId,
    dw_b: ParamId,
    ln2: LayerNorm,
    pw2: Linear,
}

impl ConvModule {
    pub fn new(b: &mut Builder, d_model: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(&mut b.pp("ln"), d_model)?,
            pw1: Linear::new(&mut b.pp("pw1"), d_model, 2 * d_model)?,
            dw_w: b.uniform("dw.w", &[kernel, d_model], kernel)?,
            dw_b: b.uniform("dw.b", &[d_model], kernel)?,
            ln2: LayerNorm::new(&mut b.pp("ln2"), d_model)?,
            pw2: Linear::new(&mut b.pp("pw2"), d_model, d_model)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, valid: &[bool]) -> Result<Var> {
        let h = self.ln.forward(g, x)?;
        let h = self.pw1.forward(g, h)?;
        let h = g.glu(h)?;
        let h = g.mask_rows(h, valid)?;
        let w = g.param(self.dw_w);
        let h = g.depthwise_conv1d(h, w)?;
        let bias = g.param(self.dw_b);
        let h = g.add_row(h, bias)?;
        let h = self.ln2.forward(g, h)?;
        let h = g.silu(h);
        Ok(self.pw2.forward(g, h)?)
    }
}

pub type InnerHook<'h> = &'h mut dyn FnMut(&mut Graph, Var) -> Result<Var>;

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    ff1: FeedForward,
    mhsa_ln: LayerNorm,
    pub mhsa: MultiHeadAttention,
    conv: ConvModule,
    ff2: FeedForward,
    ln_out: LayerNorm,
    d_model: usize,
}

impl ConformerBlock {
    pub fn new(b: &mut Builder, cfg: &ConformerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ff1: FeedForward::new(&mut b.pp("ff1"), cfg.d_model, cfg.d_ffn)?,
            mhsa_ln: LayerNorm::new(&mut b.pp("mhsa.ln"), cfg.d_model)?,
            mhsa: MultiHeadAttention::new(&mut b.pp("mhsa.att"), cfg.d_model, cfg.n_head)?,
            conv: ConvModule::new(&mut b.pp("conv"), cfg.d_model, cfg.conv_kernel)?,
            ff2: FeedForward::new(&mut b.pp("ff2"), cfg.d_model, cfg.d_ffn)?,
            ln_out: LayerNorm::new(&mut b.pp("ln_out"), cfg.d_model)?,
            d_model: cfg.d_model,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, valid: &[bool]) -> Result<Var> {
        self.forward_inner(g, x, valid, None)
    }

    /// `inner` runs between the self-attention and convolution modules.
    pub fn forward_inner(&self, g: &mut Graph, x: Var, valid: &[bool], inner: Option<InnerHook>) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.d_model {
            return Err(crate::Error::Config(format!(
                "conformer block expects width {}, got {:?}",
                self.d_model,
                g.shape(x)
            )));
        }
        let f = self.ff1.forward(g, x)?;
        let f = g.scale(f, 0.5);
        let mut x = g.add(x, f)?;
        let h = self.mhsa_ln.forward(g, x)?;
        let a = self.mhsa.forward(g, h, h, Some(valid), false)?;
        x = g.add(x, a)?;
        if let Some(hook) = inner {
            x = hook(g, x)?;
        }
        let c = self.conv.forward(g, x, valid)?;
        x = g.add(x, c)?;
        let f = self.ff2.forward(g, x)?;
        let f = g.scale(f, 0.5);
        x = g.add(x, f)?;
        let x = self.ln_out.forward(g, x)?;
        Ok(g.mask_rows(x, valid)?)
    }
}
