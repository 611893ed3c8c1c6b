//! Pre-norm Transformer blocks.
//!
//! Layer norm feeds each sub-layer and the residual is added after it. The
//! residual projections (`attn.wo`, `ff.fc2`) are initialized with the
//! 1/sqrt(2 * n_layers) scaled std.

use rand::Rng;

use crate::nncore::{
    add_into, AttentionLayer, FeedForward, LayerNorm, MaskMode, NnError, Param, Real, Tensor,
};

/// Self-attention block: used causally by the decoder-only model and without
/// a mask by the encoder.
#[derive(Debug, Clone)]
pub struct TransformerBlock<R: Real> {
    pub ln1: LayerNorm<R>,
    pub attn: AttentionLayer<R>,
    pub ln2: LayerNorm<R>,
    pub ff: FeedForward<R>,
}

impl<R: Real> TransformerBlock<R> {
    pub fn init<Rg: Rng>(
        rng: &mut Rg,
        d_model: usize,
        n_heads: usize,
        mask: MaskMode,
        std: f64,
        proj_std: f64,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(d_model),
            attn: AttentionLayer::init(rng, d_model, n_heads, mask, std, proj_std),
            ln2: LayerNorm::new(d_model),
            ff: FeedForward::init(rng, d_model, std, proj_std),
        }
    }

    pub fn forward(&mut self, x: &Tensor<R>) -> Result<Tensor<R>, NnError> {
        let h1 = self.ln1.forward(x)?;
        let a = self.attn.forward(&h1, &h1)?;
        let mut x1 = x.clone();
        add_into(&mut x1, &a);
        let h2 = self.ln2.forward(&x1)?;
        let f = self.ff.forward(&h2)?;
        let mut y = x1;
        add_into(&mut y, &f);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<R>) -> Tensor<R> {
        // y = x1 + ff(ln2(x1)), x1 = x + attn(ln1(x))
        let dh2 = self.ff.backward(dy);
        let mut dx1 = dy.clone();
        add_into(&mut dx1, &self.ln2.backward(&dh2));
        let (dq, dkv) = self.attn.backward(&dx1);
        let mut dh1 = dq;
        add_into(&mut dh1, &dkv);
        let mut dx = dx1;
        add_into(&mut dx, &self.ln1.backward(&dh1));
        dx
    }

    pub fn visit<F: FnMut(&str, &mut Param<R>)>(&mut self, prefix: &str, f: &mut F) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
    }
}

/// Decoder block of the simulation architecture: causal self-attention,
/// cross-attention into the encoder embedding, feed-forward.
#[derive(Debug, Clone)]
pub struct CrossDecoderBlock<R: Real> {
    pub ln1: LayerNorm<R>,
    pub self_attn: AttentionLayer<R>,
    pub ln2: LayerNorm<R>,
    pub cross_attn: AttentionLayer<R>,
    pub ln3: LayerNorm<R>,
    pub ff: FeedForward<R>,
}

impl<R: Real> CrossDecoderBlock<R> {
    pub fn init<Rg: Rng>(
        rng: &mut Rg,
        d_model: usize,
        n_heads: usize,
        std: f64,
        proj_std: f64,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(d_model),
            self_attn: AttentionLayer::init(rng, d_model, n_heads, MaskMode::Causal, std, proj_std),
            ln2: LayerNorm::new(d_model),
            cross_attn: AttentionLayer::init(rng, d_model, n_heads, MaskMode::None, std, proj_std),
            ln3: LayerNorm::new(d_model),
            ff: FeedForward::init(rng, d_model, std, proj_std),
        }
    }

    pub fn forward(&mut self, x: &Tensor<R>, memory: &Tensor<R>) -> Result<Tensor<R>, NnError> {
        let h1 = self.ln1.forward(x)?;
        let sa = self.self_attn.forward(&h1, &h1)?;
        let mut x1 = x.clone();
        add_into(&mut x1, &sa);
        let h2 = self.ln2.forward(&x1)?;
        let ca = self.cross_attn.forward(&h2, memory)?;
        let mut x2 = x1;
        add_into(&mut x2, &ca);
        let h3 = self.ln3.forward(&x2)?;
        let f = self.ff.forward(&h3)?;
        let mut y = x2;
        add_into(&mut y, &f);
        Ok(y)
    }

    /// Returns `(dx, dmemory)`.
    pub fn backward(&mut self, dy: &Tensor<R>) -> (Tensor<R>, Tensor<R>) {
        let dh3 = self.ff.backward(dy);
        let mut dx2 = dy.clone();
        add_into(&mut dx2, &self.ln3.backward(&dh3));
        let (dh2, dmem) = self.cross_attn.backward(&dx2);
        let mut dx1 = dx2;
        add_into(&mut dx1, &self.ln2.backward(&dh2));
        let (dq, dkv) = self.self_attn.backward(&dx1);
        let mut dh1 = dq;
        add_into(&mut dh1, &dkv);
        let mut dx = dx1;
        add_into(&mut dx, &self.ln1.backward(&dh1));
        (dx, dmem)
    }

    pub fn visit<F: FnMut(&str, &mut Param<R>)>(&mut self, prefix: &str, f: &mut F) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        self.ln3.visit(&format!("{prefix}.ln3"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
    }
}
