//! Encoder-decoder meta-model for multi-step simulation.
//!
//! The encoder digests the context `(u_{1:m}, y_{1:m})` with unmasked
//! self-attention into an embedding sequence `zeta_{1:m}` — an implicit
//! representation of the underlying system. The decoder embeds the query
//! inputs `u_{m+1:N}` (causal self-attention among themselves), cross-attends
//! into `zeta`, and emits the simulated outputs.

use rand::Rng;

use super::blocks::{CrossDecoderBlock, TransformerBlock};
use super::EncoderDecoderConfig;
use crate::nncore::{
    add_into, gaussian_tensor, LayerNorm, Linear, MaskMode, NnError, Param, Real, Tensor,
};

pub const INIT_STD: f64 = 0.02;

/// The encoder output `zeta_{1:m}`: `[b, m, d_model]`.
pub type EncoderEmbedding<R> = Tensor<R>;

#[derive(Debug, Clone)]
pub struct EncoderDecoderModel<R: Real> {
    pub cfg: EncoderDecoderConfig,
    enc_input: Linear<R>,
    enc_pos: Param<R>,
    enc_blocks: Vec<TransformerBlock<R>>,
    enc_ln_f: LayerNorm<R>,
    dec_input: Linear<R>,
    dec_pos: Param<R>,
    dec_blocks: Vec<CrossDecoderBlock<R>>,
    dec_ln_f: LayerNorm<R>,
    readout: Linear<R>,
    enc_cache: Option<(usize, usize)>,
    dec_cache: Option<(usize, usize)>,
}

impl<R: Real> EncoderDecoderModel<R> {
    pub fn init<Rg: Rng>(cfg: &EncoderDecoderConfig, rng: &mut Rg) -> Result<Self, NnError> {
        cfg.validate()?;
        let d = cfg.d_model;
        // Residual depth: each decoder block adds three residual branches,
        // encoder blocks two; keep the single GPT-2-style scale from the
        // total layer count.
        let proj_std = INIT_STD / ((2 * cfg.n_layers) as f64).sqrt();
        let enc_input = Linear::init(rng, cfg.n_u + cfg.n_y, d, INIT_STD);
        let enc_pos = Param::new(gaussian_tensor(rng, &[cfg.n_ctx_enc, d], INIT_STD), false);
        let enc_blocks = (0..cfg.n_layers)
            .map(|_| TransformerBlock::init(rng, d, cfg.n_heads, MaskMode::None, INIT_STD, proj_std))
            .collect();
        let enc_ln_f = LayerNorm::new(d);
        let dec_input = Linear::init(rng, cfg.n_u, d, INIT_STD);
        let dec_pos = Param::new(gaussian_tensor(rng, &[cfg.n_ctx_dec, d], INIT_STD), false);
        let dec_blocks = (0..cfg.n_layers)
            .map(|_| CrossDecoderBlock::init(rng, d, cfg.n_heads, INIT_STD, proj_std))
            .collect();
        let dec_ln_f = LayerNorm::new(d);
        let readout = Linear::init(rng, d, cfg.n_y, INIT_STD);
        Ok(Self {
            cfg: cfg.clone(),
            enc_input,
            enc_pos,
            enc_blocks,
            enc_ln_f,
            dec_input,
            dec_pos,
            dec_blocks,
            dec_ln_f,
            readout,
            enc_cache: None,
            dec_cache: None,
        })
    }

    /// Context tokens `[b, m, n_u + n_y]` -> embedding `[b, m, d_model]`.
    pub fn encode(&mut self, ctx_tokens: &Tensor<R>) -> Result<EncoderEmbedding<R>, NnError> {
        let [b, m, f] = three(ctx_tokens)?;
        if f != self.cfg.n_u + self.cfg.n_y {
            return Err(NnError::Shape(format!(
                "context token width {f} != n_u + n_y = {}",
                self.cfg.n_u + self.cfg.n_y
            )));
        }
        if m > self.cfg.n_ctx_enc {
            return Err(NnError::ContextOverflow {
                len: m,
                max: self.cfg.n_ctx_enc,
            });
        }
        let d = self.cfg.d_model;
        let mut x = self.enc_input.forward(ctx_tokens)?;
        add_positions(&mut x, self.enc_pos.value.data(), b, m, d);
        for block in &mut self.enc_blocks {
            x = block.forward(&x)?;
        }
        self.enc_cache = Some((b, m));
        self.enc_ln_f.forward(&x)
    }

    /// Query inputs `[b, q, n_u]` against `zeta` -> predictions `[b, q, n_y]`.
    pub fn decode(
        &mut self,
        zeta: &EncoderEmbedding<R>,
        query_u: &Tensor<R>,
    ) -> Result<Tensor<R>, NnError> {
        let [b, q, f] = three(query_u)?;
        if f != self.cfg.n_u {
            return Err(NnError::Shape(format!(
                "query token width {f} != n_u = {}",
                self.cfg.n_u
            )));
        }
        if q > self.cfg.n_ctx_dec {
            return Err(NnError::ContextOverflow {
                len: q,
                max: self.cfg.n_ctx_dec,
            });
        }
        let d = self.cfg.d_model;
        let mut x = self.dec_input.forward(query_u)?;
        add_positions(&mut x, self.dec_pos.value.data(), b, q, d);
        for block in &mut self.dec_blocks {
            x = block.forward(&x, zeta)?;
        }
        let x = self.dec_ln_f.forward(&x)?;
        self.dec_cache = Some((b, q));
        self.readout.forward(&x)
    }

    /// Full simulation pass: encode the context, decode the query.
    pub fn forward_sim(
        &mut self,
        ctx_tokens: &Tensor<R>,
        query_u: &Tensor<R>,
    ) -> Result<Tensor<R>, NnError> {
        let zeta = self.encode(ctx_tokens)?;
        self.decode(&zeta, query_u)
    }

    /// Backward through the decoder; returns `d(loss)/d(zeta)`.
    pub fn decode_backward(&mut self, dpred: &Tensor<R>) -> Tensor<R> {
        let (b, q) = self.dec_cache.expect("decode backward before decode");
        let d = self.cfg.d_model;
        let dx = self.readout.backward(dpred);
        let mut dx = self.dec_ln_f.backward(&dx);
        let mut dzeta: Option<Tensor<R>> = None;
        for block in self.dec_blocks.iter_mut().rev() {
            let (dxb, dmem) = block.backward(&dx);
            dx = dxb;
            match &mut dzeta {
                Some(acc) => add_into(acc, &dmem),
                None => dzeta = Some(dmem),
            }
        }
        let dpos = self.dec_pos.grad.data_mut();
        for bi in 0..b {
            let dxb = &dx.data()[bi * q * d..(bi + 1) * q * d];
            for (g, v) in dpos[..q * d].iter_mut().zip(dxb) {
                *g = *g + *v;
            }
        }
        self.dec_input.backward(&dx);
        dzeta.expect("decoder has at least one block")
    }

    /// Backward through the encoder given `d(loss)/d(zeta)`.
    pub fn encode_backward(&mut self, dzeta: &Tensor<R>) {
        let (b, m) = self.enc_cache.expect("encode backward before encode");
        let d = self.cfg.d_model;
        let mut dx = self.enc_ln_f.backward(dzeta);
        for block in self.enc_blocks.iter_mut().rev() {
            dx = block.backward(&dx);
        }
        let dpos = self.enc_pos.grad.data_mut();
        for bi in 0..b {
            let dxb = &dx.data()[bi * m * d..(bi + 1) * m * d];
            for (g, v) in dpos[..m * d].iter_mut().zip(dxb) {
                *g = *g + *v;
            }
        }
        self.enc_input.backward(&dx);
    }

    /// Backward through decoder and encoder in one call.
    pub fn backward_sim(&mut self, dpred: &Tensor<R>) {
        let dzeta = self.decode_backward(dpred);
        self.encode_backward(&dzeta);
    }

    pub fn visit_params<F: FnMut(&str, &mut Param<R>)>(&mut self, f: &mut F) {
        self.enc_input.visit("enc.input_proj", f);
        f("enc.pos_emb", &mut self.enc_pos);
        for (i, block) in self.enc_blocks.iter_mut().enumerate() {
            block.visit(&format!("enc.blocks.{i}"), f);
        }
        self.enc_ln_f.visit("enc.ln_f", f);
        self.dec_input.visit("dec.input_proj", f);
        f("dec.pos_emb", &mut self.dec_pos);
        for (i, block) in self.dec_blocks.iter_mut().enumerate() {
            block.visit(&format!("dec.blocks.{i}"), f);
        }
        self.dec_ln_f.visit("dec.ln_f", f);
        self.readout.visit("readout", f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    pub fn n_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.numel());
        n
    }
}

fn add_positions<R: Real>(x: &mut Tensor<R>, pos: &[R], b: usize, t: usize, d: usize) {
    for bi in 0..b {
        let xb = &mut x.data_mut()[bi * t * d..(bi + 1) * t * d];
        for (xv, pv) in xb.iter_mut().zip(&pos[..t * d]) {
            *xv = *xv + *pv;
        }
    }
}

fn three<R: Real>(t: &Tensor<R>) -> Result<[usize; 3], NnError> {
    match t.shape() {
        [a, b, c] => Ok([*a, *b, *c]),
        other => Err(NnError::Shape(format!(
            "expected [batch, time, features], got {other:?}"
        ))),
    }
}
