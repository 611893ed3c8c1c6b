//! GPT-style decoder-only meta-model for one-step-ahead prediction.
//!
//! Token `j` is the pair `(u_j, y_j)` mapped through a linear embedding plus
//! a learned position embedding; the output at position `j` is the
//! prediction of `y_{j+1}`. Causal attention guarantees the prediction
//! depends only on samples up to `j`.

use rand::Rng;

use super::blocks::TransformerBlock;
use super::DecoderOnlyConfig;
use crate::nncore::{
    gaussian_tensor, LayerNorm, Linear, MaskMode, NnError, Param, Real, Tensor,
};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct DecoderOnlyModel<R: Real> {
    pub cfg: DecoderOnlyConfig,
    input_proj: Linear<R>,
    pos_emb: Param<R>,
    blocks: Vec<TransformerBlock<R>>,
    ln_f: LayerNorm<R>,
    readout: Linear<R>,
    seq_cache: Option<(usize, usize)>,
}

impl<R: Real> DecoderOnlyModel<R> {
    pub fn init<Rg: Rng>(cfg: &DecoderOnlyConfig, rng: &mut Rg) -> Result<Self, NnError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let proj_std = INIT_STD / ((2 * cfg.n_layers) as f64).sqrt();
        let input_proj = Linear::init(rng, cfg.n_u + cfg.n_y, d, INIT_STD);
        let pos_emb = Param::new(gaussian_tensor(rng, &[cfg.n_ctx, d], INIT_STD), false);
        let blocks = (0..cfg.n_layers)
            .map(|_| {
                TransformerBlock::init(rng, d, cfg.n_heads, MaskMode::Causal, INIT_STD, proj_std)
            })
            .collect();
        let ln_f = LayerNorm::new(d);
        let readout = Linear::init(rng, d, cfg.n_y, INIT_STD);
        Ok(Self {
            cfg: cfg.clone(),
            input_proj,
            pos_emb,
            blocks,
            ln_f,
            readout,
            seq_cache: None,
        })
    }

    /// `tokens` is `[b, k, n_u + n_y]`; returns predictions `[b, k, n_y]`
    /// where position `j` predicts `y_{j+2}` (0-based `j`).
    pub fn forward(&mut self, tokens: &Tensor<R>) -> Result<Tensor<R>, NnError> {
        let [b, t, f] = three(tokens)?;
        if f != self.cfg.n_u + self.cfg.n_y {
            return Err(NnError::Shape(format!(
                "token width {f} != n_u + n_y = {}",
                self.cfg.n_u + self.cfg.n_y
            )));
        }
        if t > self.cfg.n_ctx {
            return Err(NnError::ContextOverflow {
                len: t,
                max: self.cfg.n_ctx,
            });
        }
        let d = self.cfg.d_model;
        let mut x = self.input_proj.forward(tokens)?;
        let pos = self.pos_emb.value.data();
        for bi in 0..b {
            let xb = &mut x.data_mut()[bi * t * d..(bi + 1) * t * d];
            for (xv, pv) in xb.iter_mut().zip(&pos[..t * d]) {
                *xv = *xv + *pv;
            }
        }
        for block in &mut self.blocks {
            x = block.forward(&x)?;
        }
        let x = self.ln_f.forward(&x)?;
        self.seq_cache = Some((b, t));
        self.readout.forward(&x)
    }

    /// Accumulates parameter gradients for `d(loss)/d(predictions)`.
    pub fn backward(&mut self, dpred: &Tensor<R>) {
        let (b, t) = self.seq_cache.expect("backward before forward");
        let d = self.cfg.d_model;
        let dx = self.readout.backward(dpred);
        let mut dx = self.ln_f.backward(&dx);
        for block in self.blocks.iter_mut().rev() {
            dx = block.backward(&dx);
        }
        let dpos = self.pos_emb.grad.data_mut();
        for bi in 0..b {
            let dxb = &dx.data()[bi * t * d..(bi + 1) * t * d];
            for (g, v) in dpos[..t * d].iter_mut().zip(dxb) {
                *g = *g + *v;
            }
        }
        self.input_proj.backward(&dx);
    }

    pub fn visit_params<F: FnMut(&str, &mut Param<R>)>(&mut self, f: &mut F) {
        self.input_proj.visit("input_proj", f);
        f("pos_emb", &mut self.pos_emb);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit(&format!("blocks.{i}"), f);
        }
        self.ln_f.visit("ln_f", f);
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

fn three<R: Real>(t: &Tensor<R>) -> Result<[usize; 3], NnError> {
    match t.shape() {
        [a, b, c] => Ok([*a, *b, *c]),
        other => Err(NnError::Shape(format!(
            "expected [batch, time, features], got {other:?}"
        ))),
    }
}
