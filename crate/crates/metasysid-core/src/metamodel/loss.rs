//! Training losses and token packing.
//!
//! Both objectives are mean squared errors over everything the model
//! predicts in a batch; metric accumulation runs in `f64` regardless of the
//! compute dtype.

use super::{DecoderOnlyModel, EncoderDecoderModel};
use crate::nncore::{NnError, Real, Tensor};

/// Builds decoder-only tokens and targets from SISO sequences of length `n`:
/// token `j` is `(u_j, y_j)` for `j = 1..n-1`, the target at position `j` is
/// `y_{j+1}`.
pub fn predictor_tokens<R: Real>(
    u: &[R],
    y: &[R],
    batch: usize,
    n: usize,
) -> (Tensor<R>, Tensor<R>) {
    assert!(n >= 2, "need at least two samples");
    assert_eq!(u.len(), batch * n);
    assert_eq!(y.len(), batch * n);
    let t = n - 1;
    let mut tokens = Vec::with_capacity(batch * t * 2);
    let mut targets = Vec::with_capacity(batch * t);
    for b in 0..batch {
        let ub = &u[b * n..(b + 1) * n];
        let yb = &y[b * n..(b + 1) * n];
        for j in 0..t {
            tokens.push(ub[j]);
            tokens.push(yb[j]);
            targets.push(yb[j + 1]);
        }
    }
    (
        Tensor::from_vec(&[batch, t, 2], tokens),
        Tensor::from_vec(&[batch, t, 1], targets),
    )
}

/// Packs a flat `[batch * len]` SISO slice into `[batch, len, 1]`.
pub fn channel_tensor<R: Real>(x: &[R], batch: usize, len: usize) -> Tensor<R> {
    assert_eq!(x.len(), batch * len);
    Tensor::from_vec(&[batch, len, 1], x.to_vec())
}

/// Packs context pairs into `[batch, m, 2]` encoder tokens.
pub fn context_tokens<R: Real>(u: &[R], y: &[R], batch: usize, m: usize) -> Tensor<R> {
    assert_eq!(u.len(), batch * m);
    assert_eq!(y.len(), batch * m);
    let mut tokens = Vec::with_capacity(batch * m * 2);
    for b in 0..batch {
        for j in 0..m {
            tokens.push(u[b * m + j]);
            tokens.push(y[b * m + j]);
        }
    }
    Tensor::from_vec(&[batch, m, 2], tokens)
}

/// Mean squared error (f64 accumulation) and its gradient with respect to
/// the predictions: `2 (pred - target) / count`.
pub fn mse_and_grad<R: Real>(pred: &Tensor<R>, target: &Tensor<R>) -> (f64, Tensor<R>) {
    assert_eq!(pred.shape(), target.shape(), "prediction/target shapes");
    let count = pred.numel() as f64;
    let mut acc = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape());
    let scale = R::from_f64(2.0 / count);
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let r = p - t;
        acc += r.to_f64() * r.to_f64();
        *g = scale * r;
    }
    (acc / count, grad)
}

/// One-step-ahead objective: mean over batch, time steps `1..N-1`, and
/// output dims of the squared prediction error.
pub fn one_step_loss<R: Real>(
    model: &mut DecoderOnlyModel<R>,
    u: &[R],
    y: &[R],
    batch: usize,
    n: usize,
) -> Result<f64, NnError> {
    let (tokens, targets) = predictor_tokens(u, y, batch, n);
    let pred = model.forward(&tokens)?;
    Ok(mse_and_grad(&pred, &targets).0)
}

/// One training step of the one-step objective: forward, loss, backward.
/// Gradients accumulate into the model; caller zeroes them beforehand.
pub fn one_step_loss_backward<R: Real>(
    model: &mut DecoderOnlyModel<R>,
    u: &[R],
    y: &[R],
    batch: usize,
    n: usize,
) -> Result<f64, NnError> {
    let (tokens, targets) = predictor_tokens(u, y, batch, n);
    let pred = model.forward(&tokens)?;
    let (loss, dpred) = mse_and_grad(&pred, &targets);
    model.backward(&dpred);
    Ok(loss)
}

/// Simulation objective: mean squared error between the decoder output and
/// `y_{m+1:N}` over batch, query steps, and output dims.
pub fn sim_loss<R: Real>(
    model: &mut EncoderDecoderModel<R>,
    ctx_u: &[R],
    ctx_y: &[R],
    query_u: &[R],
    target_y: &[R],
    batch: usize,
    m: usize,
    q: usize,
) -> Result<f64, NnError> {
    let ctx = context_tokens(ctx_u, ctx_y, batch, m);
    let query = channel_tensor(query_u, batch, q);
    let target = channel_tensor(target_y, batch, q);
    let pred = model.forward_sim(&ctx, &query)?;
    Ok(mse_and_grad(&pred, &target).0)
}

/// One training step of the simulation objective.
pub fn sim_loss_backward<R: Real>(
    model: &mut EncoderDecoderModel<R>,
    ctx_u: &[R],
    ctx_y: &[R],
    query_u: &[R],
    target_y: &[R],
    batch: usize,
    m: usize,
    q: usize,
) -> Result<f64, NnError> {
    let ctx = context_tokens(ctx_u, ctx_y, batch, m);
    let query = channel_tensor(query_u, batch, q);
    let target = channel_tensor(target_y, batch, q);
    let pred = model.forward_sim(&ctx, &query)?;
    let (loss, dpred) = mse_and_grad(&pred, &target);
    model.backward_sim(&dpred);
    Ok(loss)
}
