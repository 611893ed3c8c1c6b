//! Multi-head scaled dot-product attention.
//!
//! The core operator works on already-projected `[batch, time, d_model]`
//! tensors, splitting the trailing dimension into heads in place (strided
//! GEMMs, no copies). Causal mode masks keys beyond the query index; `None`
//! attends everywhere and is used by the encoder and by decoder-to-encoder
//! cross attention.

use rand::Rng;
use rayon::prelude::*;

use super::layers::{add_into, Linear, Param};
use super::real::Real;
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Causal,
    None,
}

#[derive(Clone, Copy)]
struct SendMutPtr<R>(*mut R);
unsafe impl<R> Send for SendMutPtr<R> {}
unsafe impl<R> Sync for SendMutPtr<R> {}
#[derive(Clone, Copy)]
struct SendConstPtr<R>(*const R);
unsafe impl<R> Send for SendConstPtr<R> {}
unsafe impl<R> Sync for SendConstPtr<R> {}

#[derive(Debug, Clone)]
struct AttnCache<R: Real> {
    q: Tensor<R>,
    k: Tensor<R>,
    v: Tensor<R>,
    /// Post-softmax attention weights, `[b, heads, tq, tk]`.
    probs: Vec<R>,
    tq: usize,
    tk: usize,
}

/// Stateful attention core: forward caches what backward needs.
#[derive(Debug, Clone)]
pub struct ScaledDotAttention<R: Real> {
    n_heads: usize,
    mask: MaskMode,
    cache: Option<AttnCache<R>>,
}

impl<R: Real> ScaledDotAttention<R> {
    pub fn new(n_heads: usize, mask: MaskMode) -> Self {
        Self {
            n_heads,
            mask,
            cache: None,
        }
    }

    pub fn forward(
        &mut self,
        q: &Tensor<R>,
        k: &Tensor<R>,
        v: &Tensor<R>,
    ) -> Result<Tensor<R>, NnError> {
        let (b, tq, d) = dims3(q)?;
        let (bk, tk, dk) = dims3(k)?;
        let (bv, tv, dv) = dims3(v)?;
        if bk != b || bv != b || dk != d || dv != d {
            return Err(NnError::Shape(format!(
                "attention operand shapes disagree: q {:?}, k {:?}, v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if tk != tv {
            return Err(NnError::Shape(format!(
                "key/value sequence lengths differ: {tk} vs {tv}"
            )));
        }
        if d % self.n_heads != 0 {
            return Err(NnError::Config(format!(
                "model width {d} not divisible by {} heads",
                self.n_heads
            )));
        }
        if self.mask == MaskMode::Causal && tq != tk {
            return Err(NnError::InvalidArgument(format!(
                "causal attention needs square time extent, got {tq} queries over {tk} keys"
            )));
        }
        let heads = self.n_heads;
        let hd = d / heads;
        let scale = R::from_f64(1.0 / (hd as f64).sqrt());

        let mut out: Tensor<R> = Tensor::zeros(&[b, tq, d]);
        let mut probs = vec![R::ZERO; b * heads * tq * tk];
        let causal = self.mask == MaskMode::Causal;

        let qp = SendConstPtr(q.data().as_ptr());
        let kp = SendConstPtr(k.data().as_ptr());
        let vp = SendConstPtr(v.data().as_ptr());
        let op = SendMutPtr(out.data_mut().as_mut_ptr());

        // Scores via GEMM (dot-product shaped work belongs to the matrix
        // kernel); the value mix is a hand axpy over contiguous `hd`-wide
        // head slices, which vectorizes and skips masked keys entirely.
        probs
            .par_chunks_mut(heads * tq * tk)
            .enumerate()
            .for_each(|(i, probs_i)| {
                let (qp, kp, vp, op) = (qp, kp, vp, op);
                for h in 0..heads {
                    let head_q = i * tq * d + h * hd;
                    let head_kv = i * tk * d + h * hd;
                    let v_sub =
                        unsafe { std::slice::from_raw_parts(vp.0.add(i * tk * d), tk * d) };
                    let o_sub =
                        unsafe { std::slice::from_raw_parts_mut(op.0.add(i * tq * d), tq * d) };
                    let col = h * hd;
                    let p = &mut probs_i[h * tq * tk..(h + 1) * tq * tk];

                    // scores (into p): scale * Q_h K_h^T
                    unsafe {
                        R::gemm(
                            tq,
                            hd,
                            tk,
                            scale,
                            qp.0.add(head_q),
                            d as isize,
                            1,
                            kp.0.add(head_kv),
                            1,
                            d as isize,
                            R::ZERO,
                            p.as_mut_ptr(),
                            tk as isize,
                            1,
                        );
                    }
                    for qi in 0..tq {
                        let limit = if causal { qi + 1 } else { tk };
                        let prow = &mut p[qi * tk..(qi + 1) * tk];
                        let mut max = prow[0];
                        for &s in &prow[1..limit] {
                            max = max.maximum(s);
                        }
                        let mut sum = R::ZERO;
                        for pj in prow.iter_mut().take(limit) {
                            *pj = (*pj - max).exp();
                            sum = sum + *pj;
                        }
                        let inv = R::ONE / sum;
                        for pj in prow.iter_mut().take(limit) {
                            *pj = *pj * inv;
                        }
                        for pj in prow.iter_mut().skip(limit) {
                            *pj = R::ZERO;
                        }
                        // out row = P row . V
                        let o_row = &mut o_sub[qi * d + col..qi * d + col + hd];
                        o_row.iter_mut().for_each(|o| *o = R::ZERO);
                        for (j, pj) in prow.iter().enumerate().take(limit) {
                            let w = *pj;
                            let v_row = &v_sub[j * d + col..j * d + col + hd];
                            for c in 0..hd {
                                o_row[c] = o_row[c] + w * v_row[c];
                            }
                        }
                    }
                }
            });

        self.cache = Some(AttnCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            probs,
            tq,
            tk,
        });
        Ok(out)
    }

    /// Returns `(dq, dk, dv)`.
    pub fn backward(&mut self, dout: &Tensor<R>) -> (Tensor<R>, Tensor<R>, Tensor<R>) {
        let cache = self.cache.as_ref().expect("attention backward before forward");
        let (tq, tk) = (cache.tq, cache.tk);
        let d = cache.q.last_dim();
        let heads = self.n_heads;
        let hd = d / heads;
        let scale = R::from_f64(1.0 / (hd as f64).sqrt());

        let mut dq: Tensor<R> = Tensor::zeros(cache.q.shape());
        let mut dk: Tensor<R> = Tensor::zeros(cache.k.shape());
        let mut dv: Tensor<R> = Tensor::zeros(cache.v.shape());

        let qp = SendConstPtr(cache.q.data().as_ptr());
        let kp = SendConstPtr(cache.k.data().as_ptr());
        let vp = SendConstPtr(cache.v.data().as_ptr());
        let dop = SendConstPtr(dout.data().as_ptr());
        let dqp = SendMutPtr(dq.data_mut().as_mut_ptr());
        let dkp = SendMutPtr(dk.data_mut().as_mut_ptr());
        let dvp = SendMutPtr(dv.data_mut().as_mut_ptr());

        let causal = self.mask == MaskMode::Causal;
        cache
            .probs
            .par_chunks(heads * tq * tk)
            .enumerate()
            .for_each(|(i, probs_i)| {
                let (qp, kp, vp, dop, dqp, dkp, dvp) = (qp, kp, vp, dop, dqp, dkp, dvp);
                let mut ds = vec![R::ZERO; tq * tk];
                for h in 0..heads {
                    let p = &probs_i[h * tq * tk..(h + 1) * tq * tk];
                    let q_sub =
                        unsafe { std::slice::from_raw_parts(qp.0.add(i * tq * d), tq * d) };
                    let k_sub =
                        unsafe { std::slice::from_raw_parts(kp.0.add(i * tk * d), tk * d) };
                    let do_sub =
                        unsafe { std::slice::from_raw_parts(dop.0.add(i * tq * d), tq * d) };
                    let dq_sub =
                        unsafe { std::slice::from_raw_parts_mut(dqp.0.add(i * tq * d), tq * d) };
                    let dk_sub =
                        unsafe { std::slice::from_raw_parts_mut(dkp.0.add(i * tk * d), tk * d) };
                    let dv_sub =
                        unsafe { std::slice::from_raw_parts_mut(dvp.0.add(i * tk * d), tk * d) };
                    let col = h * hd;

                    // dP = dOut V^T (into ds, GEMM-shaped)
                    unsafe {
                        R::gemm(
                            tq,
                            hd,
                            tk,
                            R::ONE,
                            dop.0.add(i * tq * d + col),
                            d as isize,
                            1,
                            vp.0.add(i * tk * d + col),
                            1,
                            d as isize,
                            R::ZERO,
                            ds.as_mut_ptr(),
                            tk as isize,
                            1,
                        );
                    }
                    for qi in 0..tq {
                        let limit = if causal { qi + 1 } else { tk };
                        let pr = &p[qi * tk..qi * tk + limit];
                        let dr = &ds[qi * tk..qi * tk + limit];
                        let do_row = &do_sub[qi * d + col..qi * d + col + hd];
                        let q_row = &q_sub[qi * d + col..qi * d + col + hd];
                        // softmax backward: dS = P o (dP - sum(dP o P)),
                        // then fused axpy into dQ/dK/dV rows.
                        let mut dot = R::ZERO;
                        for j in 0..limit {
                            dot = dot + pr[j] * dr[j];
                        }
                        let dq_row = &mut dq_sub[qi * d + col..qi * d + col + hd];
                        for j in 0..limit {
                            let w = pr[j];
                            let g = w * (dr[j] - dot) * scale;
                            let k_row = &k_sub[j * d + col..j * d + col + hd];
                            let dk_row = &mut dk_sub[j * d + col..j * d + col + hd];
                            let dv_row = &mut dv_sub[j * d + col..j * d + col + hd];
                            for c in 0..hd {
                                dq_row[c] = dq_row[c] + g * k_row[c];
                                dk_row[c] = dk_row[c] + g * q_row[c];
                                dv_row[c] = dv_row[c] + w * do_row[c];
                            }
                        }
                    }
                }
            });

        (dq, dk, dv)
    }
}

fn dims3<R: Real>(t: &Tensor<R>) -> Result<(usize, usize, usize), NnError> {
    match t.shape() {
        [b, t_, d] => Ok((*b, *t_, *d)),
        other => Err(NnError::Shape(format!(
            "expected rank-3 [batch, time, width], got {other:?}"
        ))),
    }
}

/// One-shot attention over already-projected operands.
pub fn multi_head_attention<R: Real>(
    q: &Tensor<R>,
    k: &Tensor<R>,
    v: &Tensor<R>,
    n_heads: usize,
    mask: MaskMode,
) -> Result<Tensor<R>, NnError> {
    ScaledDotAttention::new(n_heads, mask).forward(q, k, v)
}

/// Attention with learned query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct AttentionLayer<R: Real> {
    pub wq: Linear<R>,
    pub wk: Linear<R>,
    pub wv: Linear<R>,
    pub wo: Linear<R>,
    core: ScaledDotAttention<R>,
}

impl<R: Real> AttentionLayer<R> {
    pub fn init<Rg: Rng>(
        rng: &mut Rg,
        d_model: usize,
        n_heads: usize,
        mask: MaskMode,
        std: f64,
        proj_std: f64,
    ) -> Self {
        Self {
            wq: Linear::init(rng, d_model, d_model, std),
            wk: Linear::init(rng, d_model, d_model, std),
            wv: Linear::init(rng, d_model, d_model, std),
            wo: Linear::init(rng, d_model, d_model, proj_std),
            core: ScaledDotAttention::new(n_heads, mask),
        }
    }

    /// `x_q` provides queries; `x_kv` provides keys and values (pass the
    /// same tensor for self-attention).
    pub fn forward(&mut self, x_q: &Tensor<R>, x_kv: &Tensor<R>) -> Result<Tensor<R>, NnError> {
        let q = self.wq.forward(x_q)?;
        let k = self.wk.forward(x_kv)?;
        let v = self.wv.forward(x_kv)?;
        let mixed = self.core.forward(&q, &k, &v)?;
        self.wo.forward(&mixed)
    }

    /// Returns `(dx_q, dx_kv)`; the caller adds them when both point at the
    /// same tensor.
    pub fn backward(&mut self, dy: &Tensor<R>) -> (Tensor<R>, Tensor<R>) {
        let dmixed = self.wo.backward(dy);
        let (dq, dk, dv) = self.core.backward(&dmixed);
        let dx_q = self.wq.backward(&dq);
        let mut dx_kv = self.wk.backward(&dk);
        let dx_kv_v = self.wv.backward(&dv);
        add_into(&mut dx_kv, &dx_kv_v);
        (dx_q, dx_kv)
    }

    pub fn visit<F: FnMut(&str, &mut Param<R>)>(&mut self, prefix: &str, f: &mut F) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::layers::gaussian_tensor;
    use crate::seeds::rng_from;

    fn rand3(seed: u64, b: usize, t: usize, d: usize) -> Tensor<f64> {
        gaussian_tensor::<f64, _>(&mut rng_from(seed), &[b, t, d], 1.0)
    }

    #[test]
    fn causal_first_position_copies_first_value_row() {
        let (b, t, d) = (2, 5, 8);
        let q = rand3(1, b, t, d);
        let k = rand3(2, b, t, d);
        let v = rand3(3, b, t, d);
        let out = multi_head_attention(&q, &k, &v, 2, MaskMode::Causal).unwrap();
        for i in 0..b {
            assert_eq!(&out.data()[i * t * d..i * t * d + d], &v.data()[i * t * d..i * t * d + d]);
        }
    }

    #[test]
    fn causal_future_perturbation_is_invisible() {
        let (b, t, d) = (1, 6, 8);
        let q = rand3(4, b, t, d);
        let k = rand3(5, b, t, d);
        let v = rand3(6, b, t, d);
        let base = multi_head_attention(&q, &k, &v, 4, MaskMode::Causal).unwrap();
        let cut = 3usize;
        let mut q2 = q.clone();
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for tok in cut..t {
            for c in 0..d {
                q2.data_mut()[tok * d + c] = 99.0 + tok as f64;
                k2.data_mut()[tok * d + c] = -50.0;
                v2.data_mut()[tok * d + c] = 7.0;
            }
        }
        let other = multi_head_attention(&q2, &k2, &v2, 4, MaskMode::Causal).unwrap();
        assert_eq!(&base.data()[..cut * d], &other.data()[..cut * d]);
    }

    #[test]
    fn uniform_softmax_over_identical_keys() {
        let (b, t, d) = (1, 4, 4);
        let q = rand3(7, b, t, d);
        let mut k = Tensor::<f64>::zeros(&[b, t, d]);
        for tok in 0..t {
            for c in 0..d {
                k.data_mut()[tok * d + c] = (c as f64) * 0.5; // same row everywhere
            }
        }
        let v = rand3(8, b, t, d);
        let out = multi_head_attention(&q, &k, &v, 2, MaskMode::None).unwrap();
        for c in 0..d {
            let mean: f64 = (0..t).map(|tok| v.data()[tok * d + c]).sum::<f64>() / t as f64;
            for tok in 0..t {
                assert!((out.data()[tok * d + c] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn width_must_divide_heads() {
        let q = rand3(9, 1, 3, 6);
        let err = multi_head_attention(&q, &q, &q, 4, MaskMode::None);
        assert!(matches!(err, Err(NnError::Config(_))));
    }

    #[test]
    fn causal_rejects_rectangular_attention() {
        let q = rand3(10, 1, 3, 8);
        let k = rand3(11, 1, 5, 8);
        let err = multi_head_attention(&q, &k, &k, 2, MaskMode::Causal);
        assert!(matches!(err, Err(NnError::InvalidArgument(_))));
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        // loss = sum(out o w) for a fixed random w; central differences on
        // every q/k/v coordinate.
        let (b, t, d) = (1, 4, 6);
        let q0 = rand3(12, b, t, d);
        let k0 = rand3(13, b, t, d);
        let v0 = rand3(14, b, t, d);
        let w = rand3(15, b, t, d);

        let loss = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| -> f64 {
            let out = multi_head_attention(q, k, v, 3, MaskMode::Causal).unwrap();
            out.data().iter().zip(w.data()).map(|(o, wv)| o * wv).sum()
        };

        let mut attn = ScaledDotAttention::new(3, MaskMode::Causal);
        attn.forward(&q0, &k0, &v0).unwrap();
        let (dq, dk, dv) = attn.backward(&w);

        let h = 1e-6;
        for (which, (grad, base)) in [(&dq, &q0), (&dk, &k0), (&dv, &v0)].iter().enumerate() {
            for idx in 0..base.numel() {
                let mut plus = (*base).clone();
                plus.data_mut()[idx] += h;
                let mut minus = (*base).clone();
                minus.data_mut()[idx] -= h;
                let fd = match which {
                    0 => (loss(&plus, &k0, &v0) - loss(&minus, &k0, &v0)) / (2.0 * h),
                    1 => (loss(&q0, &plus, &v0) - loss(&q0, &minus, &v0)) / (2.0 * h),
                    _ => (loss(&q0, &k0, &plus) - loss(&q0, &k0, &minus)) / (2.0 * h),
                };
                let an = grad.data()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "operand {which} coord {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
