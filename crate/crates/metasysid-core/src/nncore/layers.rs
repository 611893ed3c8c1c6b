//! Transformer building blocks with hand-derived backward passes.
//!
//! Every layer caches what its backward pass needs during `forward` and
//! accumulates parameter gradients into [`Param::grad`] during `backward`.
//! Gradients are exact for the implemented forward maps; the finite-
//! difference suite in the crate tests holds them to 1e-5 relative in `f64`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::real::Real;
use super::tensor::{gemm, Tensor};
use super::NnError;

/// A trainable array: value, gradient accumulator, and whether weight decay
/// applies (matrices yes; biases, gains and positional tables no).
#[derive(Debug, Clone)]
pub struct Param<R: Real> {
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
    pub decay: bool,
}

impl<R: Real> Param<R> {
    pub fn new(value: Tensor<R>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(R::ZERO);
    }
}

/// Gaussian-initialized tensor with the given standard deviation.
pub fn gaussian_tensor<R: Real, Rg: Rng>(rng: &mut Rg, shape: &[usize], std: f64) -> Tensor<R> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| R::from_f64(std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Affine map `y = x W + b` applied tokenwise; `W` is `[d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear<R: Real> {
    pub weight: Param<R>,
    pub bias: Param<R>,
    d_in: usize,
    d_out: usize,
    x_cache: Option<Tensor<R>>,
}

impl<R: Real> Linear<R> {
    pub fn init<Rg: Rng>(rng: &mut Rg, d_in: usize, d_out: usize, std: f64) -> Self {
        Self {
            weight: Param::new(gaussian_tensor(rng, &[d_in, d_out], std), true),
            bias: Param::new(Tensor::zeros(&[d_out]), false),
            d_in,
            d_out,
            x_cache: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn forward(&mut self, x: &Tensor<R>) -> Result<Tensor<R>, NnError> {
        if x.last_dim() != self.d_in {
            return Err(NnError::Shape(format!(
                "linear expects trailing dim {}, got {:?}",
                self.d_in,
                x.shape()
            )));
        }
        let rows = x.leading_rows();
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = self.d_out;
        let mut y = Tensor::zeros(&out_shape);
        gemm(
            y.data_mut(),
            rows,
            self.d_out,
            self.d_in,
            x.data(),
            false,
            self.weight.value.data(),
            false,
            R::ZERO,
        );
        let b = self.bias.value.data();
        for row in y.data_mut().chunks_mut(self.d_out) {
            for (yv, bv) in row.iter_mut().zip(b) {
                *yv = *yv + *bv;
            }
        }
        self.x_cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<R>) -> Tensor<R> {
        let x = self.x_cache.as_ref().expect("linear backward before forward");
        let rows = x.leading_rows();
        debug_assert_eq!(dy.last_dim(), self.d_out);
        debug_assert_eq!(dy.leading_rows(), rows);

        // dW += x^T dy
        super::tensor::gemm_acc_lhs_t(
            self.weight.grad.data_mut(),
            self.d_in,
            self.d_out,
            rows,
            x.data(),
            dy.data(),
        );
        // db += column sums of dy
        let db = self.bias.grad.data_mut();
        for row in dy.data().chunks(self.d_out) {
            for (g, d) in db.iter_mut().zip(row) {
                *g = *g + *d;
            }
        }
        // dx = dy W^T
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            dx.data_mut(),
            rows,
            self.d_in,
            self.d_out,
            dy.data(),
            false,
            self.weight.value.data(),
            true,
            R::ZERO,
        );
        dx
    }

    pub fn visit<F: FnMut(&str, &mut Param<R>)>(&mut self, prefix: &str, f: &mut F) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Rows per parallel layer-norm chunk (fixed: thread count cannot change
/// results).
const LN_ROW_CHUNK: usize = 128;

/// Per-feature-vector normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm<R: Real> {
    pub gain: Param<R>,
    pub bias: Param<R>,
    dim: usize,
    cache: Option<LnCache<R>>,
}

#[derive(Debug, Clone)]
struct LnCache<R: Real> {
    xhat: Tensor<R>,
    inv_std: Vec<R>,
}

impl<R: Real> LayerNorm<R> {
    pub fn new(dim: usize) -> Self {
        let mut gain = Tensor::zeros(&[dim]);
        gain.fill(R::ONE);
        Self {
            gain: Param::new(gain, false),
            bias: Param::new(Tensor::zeros(&[dim]), false),
            dim,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<R>) -> Result<Tensor<R>, NnError> {
        use rayon::prelude::*;
        if x.last_dim() != self.dim {
            return Err(NnError::Shape(format!(
                "layer_norm expects trailing dim {}, got {:?}",
                self.dim,
                x.shape()
            )));
        }
        let d = self.dim;
        let rows = x.leading_rows();
        let eps = R::from_f64(LAYER_NORM_EPS);
        let inv_d = R::from_f64(1.0 / d as f64);
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![R::ZERO; rows];
        let mut y = Tensor::zeros(x.shape());
        let gain = self.gain.value.data();
        let bias = self.bias.value.data();
        let xp = x.data();
        y.data_mut()
            .par_chunks_mut(LN_ROW_CHUNK * d)
            .zip(xhat.data_mut().par_chunks_mut(LN_ROW_CHUNK * d))
            .zip(inv_std.par_chunks_mut(LN_ROW_CHUNK))
            .enumerate()
            .for_each(|(chunk, ((yc, xhc), istdc))| {
                let row0 = chunk * LN_ROW_CHUNK;
                for r in 0..istdc.len() {
                    let xr = &xp[(row0 + r) * d..(row0 + r + 1) * d];
                    let mut mean = R::ZERO;
                    for &v in xr {
                        mean = mean + v;
                    }
                    mean = mean * inv_d;
                    let mut var = R::ZERO;
                    for &v in xr {
                        let c = v - mean;
                        var = var + c * c;
                    }
                    var = var * inv_d;
                    let istd = R::ONE / (var + eps).sqrt();
                    istdc[r] = istd;
                    let xh = &mut xhc[r * d..(r + 1) * d];
                    let yr = &mut yc[r * d..(r + 1) * d];
                    for j in 0..d {
                        let h = (xr[j] - mean) * istd;
                        xh[j] = h;
                        yr[j] = gain[j] * h + bias[j];
                    }
                }
            });
        self.cache = Some(LnCache { xhat, inv_std });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<R>) -> Tensor<R> {
        use rayon::prelude::*;
        let cache = self.cache.as_ref().expect("layer_norm backward before forward");
        let d = self.dim;
        let rows = dy.leading_rows();
        let inv_d = R::from_f64(1.0 / d as f64);
        let gain = self.gain.value.data();
        let dyp = dy.data();
        let xhp = cache.xhat.data();

        // gain/bias gradients: cross-row reduction, cheap, fixed order
        let dgain = self.gain.grad.data_mut();
        let dbias = self.bias.grad.data_mut();
        for r in 0..rows {
            let dyr = &dyp[r * d..(r + 1) * d];
            let xh = &xhp[r * d..(r + 1) * d];
            for j in 0..d {
                dgain[j] = dgain[j] + dyr[j] * xh[j];
                dbias[j] = dbias[j] + dyr[j];
            }
        }

        let mut dx = Tensor::zeros(dy.shape());
        let istds = &cache.inv_std;
        dx.data_mut()
            .par_chunks_mut(LN_ROW_CHUNK * d)
            .enumerate()
            .for_each(|(chunk, dxc)| {
                let row0 = chunk * LN_ROW_CHUNK;
                for r in 0..dxc.len() / d {
                    let row = row0 + r;
                    let dyr = &dyp[row * d..(row + 1) * d];
                    let xh = &xhp[row * d..(row + 1) * d];
                    let istd = istds[row];
                    let mut mean_dxhat = R::ZERO;
                    let mut mean_dxhat_xhat = R::ZERO;
                    for j in 0..d {
                        let dxh = dyr[j] * gain[j];
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh[j];
                    }
                    mean_dxhat = mean_dxhat * inv_d;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                    let dxr = &mut dxc[r * d..(r + 1) * d];
                    for j in 0..d {
                        let dxh = dyr[j] * gain[j];
                        dxr[j] = istd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            });
        dx
    }

    pub fn visit<F: FnMut(&str, &mut Param<R>)>(&mut self, prefix: &str, f: &mut F) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh form (the GPT-2 variant).
pub fn gelu_scalar<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (R::ONE + inner.tanh())
}

/// Fixed chunk size for parallel elementwise work; independent of the
/// thread count so results never depend on it.
const ELEMWISE_CHUNK: usize = 1 << 14;

/// Elementwise GELU. Forward caches the inner tanh values so backward does
/// not recompute them.
#[derive(Debug, Clone, Default)]
pub struct Gelu<R: Real> {
    cache: Option<(Tensor<R>, Vec<R>)>,
}

impl<R: Real> Gelu<R> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<R>) -> Tensor<R> {
        use rayon::prelude::*;
        let c = R::from_f64(GELU_C);
        let a = R::from_f64(GELU_A);
        let half = R::from_f64(0.5);
        let mut y = x.clone();
        let mut tanhs = vec![R::ZERO; x.numel()];
        y.data_mut()
            .par_chunks_mut(ELEMWISE_CHUNK)
            .zip(tanhs.par_chunks_mut(ELEMWISE_CHUNK))
            .for_each(|(yc, tc)| {
                for (v, t) in yc.iter_mut().zip(tc) {
                    let xv = *v;
                    let th = (c * (xv + a * xv * xv * xv)).tanh_bulk();
                    *t = th;
                    *v = half * xv * (R::ONE + th);
                }
            });
        self.cache = Some((x.clone(), tanhs));
        y
    }

    pub fn backward(&mut self, dy: &Tensor<R>) -> Tensor<R> {
        use rayon::prelude::*;
        let (x, tanhs) = self.cache.as_ref().expect("gelu backward before forward");
        let c = R::from_f64(GELU_C);
        let half = R::from_f64(0.5);
        let three_a = R::from_f64(3.0 * GELU_A);
        let mut dx = dy.clone();
        let xp = x.data();
        dx.data_mut()
            .par_chunks_mut(ELEMWISE_CHUNK)
            .enumerate()
            .for_each(|(chunk, dc)| {
                let base = chunk * ELEMWISE_CHUNK;
                for (i, d) in dc.iter_mut().enumerate() {
                    let xv = xp[base + i];
                    let t = tanhs[base + i];
                    let g = half * (R::ONE + t)
                        + half * xv * (R::ONE - t * t) * c * (R::ONE + three_a * xv * xv);
                    *d = *d * g;
                }
            });
        dx
    }
}

/// Position-wise feed-forward block: expand by 4, GELU, project back.
#[derive(Debug, Clone)]
pub struct FeedForward<R: Real> {
    pub fc1: Linear<R>,
    pub act: Gelu<R>,
    pub fc2: Linear<R>,
}

impl<R: Real> FeedForward<R> {
    /// `proj_std` scales the residual-projection init (fc2).
    pub fn init<Rg: Rng>(rng: &mut Rg, d_model: usize, std: f64, proj_std: f64) -> Self {
        Self {
            fc1: Linear::init(rng, d_model, 4 * d_model, std),
            act: Gelu::new(),
            fc2: Linear::init(rng, 4 * d_model, d_model, proj_std),
        }
    }

    pub fn forward(&mut self, x: &Tensor<R>) -> Result<Tensor<R>, NnError> {
        let h = self.fc1.forward(x)?;
        let h = self.act.forward(&h);
        self.fc2.forward(&h)
    }

    pub fn backward(&mut self, dy: &Tensor<R>) -> Tensor<R> {
        let dh = self.fc2.backward(dy);
        let dh = self.act.backward(&dh);
        self.fc1.backward(&dh)
    }

    pub fn visit<F: FnMut(&str, &mut Param<R>)>(&mut self, prefix: &str, f: &mut F) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
}

/// Elementwise residual add.
pub fn add_into<R: Real>(acc: &mut Tensor<R>, rhs: &Tensor<R>) {
    debug_assert_eq!(acc.shape(), rhs.shape());
    for (a, b) in acc.data_mut().iter_mut().zip(rhs.data()) {
        *a = *a + *b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from;

    #[test]
    fn linear_identity() {
        let mut rng = rng_from(1);
        let mut lin = Linear::<f64>::init(&mut rng, 3, 3, 0.0);
        for i in 0..3 {
            lin.weight.value.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_vec(&[1, 2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, -1.0]);
        let y = lin.forward(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_shape_mismatch_rejected() {
        let mut rng = rng_from(2);
        let mut lin = Linear::<f64>::init(&mut rng, 4, 2, 0.02);
        let x = Tensor::<f64>::zeros(&[5, 3]);
        assert!(matches!(lin.forward(&x), Err(NnError::Shape(_))));
    }

    #[test]
    fn layer_norm_two_point() {
        let mut ln = LayerNorm::<f64>::new(2);
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 3.0]);
        let y = ln.forward(&x).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_output_statistics() {
        let mut rng = rng_from(3);
        let mut ln = LayerNorm::<f64>::new(64);
        let x = gaussian_tensor::<f64, _>(&mut rng, &[10, 64], 2.0);
        let y = ln.forward(&x).unwrap();
        for r in 0..10 {
            let row = &y.data()[r * 64..(r + 1) * 64];
            let mean: f64 = row.iter().sum::<f64>() / 64.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gelu_zero_point_and_sign() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!(gelu_scalar(3.0f64) > 2.9);
        assert!(gelu_scalar(-3.0f64).abs() < 0.02);
    }

    #[test]
    fn linear_closed_form_gradient() {
        // loss = 0.5 || W x - t ||^2, single row: dL/dW = x (Wx - t)^T in
        // our [d_in, d_out] layout.
        let mut rng = rng_from(4);
        let mut lin = Linear::<f64>::init(&mut rng, 3, 2, 0.5);
        let x = Tensor::from_vec(&[1, 3], vec![0.3, -1.2, 0.7]);
        let t = [0.25, -0.5];
        let y = lin.forward(&x).unwrap();
        let resid = [y.data()[0] - t[0], y.data()[1] - t[1]];
        let dy = Tensor::from_vec(&[1, 2], resid.to_vec());
        lin.backward(&dy);
        for i in 0..3 {
            for j in 0..2 {
                let want = x.data()[i] * resid[j];
                let got = lin.weight.grad.data()[i * 2 + j];
                assert!((got - want).abs() < 1e-12, "dW[{i},{j}] {got} vs {want}");
            }
        }
        for j in 0..2 {
            assert!((lin.bias.grad.data()[j] - resid[j]).abs() < 1e-12);
        }
    }
}
