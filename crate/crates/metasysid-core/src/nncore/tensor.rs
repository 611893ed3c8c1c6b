//! Dense row-major tensors and the matrix products the Transformer needs.

use super::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![R::ZERO; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has no dimensions")
    }

    /// Number of feature vectors when the tensor is viewed as
    /// `[rows, last_dim]`.
    pub fn leading_rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn fill(&mut self, v: R) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_val())
    }
}

/// Matrices above this element-product are split into fixed row chunks and
/// multiplied in parallel. Chunking is independent of the worker count, so
/// results do not depend on how many threads run.
const PAR_GEMM_FLOP_LIMIT: usize = 1 << 20;
const PAR_GEMM_CHUNK: usize = 128;

/// `c = a . b + beta * c` for contiguous row-major slices, with optional
/// logical transposes. `a` is `[m, k]` (or `[k, m]` when `a_trans`), `b` is
/// `[k, n]` (or `[n, k]` when `b_trans`), `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<R: Real>(
    c: &mut [R],
    m: usize,
    n: usize,
    k: usize,
    a: &[R],
    a_trans: bool,
    b: &[R],
    b_trans: bool,
    beta: R,
) {
    assert_eq!(c.len(), m * n, "output buffer size");
    assert_eq!(a.len(), m * k, "lhs buffer size");
    assert_eq!(b.len(), k * n, "rhs buffer size");
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };

    if m * n * k >= PAR_GEMM_FLOP_LIMIT && m >= 2 * PAR_GEMM_CHUNK {
        use rayon::prelude::*;
        let a_ptr = SendPtr(a.as_ptr());
        let b_ptr = SendPtr(b.as_ptr());
        c.par_chunks_mut(PAR_GEMM_CHUNK * n)
            .enumerate()
            .for_each(|(chunk, c_chunk)| {
                let (a_ptr, b_ptr) = (a_ptr, b_ptr); // capture wrappers whole
                let row0 = chunk * PAR_GEMM_CHUNK;
                let rows = c_chunk.len() / n;
                unsafe {
                    R::gemm(
                        rows,
                        k,
                        n,
                        R::ONE,
                        a_ptr.0.offset(row0 as isize * rsa),
                        rsa,
                        csa,
                        b_ptr.0,
                        rsb,
                        csb,
                        beta,
                        c_chunk.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
    } else {
        unsafe {
            R::gemm(
                m,
                k,
                n,
                R::ONE,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Reduction-dimension chunk for parallel weight-gradient products.
const GRAD_K_CHUNK: usize = 2048;

/// `c += a^T b` where `a` is `[rows, m]` and `b` is `[rows, n]` (the
/// weight-gradient shape: small output, long reduction). The reduction is
/// split into fixed chunks computed in parallel and summed in chunk order,
/// so the thread count cannot change the result.
pub fn gemm_acc_lhs_t<R: Real>(c: &mut [R], m: usize, n: usize, rows: usize, a: &[R], b: &[R]) {
    use rayon::prelude::*;
    assert_eq!(c.len(), m * n);
    assert_eq!(a.len(), rows * m);
    assert_eq!(b.len(), rows * n);
    if rows <= GRAD_K_CHUNK {
        unsafe {
            R::gemm(
                m,
                rows,
                n,
                R::ONE,
                a.as_ptr(),
                1,
                m as isize,
                b.as_ptr(),
                n as isize,
                1,
                R::ONE,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    let n_chunks = rows.div_ceil(GRAD_K_CHUNK);
    let mut partials = vec![R::ZERO; n_chunks * m * n];
    partials
        .par_chunks_mut(m * n)
        .enumerate()
        .for_each(|(chunk, partial)| {
            let row0 = chunk * GRAD_K_CHUNK;
            let rows_here = GRAD_K_CHUNK.min(rows - row0);
            unsafe {
                R::gemm(
                    m,
                    rows_here,
                    n,
                    R::ONE,
                    a.as_ptr().add(row0 * m),
                    1,
                    m as isize,
                    b.as_ptr().add(row0 * n),
                    n as isize,
                    1,
                    R::ZERO,
                    partial.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
    for partial in partials.chunks(m * n) {
        for (cv, pv) in c.iter_mut().zip(partial) {
            *cv = *cv + *pv;
        }
    }
}

#[derive(Clone, Copy)]
struct SendPtr<R>(*const R);
unsafe impl<R> Send for SendPtr<R> {}
unsafe impl<R> Sync for SendPtr<R> {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let m = 5;
        let k = 7;
        let n = 3;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(&mut c, m, n, k, &a, false, &b, false, 0.0);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // aT: stored [k, m]; bT: stored [n, k]
        let m = 4;
        let k = 6;
        let n = 5;
        let at: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.31).sin()).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.17).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(&mut c, m, n, k, &at, true, &bt, true, 0.0);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| at[l * m + i] * bt[j * k + l]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_chunking_matches_single_call() {
        // Force both paths over the same inputs.
        let m = 512;
        let k = 64;
        let n = 64;
        let a: Vec<f32> = (0..m * k).map(|i| ((i % 97) as f32 - 48.0) * 0.01).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i % 89) as f32 - 44.0) * 0.02).collect();
        let mut c_par = vec![0.0f32; m * n];
        gemm(&mut c_par, m, n, k, &a, false, &b, false, 0.0);
        let mut c_ser = vec![0.0f32; m * n];
        unsafe {
            f32::gemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c_ser.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        assert_eq!(c_par, c_ser);
    }
}
