//! Random stable system generation and simulation.
//!
//! Systems are sampled from a prior over discrete-time SISO state-space
//! models: eigenvalues of `A` are drawn inside an annular sector of the unit
//! disk, `A` is assembled as a random orthogonal similarity of the real modal
//! form, and `B`, `C`, `D` entries are i.i.d. standard normal. A
//! Wiener-Hammerstein system chains two such LTI blocks around a one-hidden-
//! layer tanh network with Kaiming-scaled random weights.
//!
//! All arithmetic here is `f64`; the datastream downcasts to `f32` at the
//! training boundary.

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default hidden width of the Wiener-Hammerstein static nonlinearity.
pub const DEFAULT_MLP_HIDDEN: usize = 32;

#[derive(Debug, Error)]
pub enum SysGenError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid eigenvalue region: {0}")]
    InvalidRegion(String),
}

/// Annular sector of the complex plane that sampled eigenvalues must lie in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenRegion {
    pub mag_min: f64,
    pub mag_max: f64,
    pub phase_min: f64,
    pub phase_max: f64,
}

impl EigenRegion {
    pub fn new(
        mag_min: f64,
        mag_max: f64,
        phase_min: f64,
        phase_max: f64,
    ) -> Result<Self, SysGenError> {
        let r = Self {
            mag_min,
            mag_max,
            phase_min,
            phase_max,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), SysGenError> {
        if !(self.mag_min > 0.0 && self.mag_min < self.mag_max && self.mag_max < 1.0) {
            return Err(SysGenError::InvalidRegion(format!(
                "need 0 < mag_min < mag_max < 1, got ({}, {})",
                self.mag_min, self.mag_max
            )));
        }
        if !(self.phase_min >= -std::f64::consts::PI
            && self.phase_min < self.phase_max
            && self.phase_max <= std::f64::consts::PI)
        {
            return Err(SysGenError::InvalidRegion(format!(
                "need -pi <= phase_min < phase_max <= pi, got ({}, {})",
                self.phase_min, self.phase_max
            )));
        }
        Ok(())
    }

    /// Training prior: magnitude (0.5, 0.97), phase (-pi/2, pi/2).
    pub fn nominal() -> Self {
        Self {
            mag_min: 0.5,
            mag_max: 0.97,
            phase_min: -std::f64::consts::FRAC_PI_2,
            phase_max: std::f64::consts::FRAC_PI_2,
        }
    }

    /// Distribution-shift region: magnitude (0.2, 0.99), phase (-3pi/4, 3pi/4).
    pub fn shifted() -> Self {
        Self {
            mag_min: 0.2,
            mag_max: 0.99,
            phase_min: -3.0 * std::f64::consts::FRAC_PI_4,
            phase_max: 3.0 * std::f64::consts::FRAC_PI_4,
        }
    }

    /// Strict membership test for a single eigenvalue.
    pub fn contains(&self, lambda: Complex<f64>) -> bool {
        let mag = lambda.norm();
        let phase = lambda.arg();
        mag > self.mag_min && mag < self.mag_max && phase > self.phase_min && phase < self.phase_max
    }

    /// Largest phase magnitude usable for a conjugate pair: both `+theta`
    /// and `-theta` must stay inside the region.
    fn pair_phase_limit(&self) -> f64 {
        self.phase_max.min(-self.phase_min)
    }

    fn allows_pairs(&self) -> bool {
        self.pair_phase_limit() > 0.0
    }

    fn allows_reals(&self) -> bool {
        self.phase_min < 0.0 && self.phase_max > 0.0
    }
}

/// Discrete-time SISO state-space system `x' = Ax + Bu`, `y = Cx + Du`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Self {
        let n = a.nrows();
        assert_eq!(a.ncols(), n, "A must be square");
        assert_eq!(b.nrows(), n, "B row count must match state order");
        assert_eq!(c.ncols(), n, "C column count must match state order");
        assert_eq!((b.ncols(), c.nrows()), (d.ncols(), d.nrows()), "D shape");
        Self { a, b, c, d }
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn to_record(&self, region: Option<EigenRegion>) -> LtiRecord {
        LtiRecord {
            order: self.order(),
            a: matrix_rows(&self.a),
            b: matrix_rows(&self.b),
            c: matrix_rows(&self.c),
            d: matrix_rows(&self.d),
            region,
        }
    }
}

/// Structured text record for debugging dumps of a sampled system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LtiRecord {
    pub order: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<EigenRegion>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// One-hidden-layer scalar network `f(v) = w2 . tanh(w1 v + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNonlinearity {
    pub w1: DVector<f64>,
    pub b1: DVector<f64>,
    pub w2: DVector<f64>,
    pub b2: f64,
}

impl MlpNonlinearity {
    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    pub fn apply(&self, v: f64) -> f64 {
        let mut acc = self.b2;
        for i in 0..self.w1.len() {
            acc += self.w2[i] * (self.w1[i] * v + self.b1[i]).tanh();
        }
        acc
    }
}

/// Wiener-Hammerstein system: LTI -> static nonlinearity -> LTI.
#[derive(Debug, Clone, PartialEq)]
pub struct WhSystem {
    pub g1: LtiSystem,
    pub f: MlpNonlinearity,
    pub g2: LtiSystem,
}

impl WhSystem {
    pub fn to_record(&self, region: Option<EigenRegion>) -> WhRecord {
        WhRecord {
            g1: self.g1.to_record(region),
            f_w1: self.f.w1.iter().cloned().collect(),
            f_w2: self.f.w2.iter().cloned().collect(),
            f_b1: self.f.b1.iter().cloned().collect(),
            f_b2: self.f.b2,
            g2: self.g2.to_record(region),
        }
    }
}

/// Structured text record of a Wiener-Hammerstein system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhRecord {
    pub g1: LtiRecord,
    pub f_w1: Vec<f64>,
    pub f_b1: Vec<f64>,
    pub f_w2: Vec<f64>,
    pub f_b2: f64,
    pub g2: LtiRecord,
}

/// Draws `n_x` eigenvalues closed under conjugation, all strictly inside
/// `region`. The number of conjugate pairs is uniform over the feasible
/// counts; pair magnitudes and phases are uniform over the region, and real
/// eigenvalues are uniform on the positive-magnitude interval.
pub fn sample_eigenvalues<R: Rng>(
    rng: &mut R,
    n_x: usize,
    region: &EigenRegion,
) -> Result<Vec<Complex<f64>>, SysGenError> {
    if n_x == 0 {
        return Err(SysGenError::InvalidArgument(
            "cannot sample eigenvalues for order 0".into(),
        ));
    }
    region.validate()?;

    let feasible: Vec<usize> = (0..=n_x / 2)
        .filter(|&p| {
            let reals = n_x - 2 * p;
            (p == 0 || region.allows_pairs()) && (reals == 0 || region.allows_reals())
        })
        .collect();
    if feasible.is_empty() {
        return Err(SysGenError::InvalidRegion(format!(
            "region admits no eigenvalue assignment for order {n_x}"
        )));
    }
    let pairs = feasible[rng.gen_range(0..feasible.len())];

    let mut eigs = Vec::with_capacity(n_x);
    let phase_limit = region.pair_phase_limit();
    for _ in 0..pairs {
        let mag = rng.gen_range(region.mag_min..region.mag_max);
        let phase = rng.gen_range(0.0..phase_limit);
        let lambda = Complex::from_polar(mag, phase);
        eigs.push(lambda);
        eigs.push(lambda.conj());
    }
    for _ in 0..n_x - 2 * pairs {
        let mag = rng.gen_range(region.mag_min..region.mag_max);
        eigs.push(Complex::new(mag, 0.0));
    }
    Ok(eigs)
}

/// Assembles a real matrix with the given eigenvalues: real modal form
/// (2x2 rotation-scaling blocks for conjugate pairs, scalars for reals)
/// conjugated by a Haar-random orthogonal matrix.
///
/// Panics if `eigs` is not closed under complex conjugation.
pub fn build_state_matrix<R: Rng>(eigs: &[Complex<f64>], rng: &mut R) -> DMatrix<f64> {
    let n = eigs.len();
    assert!(n > 0, "need at least one eigenvalue");

    let mut reals: Vec<f64> = Vec::new();
    let mut upper: Vec<Complex<f64>> = Vec::new();
    let mut lower: Vec<Complex<f64>> = Vec::new();
    for &e in eigs {
        if e.im == 0.0 {
            reals.push(e.re);
        } else if e.im > 0.0 {
            upper.push(e);
        } else {
            lower.push(e);
        }
    }
    assert_eq!(
        upper.len(),
        lower.len(),
        "eigenvalue set not closed under conjugation"
    );
    let key = |c: &Complex<f64>| (c.re, c.im.abs());
    upper.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    lower.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    for (u, l) in upper.iter().zip(&lower) {
        assert!(
            (u.re - l.re).abs() <= 1e-9 && (u.im + l.im).abs() <= 1e-9,
            "eigenvalue set not closed under conjugation"
        );
    }

    let mut modal = DMatrix::<f64>::zeros(n, n);
    let mut k = 0;
    for e in &upper {
        modal[(k, k)] = e.re;
        modal[(k, k + 1)] = e.im;
        modal[(k + 1, k)] = -e.im;
        modal[(k + 1, k + 1)] = e.re;
        k += 2;
    }
    for &r in &reals {
        modal[(k, k)] = r;
        k += 1;
    }

    let q = random_orthogonal(n, rng);
    &q * modal * q.transpose()
}

/// Haar-distributed random orthogonal matrix: QR of a Gaussian matrix with
/// the sign of R's diagonal folded into Q.
fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Samples a stable SISO LTI system: order uniform on
/// `[order_min, order_max]`, eigenvalues inside `region`, `B`, `C`, `D`
/// entries i.i.d. standard normal.
pub fn sample_lti<R: Rng>(
    rng: &mut R,
    order_min: usize,
    order_max: usize,
    region: &EigenRegion,
) -> Result<LtiSystem, SysGenError> {
    if order_min == 0 || order_min > order_max {
        return Err(SysGenError::InvalidArgument(format!(
            "invalid order range [{order_min}, {order_max}]"
        )));
    }
    let n_x = rng.gen_range(order_min..=order_max);
    let eigs = sample_eigenvalues(rng, n_x, region)?;
    let a = build_state_matrix(&eigs, rng);
    let b = DMatrix::from_fn(n_x, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let c = DMatrix::from_fn(1, n_x, |_, _| rng.sample::<f64, _>(StandardNormal));
    let d = DMatrix::from_fn(1, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(LtiSystem::new(a, b, c, d))
}

/// Samples the static nonlinearity: Kaiming-normal weights
/// (`std = sqrt(2/fan_in)`), zero biases.
pub fn sample_mlp<R: Rng>(rng: &mut R, hidden: usize) -> Result<MlpNonlinearity, SysGenError> {
    if hidden == 0 {
        return Err(SysGenError::InvalidArgument(
            "hidden width must be >= 1".into(),
        ));
    }
    let std1 = (2.0f64).sqrt(); // fan_in = 1
    let std2 = (2.0 / hidden as f64).sqrt();
    let w1 = DVector::from_fn(hidden, |_, _| {
        std1 * rng.sample::<f64, _>(StandardNormal)
    });
    let w2 = DVector::from_fn(hidden, |_, _| {
        std2 * rng.sample::<f64, _>(StandardNormal)
    });
    Ok(MlpNonlinearity {
        w1,
        b1: DVector::zeros(hidden),
        w2,
        b2: 0.0,
    })
}

/// Samples a Wiener-Hammerstein system with both LTI blocks drawn from the
/// same order range and eigenvalue region.
pub fn sample_wh<R: Rng>(
    rng: &mut R,
    order_min: usize,
    order_max: usize,
    region: &EigenRegion,
    hidden: usize,
) -> Result<WhSystem, SysGenError> {
    let g1 = sample_lti(rng, order_min, order_max, region)?;
    let f = sample_mlp(rng, hidden)?;
    let g2 = sample_lti(rng, order_min, order_max, region)?;
    Ok(WhSystem { g1, f, g2 })
}

/// Simulates the state-space recursion from `x0` (zero state when `None`):
/// `y_k = C x_k + D u_k`, `x_{k+1} = A x_k + B u_k`.
pub fn simulate_lti(
    sys: &LtiSystem,
    u: &[f64],
    x0: Option<&DVector<f64>>,
) -> Result<Vec<f64>, SysGenError> {
    if u.iter().any(|v| !v.is_finite()) {
        return Err(SysGenError::InvalidArgument(
            "input sequence contains non-finite values".into(),
        ));
    }
    let n = sys.order();
    let mut x = match x0 {
        Some(v) => {
            if v.len() != n {
                return Err(SysGenError::InvalidArgument(format!(
                    "initial state length {} does not match order {n}",
                    v.len()
                )));
            }
            v.clone()
        }
        None => DVector::zeros(n),
    };
    let d = sys.d[(0, 0)];
    let c_vec = sys.c.row(0).transpose();
    let b_vec = sys.b.column(0).clone_owned();
    let mut ax = DVector::zeros(n);
    let mut y = Vec::with_capacity(u.len());
    for &uk in u {
        y.push(c_vec.dot(&x) + d * uk);
        sys.a.mul_to(&x, &mut ax);
        ax.axpy(uk, &b_vec, 1.0);
        std::mem::swap(&mut x, &mut ax);
    }
    Ok(y)
}

/// Simulates the three-block chain: `g1`, then the static nonlinearity
/// applied elementwise, then `g2`.
pub fn simulate_wh(sys: &WhSystem, u: &[f64]) -> Result<Vec<f64>, SysGenError> {
    let v = simulate_lti(&sys.g1, u, None)?;
    let w: Vec<f64> = v.iter().map(|&vi| sys.f.apply(vi)).collect();
    simulate_lti(&sys.g2, &w, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from;
    use approx::assert_relative_eq;

    #[test]
    fn region_validation() {
        assert!(EigenRegion::new(0.5, 0.97, -1.0, 1.0).is_ok());
        assert!(EigenRegion::new(0.0, 0.97, -1.0, 1.0).is_err());
        assert!(EigenRegion::new(0.5, 1.0, -1.0, 1.0).is_err());
        assert!(EigenRegion::new(0.5, 0.97, 1.0, -1.0).is_err());
        assert!(EigenRegion::new(0.5, 0.97, -4.0, 1.0).is_err());
    }

    #[test]
    fn single_eigenvalue_is_real_in_range() {
        let region = EigenRegion::nominal();
        let mut rng = rng_from(1);
        for _ in 0..100 {
            let eigs = sample_eigenvalues(&mut rng, 1, &region).unwrap();
            assert_eq!(eigs.len(), 1);
            assert_eq!(eigs[0].im, 0.0);
            assert!(eigs[0].re > 0.5 && eigs[0].re < 0.97);
        }
    }

    #[test]
    fn pair_sampling_closed_under_conjugation() {
        let region = EigenRegion::nominal();
        let mut rng = rng_from(2);
        for _ in 0..200 {
            let eigs = sample_eigenvalues(&mut rng, 2, &region).unwrap();
            assert_eq!(eigs.len(), 2);
            if eigs[0].im != 0.0 {
                assert_eq!(eigs[0].conj(), eigs[1]);
            }
            for e in &eigs {
                let m = e.norm();
                assert!(m > 0.5 && m < 0.97);
            }
        }
    }

    #[test]
    fn monte_carlo_eigenvalues_inside_region() {
        // 1000 repetitions of 10 eigenvalues against the region predicate.
        let region = EigenRegion::nominal();
        let mut rng = rng_from(3);
        for _ in 0..1000 {
            for e in sample_eigenvalues(&mut rng, 10, &region).unwrap() {
                assert!(region.contains(e), "eigenvalue {e} escaped the region");
            }
        }
    }

    #[test]
    fn zero_order_rejected() {
        let mut rng = rng_from(4);
        assert!(matches!(
            sample_eigenvalues(&mut rng, 0, &EigenRegion::nominal()),
            Err(SysGenError::InvalidArgument(_))
        ));
    }

    #[test]
    fn scalar_state_matrix() {
        let mut rng = rng_from(5);
        let a = build_state_matrix(&[Complex::new(0.6, 0.0)], &mut rng);
        assert_eq!(a.nrows(), 1);
        assert_relative_eq!(a[(0, 0)].abs(), 0.6, max_relative = 1e-12);
    }

    #[test]
    fn pair_state_matrix_eigenvalues_match() {
        // Independent oracle: eigen-decompose the built matrix.
        let mut rng = rng_from(6);
        let lambda = Complex::from_polar(0.7, std::f64::consts::FRAC_PI_4);
        let a = build_state_matrix(&[lambda, lambda.conj()], &mut rng);
        let mut eig: Vec<Complex<f64>> = a.complex_eigenvalues().iter().cloned().collect();
        eig.sort_by(|x, y| x.im.partial_cmp(&y.im).unwrap());
        assert_relative_eq!(eig[0].re, lambda.re, max_relative = 1e-9);
        assert_relative_eq!(eig[0].im, -lambda.im, max_relative = 1e-9);
        assert_relative_eq!(eig[1].re, lambda.re, max_relative = 1e-9);
        assert_relative_eq!(eig[1].im, lambda.im, max_relative = 1e-9);
    }

    #[test]
    fn state_matrix_preserves_eigen_multiset() {
        let region = EigenRegion::nominal();
        let mut rng = rng_from(7);
        for _ in 0..50 {
            let eigs = sample_eigenvalues(&mut rng, 6, &region).unwrap();
            let a = build_state_matrix(&eigs, &mut rng);
            let mut got: Vec<Complex<f64>> = a.complex_eigenvalues().iter().cloned().collect();
            let mut want = eigs.clone();
            let key = |c: &Complex<f64>| (c.re, c.im);
            got.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
            want.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
            for (g, w) in got.iter().zip(&want) {
                assert!(
                    (g - w).norm() <= 1e-9 * w.norm().max(1.0),
                    "eigenvalue drift: got {g}, want {w}"
                );
            }
        }
    }

    #[test]
    fn spectral_radius_bounded_by_power_iteration() {
        // Power-iteration bound over 1000 sampled 10th-order systems.
        let region = EigenRegion::nominal();
        let mut rng = rng_from(8);
        for _ in 0..1000 {
            let eigs = sample_eigenvalues(&mut rng, 10, &region).unwrap();
            let a = build_state_matrix(&eigs, &mut rng);
            let mut x = DVector::from_fn(10, |i, _| 1.0 + (i as f64) * 0.1);
            x /= x.norm();
            let mut log_growth = 0.0;
            let steps = 200;
            for _ in 0..steps {
                x = &a * x;
                let norm = x.norm();
                log_growth += norm.ln();
                x /= norm;
            }
            let rho = (log_growth / steps as f64).exp();
            assert!(rho < 0.97, "power iteration estimate {rho} too large");
        }
    }

    #[test]
    fn order_histogram_uniform() {
        // Chi-square style bound: counts within 3 sigma of the multinomial
        // expectation for each of the 10 bins.
        let region = EigenRegion::nominal();
        let mut rng = rng_from(9);
        let n = 10_000usize;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            let sys = sample_lti(&mut rng, 1, 10, &region).unwrap();
            counts[sys.order() - 1] += 1;
        }
        let p = 0.1;
        let sigma = ((n as f64) * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(
                dev <= 3.0 * sigma,
                "order {} count {} deviates {dev:.1} > 3 sigma ({sigma:.1})",
                i + 1,
                c
            );
        }
    }

    #[test]
    fn degenerate_order_range() {
        let region = EigenRegion::nominal();
        let mut rng = rng_from(10);
        for _ in 0..20 {
            assert_eq!(sample_lti(&mut rng, 3, 3, &region).unwrap().order(), 3);
        }
    }

    #[test]
    fn wh_block_orders_in_range() {
        let region = EigenRegion::nominal();
        let mut rng = rng_from(11);
        for _ in 0..50 {
            let sys = sample_wh(&mut rng, 1, 5, &region, DEFAULT_MLP_HIDDEN).unwrap();
            assert!((1..=5).contains(&sys.g1.order()));
            assert!((1..=5).contains(&sys.g2.order()));
        }
    }

    #[test]
    fn mlp_shapes_and_zero_point() {
        let mut rng = rng_from(12);
        let f = sample_mlp(&mut rng, 32).unwrap();
        assert_eq!(f.w1.len(), 32);
        assert_eq!(f.w2.len(), 32);
        assert_eq!(f.apply(0.0), 0.0); // zero biases, tanh(0) = 0
    }

    #[test]
    fn mlp_kaiming_scale() {
        let mut rng = rng_from(13);
        let h = 32;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for _ in 0..10_000 {
            let f = sample_mlp(&mut rng, h).unwrap();
            sum_sq += f.w2.iter().map(|w| w * w).sum::<f64>();
            count += h;
        }
        let std = (sum_sq / count as f64).sqrt();
        let expected = (2.0 / h as f64).sqrt();
        assert!(
            (std - expected).abs() / expected < 0.05,
            "W2 std {std} vs expected {expected}"
        );
    }

    fn scalar_system(a: f64, b: f64, c: f64, d: f64) -> LtiSystem {
        LtiSystem::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, c),
            DMatrix::from_element(1, 1, d),
        )
    }

    #[test]
    fn simulate_hand_recursion() {
        let sys = scalar_system(0.5, 1.0, 2.0, 0.0);
        let y = simulate_lti(&sys, &[1.0, 0.0, 0.0], None).unwrap();
        assert_eq!(y, vec![0.0, 2.0, 1.0]);

        let sys = scalar_system(0.5, 1.0, 2.0, 1.0);
        let y = simulate_lti(&sys, &[1.0, 0.0, 0.0], None).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 1.0]);
    }

    #[test]
    fn simulate_rejects_non_finite_input() {
        let sys = scalar_system(0.5, 1.0, 1.0, 0.0);
        assert!(simulate_lti(&sys, &[1.0, f64::NAN], None).is_err());
    }

    #[test]
    fn simulate_bounded_and_matches_reference() {
        // Stability implies bounded output on white noise; cross-check the
        // matrix recursion against a plain scalar-loop reference.
        let region = EigenRegion::nominal();
        let mut rng = rng_from(14);
        let sys = sample_lti(&mut rng, 1, 10, &region).unwrap();
        let u: Vec<f64> = (0..10_000)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let y = simulate_lti(&sys, &u, None).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 1e6, "output peak {peak} not plausibly bounded");

        let n = sys.order();
        let mut x = vec![0.0f64; n];
        for (k, &uk) in u.iter().enumerate() {
            let mut yk = sys.d[(0, 0)] * uk;
            for j in 0..n {
                yk += sys.c[(0, j)] * x[j];
            }
            assert_relative_eq!(y[k], yk, max_relative = 1e-9, epsilon = 1e-9);
            let mut xn = vec![0.0f64; n];
            for i in 0..n {
                let mut acc = sys.b[(i, 0)] * uk;
                for j in 0..n {
                    acc += sys.a[(i, j)] * x[j];
                }
                xn[i] = acc;
            }
            x = xn;
        }
    }

    #[test]
    fn simulate_is_linear() {
        let region = EigenRegion::nominal();
        let mut rng = rng_from(15);
        for _ in 0..20 {
            let sys = sample_lti(&mut rng, 1, 10, &region).unwrap();
            let u1: Vec<f64> = (0..200)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let u2: Vec<f64> = (0..200)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let (alpha, beta) = (1.7, -0.4);
            let mixed: Vec<f64> = u1
                .iter()
                .zip(&u2)
                .map(|(a, b)| alpha * a + beta * b)
                .collect();
            let y1 = simulate_lti(&sys, &u1, None).unwrap();
            let y2 = simulate_lti(&sys, &u2, None).unwrap();
            let ym = simulate_lti(&sys, &mixed, None).unwrap();
            for k in 0..200 {
                let expect = alpha * y1[k] + beta * y2[k];
                assert_relative_eq!(ym[k], expect, max_relative = 1e-9, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn wh_identity_nonlinearity_matches_cascade() {
        // w2 * tanh(w1 v) ~= v for small w1: the chain degenerates to g2.g1.
        let region = EigenRegion::nominal();
        let mut rng = rng_from(16);
        let g1 = sample_lti(&mut rng, 1, 5, &region).unwrap();
        let g2 = sample_lti(&mut rng, 1, 5, &region).unwrap();
        let eps = 1e-5;
        let f = MlpNonlinearity {
            w1: DVector::from_element(1, eps),
            b1: DVector::zeros(1),
            w2: DVector::from_element(1, 1.0 / eps),
            b2: 0.0,
        };
        let wh = WhSystem {
            g1: g1.clone(),
            f,
            g2: g2.clone(),
        };
        let u: Vec<f64> = (0..300)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let y_wh = simulate_wh(&wh, &u).unwrap();
        let mid = simulate_lti(&g1, &u, None).unwrap();
        let y_cascade = simulate_lti(&g2, &mid, None).unwrap();
        let scale = y_cascade.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for k in 0..u.len() {
            assert!(
                (y_wh[k] - y_cascade[k]).abs() / scale < 1e-6,
                "step {k}: {} vs {}",
                y_wh[k],
                y_cascade[k]
            );
        }
    }

    #[test]
    fn wh_zero_input_zero_output() {
        let region = EigenRegion::nominal();
        let mut rng = rng_from(17);
        let sys = sample_wh(&mut rng, 1, 5, &region, DEFAULT_MLP_HIDDEN).unwrap();
        let y = simulate_wh(&sys, &[0.0; 64]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wh_detects_nonlinearity() {
        // Doubling the input must not double the output for most systems.
        let region = EigenRegion::nominal();
        let mut rng = rng_from(18);
        let mut nonlinear = 0;
        let total = 100;
        for _ in 0..total {
            let sys = sample_wh(&mut rng, 1, 5, &region, DEFAULT_MLP_HIDDEN).unwrap();
            let u: Vec<f64> = (0..200)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let u2: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
            let y = simulate_wh(&sys, &u).unwrap();
            let y2 = simulate_wh(&sys, &u2).unwrap();
            let num: f64 = y2
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - 2.0 * b).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = y.iter().map(|b| (2.0 * b).powi(2)).sum::<f64>().sqrt();
            if num / den.max(1e-12) > 1e-3 {
                nonlinear += 1;
            }
        }
        assert!(
            nonlinear >= 90,
            "only {nonlinear}/{total} sampled systems displayed nonlinearity"
        );
    }

    #[test]
    fn sampling_is_deterministic() {
        let region = EigenRegion::nominal();
        let s1 = sample_lti(&mut rng_from(42), 1, 10, &region).unwrap();
        let s2 = sample_lti(&mut rng_from(42), 1, 10, &region).unwrap();
        assert_eq!(s1, s2);
        let w1 = sample_wh(&mut rng_from(43), 1, 5, &region, 32).unwrap();
        let w2 = sample_wh(&mut rng_from(43), 1, 5, &region, 32).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn record_round_trip() {
        let region = EigenRegion::nominal();
        let sys = sample_lti(&mut rng_from(44), 1, 4, &region).unwrap();
        let rec = sys.to_record(Some(region));
        let json = serde_json::to_string(&rec).unwrap();
        let back: LtiRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.order, sys.order());
        assert_eq!(back.a, rec.a);
    }
}
