//! Dense vector helpers, the seeded random stream, truncated-normal sampling
//! and a small dense symmetric eigen-solver used as a test oracle.
//!
//! Everything accumulates in `f64`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Flat parameter-sized vector (θ, gradients, moments, eigenvector iterates).
pub type FlatVector = Vec<f64>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y <- y + alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi *= alpha;
    }
}

/// Normalizes `x` in place and returns its previous norm.
pub fn normalize(x: &mut [f64]) -> f64 {
    let n = norm(x);
    if n > 0.0 {
        scale(1.0 / n, x);
    }
    n
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Seeded random stream.
///
/// Backed by ChaCha8, whose output is specified bit-for-bit and therefore
/// identical across platforms. Normal draws use the ziggurat sampler from
/// `rand_distr`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from the same seed. Streams with different
    /// ids never overlap.
    pub fn substream(seed: u64, id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        Self { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.rng.gen::<bool>()
    }

    pub fn normal_vec(&mut self, n: usize) -> FlatVector {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Uniformly distributed direction on the unit sphere.
    pub fn unit_vector(&mut self, n: usize) -> FlatVector {
        loop {
            let mut v = self.normal_vec(n);
            if normalize(&mut v) > 0.0 {
                return v;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

/// Half-width of the truncation window, in standard deviations.
pub const TRUNCATION_BOUND: f64 = 2.0;

/// Variance of a standard normal truncated to `[-2, 2]`:
/// `1 - 2 b phi(b) / (Phi(b) - Phi(-b))` with `b = 2`.
pub fn truncated_unit_variance() -> f64 {
    let b = TRUNCATION_BOUND;
    let pdf = (-0.5 * b * b).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mass = statrs::function::erf::erf(b / std::f64::consts::SQRT_2);
    1.0 - 2.0 * b * pdf / mass
}

/// `n` draws from a normal truncated to two standard deviations, rescaled so
/// the output variance is exactly `sigma^2`.
pub fn truncated_normal(rng: &mut RngStream, n: usize, sigma: f64) -> FlatVector {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let rescale = sigma / truncated_unit_variance().sqrt();
    (0..n)
        .map(|_| loop {
            let z = rng.standard_normal();
            if z.abs() <= TRUNCATION_BOUND {
                break z * rescale;
            }
        })
        .collect()
}

/// Dense symmetric matrix stored as its packed lower triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    lower: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            lower: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..=i {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        Self::from_fn(diag.len(), |i, j| if i == j { diag[i] } else { 0.0 })
    }

    /// Builds from a full row-major matrix, reading the lower triangle only.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape {
                expected: format!("{dim}x{dim}"),
                got: "ragged rows".into(),
            });
        }
        Ok(Self::from_fn(dim, |i, j| rows[i][j]))
    }

    /// Symmetric matrix with i.i.d. standard normal lower-triangle entries.
    pub fn random(rng: &mut RngStream, dim: usize) -> Self {
        Self::from_fn(dim, |_, _| rng.standard_normal())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn index(i: usize, j: usize) -> usize {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        r * (r + 1) / 2 + c
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[Self::index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.lower[Self::index(i, j)] = value;
    }

    pub fn matvec(&self, x: &[f64]) -> FlatVector {
        let n = self.dim;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let row = i * (i + 1) / 2;
            for j in 0..i {
                let a = self.lower[row + j];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += self.lower[row + i] * x[i];
        }
        y
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.matvec(x))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.lower)
    }
}

/// Algebraically largest eigenpair by full dense decomposition.
pub fn dense_top_eig(a: &SymMatrix) -> Result<(f64, FlatVector)> {
    if !a.is_finite() {
        return Err(Error::NonFinite("symmetric matrix"));
    }
    if a.dim() == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    let eig = a.to_dense().symmetric_eigen();
    let (idx, &value) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .expect("non-empty spectrum");
    let mut vector: FlatVector = eig.eigenvectors.column(idx).iter().copied().collect();
    normalize(&mut vector);
    Ok((value, vector))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::{BigInt, BigRational, Signed, Zero};
    use proptest::prelude::*;

    #[test]
    fn truncated_normal_zero_sigma() {
        let mut rng = RngStream::new(7);
        assert_eq!(truncated_normal(&mut rng, 4, 0.0), vec![0.0; 4]);
    }

    #[test]
    fn truncation_variance_constant() {
        // Monte-Carlo check of the analytic constant with a large sample of
        // raw truncated draws.
        let mut rng = RngStream::new(99);
        let n = 400_000;
        let mut acc = 0.0;
        let mut count = 0;
        while count < n {
            let z = rng.standard_normal();
            if z.abs() <= 2.0 {
                acc += z * z;
                count += 1;
            }
        }
        let mc = acc / n as f64;
        assert!((mc - truncated_unit_variance()).abs() < 5e-3, "{mc}");
        assert!((truncated_unit_variance() - 0.7737).abs() < 1e-4);
    }

    #[test]
    fn truncated_normal_unit_variance_and_bound() {
        let mut rng = RngStream::new(7);
        let draws = truncated_normal(&mut rng, 100_000, 1.0);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((0.98..=1.02).contains(&var), "variance {var}");
        let bound = 2.0 / 0.7737f64.sqrt() + 1e-9;
        let max = draws.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(max <= bound, "max {max} > {bound}");
    }

    #[test]
    fn truncated_normal_reproducible() {
        let a = truncated_normal(&mut RngStream::new(11), 1000, 0.3);
        let b = truncated_normal(&mut RngStream::new(11), 1000, 0.3);
        assert_eq!(a, b);
        let c = truncated_normal(&mut RngStream::new(12), 1000, 0.3);
        assert_ne!(a, c);
    }

    #[test]
    fn substreams_differ() {
        let a = RngStream::substream(3, 0).normal_vec(8);
        let b = RngStream::substream(3, 1).normal_vec(8);
        assert_ne!(a, b);
        assert_eq!(a, RngStream::substream(3, 0).normal_vec(8));
    }

    #[test]
    fn sym_matrix_stores_one_triangle() {
        let mut m = SymMatrix::zeros(3);
        m.set(0, 2, 5.0);
        assert_eq!(m.get(2, 0), 5.0);
        let rows = vec![vec![1.0, 2.0], vec![2.0, 3.0]];
        let m = SymMatrix::from_rows(&rows).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]), vec![3.0, 5.0]);
    }

    #[test]
    fn dense_top_eig_small_cases() {
        let (v, e) = dense_top_eig(&SymMatrix::diagonal(&[3.0, 1.0])).unwrap();
        assert!((v - 3.0).abs() < 1e-14);
        assert!((e[0].abs() - 1.0).abs() < 1e-14 && e[1].abs() < 1e-14);

        let swap = SymMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (v, e) = dense_top_eig(&swap).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e[0].abs() - s).abs() < 1e-12 && (e[0] - e[1]).abs() < 1e-12);
    }

    #[test]
    fn dense_top_eig_rejects_non_finite() {
        let mut m = SymMatrix::diagonal(&[1.0, 2.0]);
        m.set(1, 0, f64::NAN);
        assert!(matches!(dense_top_eig(&m), Err(Error::NonFinite(_))));
    }

    fn rational(x: f64) -> BigRational {
        BigRational::from_float(x).expect("finite")
    }

    /// Number of eigenvalues of `a` strictly greater than `shift`, from the
    /// inertia of `a - shift I` computed by exact rational elimination.
    fn count_above(a: &SymMatrix, shift: &BigRational) -> usize {
        let n = a.dim();
        let mut m: Vec<Vec<BigRational>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let v = rational(a.get(i, j));
                        if i == j {
                            v - shift
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        let mut positive = 0;
        for k in 0..n {
            let pivot = m[k][k].clone();
            // A zero pivot only happens when `shift` hits an eigenvalue of a
            // leading minor exactly; bisection midpoints are dyadic rationals,
            // which do not occur for these random matrices.
            assert!(!pivot.is_zero(), "exact zero pivot");
            if pivot.is_positive() {
                positive += 1;
            }
            for i in k + 1..n {
                let factor = &m[i][k] / &pivot;
                for j in k..n {
                    let delta = &factor * &m[k][j];
                    m[i][j] -= delta;
                }
            }
        }
        positive
    }

    #[test]
    fn dense_top_eig_matches_exact_inertia_bisection() {
        let mut rng = RngStream::new(2024);
        let a = SymMatrix::random(&mut rng, 8);
        // Gershgorin bound brackets the whole spectrum.
        let bound = (0..8)
            .map(|i| (0..8).map(|j| a.get(i, j).abs()).sum::<f64>())
            .fold(0.0f64, f64::max)
            .ceil();
        let mut lo = rational(-bound);
        let mut hi = rational(bound);
        let two = BigRational::from_integer(BigInt::from(2));
        for _ in 0..60 {
            let mid = (&lo + &hi) / &two;
            if count_above(&a, &mid) >= 1 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let exact = num::ToPrimitive::to_f64(&((lo + hi) / two)).unwrap();
        let (value, _) = dense_top_eig(&a).unwrap();
        assert!(
            (value - exact).abs() <= 1e-10 * exact.abs().max(1.0),
            "{value} vs {exact}"
        );
    }

    fn vec_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (1usize..32).prop_flat_map(|n| {
            (
                prop::collection::vec(-100.0f64..100.0, n),
                prop::collection::vec(-100.0f64..100.0, n),
                -10.0f64..10.0,
            )
        })
    }

    proptest! {
        #[test]
        fn dot_is_bilinear((x, y, a) in vec_strategy()) {
            let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
            let lhs = dot(&ax, &y);
            let rhs = a * dot(&x, &y);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
            prop_assert!(dot(&x, &x) >= 0.0);
        }

        #[test]
        fn norm_triangle_inequality((x, y, _a) in vec_strategy()) {
            let mut s = y.clone();
            axpy(1.0, &x, &mut s);
            prop_assert!(norm(&s) <= norm(&x) + norm(&y) + 1e-9);
        }

        #[test]
        fn axpy_matches_elementwise((x, y, a) in vec_strategy()) {
            let mut out = y.clone();
            axpy(a, &x, &mut out);
            for i in 0..x.len() {
                prop_assert_eq!(out[i], y[i] + a * x[i]);
            }
        }
    }
}
