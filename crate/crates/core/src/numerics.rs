//! Dense numeric primitives shared by every stage of the pipeline.
//!
//! Everything here works in `f64` and is a pure function of its inputs,
//! except [`Rng`], which is a single-owner seeded stream.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Clamp floor applied to both arguments of a KL divergence.
pub const KL_EPS: f64 = 1e-8;

/// Tolerance used when validating that a vector sums to one.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

/// A probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Validates `values` as a probability vector.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("distribution must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("distribution entries must be finite and >= 0"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::invalid(format!("distribution sums to {sum}, expected 1")));
        }
        Ok(Self(values))
    }

    /// Normalizes non-negative weights to sum one. Fails if the total mass is zero.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("weights must be finite and >= 0"));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::invalid("weights have zero total mass"));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("distribution must be non-empty"));
        }
        Ok(Self(vec![1.0 / len as f64; len]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Row-major 2-D grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Temperature softmax with max-shift.
pub fn softmax(v: &[f64], tau: f64) -> Result<Distribution> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("softmax temperature must be > 0, got {tau}")));
    }
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(Distribution(softmax_unchecked(v, tau)))
}

/// Softmax for callers that already validated their inputs.
pub(crate) fn softmax_unchecked(v: &[f64], tau: f64) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Clamps every entry at `eps` and renormalizes to sum one.
pub fn clamp_renormalize(p: &[f64], eps: f64) -> Vec<f64> {
    let clamped: Vec<f64> = p.iter().map(|x| x.max(eps)).collect();
    let sum: f64 = clamped.iter().sum();
    clamped.into_iter().map(|x| x / sum).collect()
}

/// `KL(p || q)` in nats, after clamping both arguments at `eps` and renormalizing.
pub fn kl_divergence(p: &Distribution, q: &Distribution, eps: f64) -> Result<f64> {
    kl_divergence_raw(p.as_slice(), q.as_slice(), eps)
}

pub(crate) fn kl_divergence_raw(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("KL length mismatch: {} vs {}", p.len(), q.len())));
    }
    let p = clamp_renormalize(p, eps);
    let q = clamp_renormalize(q, eps);
    let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    // Rounding can leave a tiny negative value for identical inputs.
    Ok(kl.max(0.0))
}

/// Normalized isotropic Gaussian kernel of side `2 * ceil(3 sigma) + 1`.
pub fn gaussian_kernel(sigma: f64) -> Result<Grid2D> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let side = (2 * radius + 1) as usize;
    let mut values = Vec::with_capacity(side * side);
    for y in -radius..=radius {
        for x in -radius..=radius {
            let r2 = (x * x + y * y) as f64;
            values.push((-r2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = values.iter().sum();
    for v in &mut values {
        *v /= sum;
    }
    Grid2D::new(side, side, values)
}

/// Mirror index into `0..n` without repeating the edge sample (`-1 -> 1`).
fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as i64 {
        m = period - m;
    }
    m as usize
}

/// Same-size 2-D convolution with reflect padding. The kernel must be square with odd side.
pub fn convolve2d(mask: &Grid2D, kernel: &Grid2D) -> Result<Grid2D> {
    let (kh, kw) = kernel.dims();
    if kh != kw || kh % 2 == 0 {
        return Err(Error::invalid(format!("kernel must be square with odd side, got {kh}x{kw}")));
    }
    let r = (kh / 2) as i64;
    let (h, w) = mask.dims();
    let mut out = Grid2D::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for a in 0..kh {
                let si = reflect_index(i as i64 - (a as i64 - r), h);
                for b in 0..kw {
                    let sj = reflect_index(j as i64 - (b as i64 - r), w);
                    acc += kernel.get(a, b) * mask.get(si, sj);
                }
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine length mismatch: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero-norm vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Central-difference gradient estimate of `f` at `theta`.
pub fn finite_diff_gradient<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Seeded ChaCha8 stream. Identical seeds give identical streams on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, keyed by `stream`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self { seed: self.seed, inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use super::Rng;

    #[test]
    fn softmax_examples() {
        let u = softmax(&[3.0, 3.0, 3.0], 1.0).unwrap();
        for v in u.as_slice() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert_abs_diff_eq!(s.as_slice()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.as_slice()[1], 0.75, epsilon = 1e-15);
        let sharp = softmax(&[0.1, 0.9], 0.01).unwrap();
        assert!(sharp.as_slice()[1] >= 1.0 - 1e-10);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[1.0, f64::NAN], 1.0).is_err());
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let half = Distribution::new(vec![0.5, 0.5]).unwrap();
        let skew = Distribution::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(kl_divergence(&half, &half, KL_EPS).unwrap(), 0.0);
        // term-by-term: 0.5 ln 2 + 0.5 ln(2/3)
        let fwd = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let rev = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert_abs_diff_eq!(kl_divergence(&half, &skew, KL_EPS).unwrap(), fwd, epsilon = 1e-7);
        assert_abs_diff_eq!(kl_divergence(&skew, &half, KL_EPS).unwrap(), rev, epsilon = 1e-7);
        assert_abs_diff_eq!(fwd, 0.1438, epsilon = 1e-4);
        assert_abs_diff_eq!(rev, 0.1308, epsilon = 1e-4);
        let short = Distribution::new(vec![1.0]).unwrap();
        assert!(kl_divergence(&half, &short, KL_EPS).is_err());
    }

    #[test]
    fn kl_handles_zero_cells() {
        let p = Distribution::new(vec![1.0, 0.0]).unwrap();
        let q = Distribution::new(vec![0.0, 1.0]).unwrap();
        let kl = kl_divergence(&p, &q, KL_EPS).unwrap();
        assert!(kl.is_finite() && kl > 10.0);
    }

    #[test]
    fn kernel_examples() {
        let k = gaussian_kernel(0.1).unwrap();
        assert_eq!(k.dims(), (3, 3));
        assert!(k.get(1, 1) >= 0.999);
        let k1 = gaussian_kernel(1.0).unwrap();
        assert_eq!(k1.dims(), (7, 7));
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(k1.get(i, j), k1.get(6 - i, j));
                assert_eq!(k1.get(i, j), k1.get(i, 6 - j));
                assert_eq!(k1.get(i, j), k1.get(j, i));
            }
        }
        for sigma in [0.3, 1.0, 2.0, 3.7] {
            assert_abs_diff_eq!(gaussian_kernel(sigma).unwrap().sum(), 1.0, epsilon = 1e-12);
        }
        assert!(gaussian_kernel(0.0).is_err());
    }

    #[test]
    fn convolve_constant_and_impulse() {
        let k = gaussian_kernel(1.0).unwrap();
        let ones = Grid2D::filled(9, 9, 1.0);
        let out = convolve2d(&ones, &k).unwrap();
        for v in out.values() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
        let mut impulse = Grid2D::zeros(9, 9);
        impulse.set(4, 4, 1.0);
        let out = convolve2d(&impulse, &k).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let expected = if (1..8).contains(&i) && (1..8).contains(&j) {
                    k.get(i - 1, j - 1)
                } else {
                    0.0
                };
                assert_abs_diff_eq!(out.get(i, j), expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn convolve_rejects_even_kernel() {
        let k = Grid2D::filled(2, 2, 0.25);
        assert!(convolve2d(&Grid2D::zeros(4, 4), &k).is_err());
    }

    #[test]
    fn reflect_index_mirrors() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(-7, 3), 1);
        assert_eq!(reflect_index(4, 1), 0);
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.8, epsilon = 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_gradient(|t| dot(t, t), &[1.0, 2.0], 1e-5).unwrap();
        assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g[1], 4.0, epsilon = 1e-6);
        let z = finite_diff_gradient(|_| 3.5, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(finite_diff_gradient(|_| f64::NAN, &[1.0], 1e-5).is_err());
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut fa = a.fork(3);
        let mut fb = b.fork(3);
        assert_eq!(fa.normal().to_bits(), fb.normal().to_bits());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution_and_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..20),
            tau in 0.01f64..10.0,
            c in -100.0f64..100.0,
        ) {
            let s = softmax(&v, tau).unwrap();
            prop_assert!((s.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.as_slice().iter().all(|x| *x >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let t = softmax(&shifted, tau).unwrap();
            for (a, b) in s.as_slice().iter().zip(t.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn kl_is_non_negative(
            a in prop::collection::vec(0.0f64..1.0, 2..12),
            b in prop::collection::vec(0.0f64..1.0, 2..12),
        ) {
            let n = a.len().min(b.len());
            let pa: Vec<f64> = a[..n].iter().map(|x| x + 1e-3).collect();
            let pb: Vec<f64> = b[..n].iter().map(|x| x + 1e-3).collect();
            let p = Distribution::from_weights(pa).unwrap();
            let q = Distribution::from_weights(pb).unwrap();
            prop_assert!(kl_divergence(&p, &q, KL_EPS).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&p, &p, KL_EPS).unwrap().abs() < 1e-12);
        }

        #[test]
        fn smoothing_stays_in_unit_interval(
            cells in prop::collection::vec(0.0f64..=1.0, 36),
            sigma in 0.2f64..3.0,
        ) {
            let grid = Grid2D::new(6, 6, cells).unwrap();
            let out = convolve2d(&grid, &gaussian_kernel(sigma).unwrap()).unwrap();
            prop_assert!(out.min() >= -1e-12 && out.max() <= 1.0 + 1e-12);
        }

        #[test]
        fn cosine_is_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(l2_norm(&a) > 1e-3 && l2_norm(&b) > 1e-3);
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            let lhs = cosine_similarity(&scaled, &b).unwrap();
            let rhs = cosine_similarity(&a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
