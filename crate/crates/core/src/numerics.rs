//! Dense f64 vectors and matrices, activations, cosine similarity and a
//! seedable counter-based random generator.
//!
//! Everything here is a pure function of its inputs except [`Rng`], which is
//! single-owner. Parallel code derives independent streams with
//! [`Rng::stream`] instead of sharing a generator.

use std::ops::{Deref, DerefMut};

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Self {
        DenseVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        DenseVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for DenseVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(values: Vec<f64>) -> Self {
        DenseVector(values)
    }
}

impl From<&[f64]> for DenseVector {
    fn from(values: &[f64]) -> Self {
        DenseVector(values.to_vec())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::DimensionMismatch {
                context: "matrix construction",
                expected: rows * cols,
                actual: values.len(),
            });
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "matrix rows",
                    expected: cols,
                    actual: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.values[i * self.cols + j] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `out = self · v`, without shape checks.
    pub(crate) fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.values.chunks_exact(self.cols.max(1))) {
            *o = dot(row, v);
        }
    }

    /// `out += selfᵀ · v`, without shape checks.
    pub(crate) fn matvec_transpose_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&scale, row) in v.iter().zip(self.values.chunks_exact(self.cols.max(1))) {
            if scale != 0.0 {
                axpy(scale, row, out);
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn matvec(m: &DenseMatrix, v: &[f64]) -> Result<DenseVector> {
    if m.cols != v.len() {
        return Err(Error::DimensionMismatch {
            context: "matvec",
            expected: m.cols,
            actual: v.len(),
        });
    }
    let mut out = vec![0.0; m.rows];
    m.matvec_into(v, &mut out);
    Ok(DenseVector(out))
}

/// `max(0, x)`, letting NaN through so bad inputs surface downstream.
#[inline]
pub fn relu_scalar(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

pub fn relu(v: &[f64]) -> DenseVector {
    DenseVector(v.iter().map(|&x| relu_scalar(x)).collect())
}

pub fn softmax(v: &[f64]) -> DenseVector {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    DenseVector(out)
}

/// `log Σ exp(v)`, shifted by the maximum.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Cosine similarity together with a flag raised when either input had zero
/// norm (in which case `value` is 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

/// Combines a precomputed dot product and norms into a clamped cosine.
pub fn cosine_from_parts(dot: f64, norm_x: f64, norm_z: f64) -> Cosine {
    let denom = norm_x * norm_z;
    if denom == 0.0 {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (dot / denom).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

pub fn cosine_similarity(x: &[f64], z: &[f64]) -> Result<Cosine> {
    if x.len() != z.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine similarity",
            expected: x.len(),
            actual: z.len(),
        });
    }
    let cos = cosine_from_parts(dot(x, z), norm(x), norm(z));
    if cos.degenerate {
        log::debug!("cosine similarity of a zero-norm vector; returning 0");
    }
    Ok(cos)
}

/// Seedable random generator backed by the ChaCha8 stream cipher.
///
/// The state is fully described by `(seed, stream, word_pos)`, which is what
/// checkpoints persist.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator sharing `seed` but drawing from stream `stream`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut rng = Rng::new(seed);
        rng.inner.set_stream(stream);
        rng
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Rng::stream(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matvec_examples() {
        let id = DenseMatrix::identity(3);
        assert_eq!(matvec(&id, &[1.0, 2.0, 3.0]).unwrap().as_ref(), &[1.0, 2.0, 3.0]);

        let zero = DenseMatrix::zeros(2, 3);
        assert_eq!(matvec(&zero, &[4.0, -1.0, 9.0]).unwrap().as_ref(), &[0.0, 0.0]);

        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matvec(&m, &[1.0, 1.0]).unwrap().as_ref(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_rejects_bad_shape() {
        let m = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            matvec(&m, &[1.0, 2.0]),
            Err(Error::DimensionMismatch {
                expected: 3,
                actual: 2,
                ..
            })
        ));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]).as_ref(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&[0.0, 0.0]).as_ref(), &[0.0, 0.0]);
        assert_eq!(relu(&[5.0, -5.0, 0.5]).as_ref(), &[5.0, 0.0, 0.5]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]).as_ref(), &[0.25; 4]);

        let s = softmax(&[1000.0, 0.0]);
        assert!(s.is_finite());
        assert!(close(s[0], 1.0, 1e-12) && s[1] < 1e-300);

        // exp(1), exp(2), exp(3) normalised, written out independently.
        let e = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let total = e[0] + e[1] + e[2];
        let s = softmax(&[1.0, 2.0, 3.0]);
        for i in 0..3 {
            assert!(close(s[i], e[i] / total, 1e-15));
        }
        assert!(close(s[0], 0.090_030_573_170_380_46, 1e-15));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        assert!(close(
            cosine_similarity(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().value,
            1.0,
            1e-15
        ));
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap().value, -1.0);
    }

    #[test]
    fn cosine_zero_norm_is_flagged() {
        let c = cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.degenerate);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut a = Rng::stream(99, 3);
        for _ in 0..17 {
            a.normal();
        }
        let mut b = Rng::from_state(a.state());
        for _ in 0..50 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::stream(99, 4);
        let mut d = Rng::stream(99, 3);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    fn vec_pair(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1..max_len).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0..10.0f64, n),
                prop::collection::vec(-10.0..10.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn cosine_self_is_one(x in prop::collection::vec(-10.0..10.0f64, 1..16)) {
            prop_assume!(norm(&x) > 1e-6);
            prop_assert!(close(cosine_similarity(&x, &x).unwrap().value, 1.0, 1e-9));
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant((x, z) in vec_pair(16), c in 0.01..100.0f64) {
            let xz = cosine_similarity(&x, &z).unwrap().value;
            prop_assert_eq!(xz, cosine_similarity(&z, &x).unwrap().value);
            prop_assert!((-1.0..=1.0).contains(&xz));
            prop_assume!(norm(&x) > 1e-6 && norm(&z) > 1e-6);
            let cx: Vec<f64> = x.iter().map(|v| v * c).collect();
            prop_assert!(close(cosine_similarity(&cx, &z).unwrap().value, xz, 1e-9));
        }

        #[test]
        fn softmax_normalised_and_shift_invariant(
            v in prop::collection::vec(-50.0..50.0f64, 1..12),
            shift in -100.0..100.0f64,
        ) {
            let s = softmax(&v);
            prop_assert!(close(s.iter().sum::<f64>(), 1.0, 1e-9));
            prop_assert!(s.iter().all(|&p| p >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let t = softmax(&shifted);
            for (a, b) in s.iter().zip(t.iter()) {
                prop_assert!(close(*a, *b, 1e-9));
            }
        }

        #[test]
        fn matvec_distributes(
            rows in 1usize..6,
            (a, b) in vec_pair(6),
            seed in any::<u64>(),
        ) {
            let cols = a.len();
            let mut rng = Rng::new(seed);
            let values = (0..rows * cols).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
            let m = DenseMatrix::from_vec(rows, cols, values).unwrap();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = matvec(&m, &sum).unwrap();
            let ra = matvec(&m, &a).unwrap();
            let rb = matvec(&m, &b).unwrap();
            for i in 0..rows {
                prop_assert!(close(lhs[i], ra[i] + rb[i], 1e-9));
            }
        }

        #[test]
        fn rng_is_deterministic(seed in any::<u64>()) {
            let mut a = Rng::new(seed);
            let mut b = Rng::new(seed);
            for _ in 0..8 {
                prop_assert_eq!(a.next_u64(), b.next_u64());
                prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
            }
        }
    }
}
