//! Dense vector/matrix helpers, stable softmax and the seeded generator.
//!
//! Vectors are plain `[f64]` slices; [`Mat`] is a row-major matrix used for
//! layer weights. All reductions run in a fixed order so results are
//! bit-reproducible.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `y = M x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "matvec of {}x{} with vector of dim {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| dot_unchecked(self.row(r), x))
            .collect())
    }

    /// `y = Mᵀ x`.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::shape(format!(
                "transposed matvec of {}x{} with vector of dim {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                axpy(xr, self.row(r), &mut y);
            }
        }
        Ok(y)
    }

    /// `M += scale * a bᵀ`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s != 0.0 {
                axpy(s, b, self.row_mut(r));
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Inner product with a shape check.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "dot of dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_unchecked(a, b))
}

/// Four independent accumulators so the loop vectorizes; the summation
/// order is fixed and therefore deterministic.
#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Squared Euclidean distance.
pub fn sq_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "distance between dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(sq_euclidean_unchecked(a, b))
}

#[inline]
pub(crate) fn sq_euclidean_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-probabilities `x - lse(x)`.
pub fn log_softmax(x: &[f64]) -> Result<Vec<f64>> {
    check_logits(x)?;
    let lse = log_sum_exp(x);
    Ok(x.iter().map(|v| v - lse).collect())
}

/// Max-subtracted softmax.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    check_logits(x)?;
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

fn check_logits(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(())
}

/// Index of the smallest value; ties resolve to the lowest index.
pub fn argmin(x: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in x.iter().enumerate() {
        match best {
            Some((_, b)) if v >= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn mean_of<'a>(vectors: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for v in vectors {
        if v.len() != dim {
            return Err(Error::shape(format!(
                "mean over dim {dim} got dim {}",
                v.len()
            )));
        }
        axpy(1.0, v, &mut acc);
        n += 1;
    }
    if n == 0 {
        return Err(Error::input("mean of an empty set"));
    }
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

pub fn norm(x: &[f64]) -> f64 {
    dot_unchecked(x, x).sqrt()
}

/// Seeded generator: ChaCha8 keyed from the 64-bit seed via `seed_from_u64`.
/// Streams are identical across platforms for a given seed.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream, derived deterministically from this one.
    pub fn fork(&mut self) -> Self {
        Rng::new(self.inner.random())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, dim: usize, std: f64) -> Vec<f64> {
        (0..dim).map(|_| std * self.normal()).collect()
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Unit vector drawn uniformly from the sphere.
    pub fn unit_vec(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v = self.normal_vec(dim, 1.0);
            let n = norm(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[-123.4]).unwrap(), vec![1.0]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax(&[0.0, f64::NAN]).unwrap_err();
        assert_eq!(err.to_string(), "non-finite logits");
        assert!(softmax(&[f64::INFINITY]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn distances() {
        assert_eq!(sq_euclidean(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(sq_euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert!(sq_euclidean(&[0.0], &[0.0, 1.0]).is_err());

        let mut rng = Rng::new(3);
        let a = rng.normal_vec(37, 2.0);
        let b = rng.normal_vec(37, 2.0);
        let mut oracle = 0.0;
        for i in 0..a.len() {
            oracle += (a[i] - b[i]) * (a[i] - b[i]);
        }
        assert!((sq_euclidean(&a, &b).unwrap() - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn matvec_and_dot() {
        let x = vec![1.0, -2.0, 3.5];
        assert_eq!(Mat::identity(3).matvec(&x).unwrap(), x);
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(dot(&[1.0], &[1.0, 2.0]).is_err());
        assert!(Mat::zeros(2, 3).matvec(&[1.0, 2.0]).is_err());

        let mut rng = Rng::new(11);
        let (rows, cols) = (7, 13);
        let m = Mat::from_rows(rows, cols, rng.normal_vec(rows * cols, 1.0)).unwrap();
        let v = rng.normal_vec(cols, 1.0);
        let y = m.matvec(&v).unwrap();
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += m.data[r * cols + c] * v[c];
            }
            assert!((y[r] - acc).abs() < 1e-12);
        }
        let w = rng.normal_vec(rows, 1.0);
        let yt = m.matvec_t(&w).unwrap();
        for c in 0..cols {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += m.data[r * cols + c] * w[r];
            }
            assert!((yt[c] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn argmin_ties_go_low() {
        assert_eq!(argmin(&[2.0, 1.0, 1.0]), Some(1));
        assert_eq!(argmin(&[]), None);
    }

    #[test]
    fn rng_streams_repeat() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_ne!(Rng::new(1).next_u64(), Rng::new(2).next_u64());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let p = softmax(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_permutation_equivariant(xs in prop::collection::vec(-20.0f64..20.0, 2..10)) {
            let p = softmax(&xs).unwrap();
            let mut rev = xs.clone();
            rev.reverse();
            let mut q = softmax(&rev).unwrap();
            q.reverse();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn sq_euclidean_metric_axioms(a in prop::collection::vec(-10.0f64..10.0, 5), b in prop::collection::vec(-10.0f64..10.0, 5)) {
            let d = sq_euclidean(&a, &b).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, sq_euclidean(&b, &a).unwrap());
            prop_assert!(sq_euclidean(&a, &a).unwrap() <= 1e-12);
            if a != b {
                prop_assert!(d > 0.0);
            }
        }
    }
}
