//! Dense numeric kernel: row-major matrices, normalization, cosine similarity,
//! stabilized log-sum-exp and a seedable PCG32 stream.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32`
//! (storage and training) and `f64` (verification). Reductions are plain
//! left-to-right loops so results do not depend on thread count.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand_core::{Rng as _, SeedableRng};
use rand_pcg::Pcg32;

use crate::error::{check_dim, Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

pub trait Scalar:
    Float + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite("vector".into()));
    }
    if n.f64() < ZERO_NORM {
        return Err(Error::ZeroVector {
            threshold: ZERO_NORM,
        });
    }
    Ok(v.iter().map(|x| *x / n).collect())
}

/// Cosine similarity of two vectors of equal length.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_dim(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na.f64() < ZERO_NORM || nb.f64() < ZERO_NORM {
        return Err(Error::ZeroVector {
            threshold: ZERO_NORM,
        });
    }
    Ok(dot(a, b) / (na * nb))
}

/// `log Σ exp(x_i)`, evaluated as `max + log Σ exp(x_i - max)`.
pub fn logsumexp<T: Scalar>(xs: &[T]) -> Result<T> {
    let max = xs
        .iter()
        .copied()
        .reduce(|a, b| if b > a { b } else { a })
        .ok_or(Error::EmptyInput)?;
    if !max.is_finite() {
        return Err(Error::NonFinite("logsumexp input".into()));
    }
    let mut acc = T::zero();
    for x in xs {
        acc = acc + (*x - max).exp();
    }
    Ok(max + acc.ln())
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Builds a matrix from equal-length rows. An empty slice yields a 0x0 matrix.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    /// `out = self · x + bias`.
    pub fn affine(&self, x: &[T], bias: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(bias.len(), self.rows);
        self.iter_rows()
            .zip(bias)
            .map(|(r, b)| dot(r, x) + *b)
            .collect()
    }

    /// `out = selfᵀ · y`.
    pub fn transpose_mul(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, yi) in self.iter_rows().zip(y) {
            if *yi == T::zero() {
                continue;
            }
            for (o, w) in out.iter_mut().zip(r) {
                *o = *o + *w * *yi;
            }
        }
        out
    }

    /// `self += y ⊗ x`.
    pub fn add_outer(&mut self, y: &[T], x: &[T]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols;
        for (i, yi) in y.iter().enumerate() {
            if *yi == T::zero() {
                continue;
            }
            let r = &mut self.data[i * cols..(i + 1) * cols];
            for (w, xj) in r.iter_mut().zip(x) {
                *w = *w + *yi * *xj;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }
}

/// Entry `(i, j)` is the cosine similarity between row `i` of `a` and row `j` of `b`.
pub fn cosine_matrix<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_dim(a.cols(), b.cols())?;
    let inv = |m: &Matrix<T>| -> Result<Vec<T>> {
        m.iter_rows()
            .map(|r| {
                let n = norm(r);
                if n.f64() < ZERO_NORM {
                    Err(Error::ZeroVector {
                        threshold: ZERO_NORM,
                    })
                } else {
                    Ok(T::one() / n)
                }
            })
            .collect()
    };
    let (ia, ib) = (inv(a)?, inv(b)?);
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for (i, ra) in a.iter_rows().enumerate() {
        for (j, rb) in b.iter_rows().enumerate() {
            let s = dot(ra, rb) * ia[i] * ib[j];
            out.set(i, j, s.max(-T::one()).min(T::one()));
        }
    }
    Ok(out)
}

/// Deterministic PCG32 stream.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: Pcg32,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Pcg32::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by a seed and a path of indices
    /// (e.g. `[epoch, batch, item]`).
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut h = splitmix64(seed);
        for p in path {
            h = splitmix64(h ^ p.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        }
        Self::new(h)
    }

    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        let hi = (self.next_u32() >> 5) as u64; // 27 bits
        let lo = (self.next_u32() >> 6) as u64; // 26 bits
        ((hi << 26) | lo) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::BadRange { lo, hi });
        }
        let x = lo + (hi - lo) * self.next_f64();
        // rounding can land exactly on hi
        Ok(if x >= hi { lo.max(next_down(hi)) } else { x })
    }

    /// Standard normal draw (Box-Muller, one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift with rejection
        let n64 = n as u64;
        loop {
            let x = ((self.next_u32() as u64) << 32) | self.next_u32() as u64;
            let m = (x as u128) * (n64 as u128);
            let low = m as u64;
            if low >= n64 || low >= n64.wrapping_neg() % n64 {
                return (m >> 64) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

fn next_down(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else if x == 0.0 {
        -f64::from_bits(1)
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
