//! Training objective over a batch of composed embeddings.
//!
//! With `S` the cosine similarity and `S_λ(x, y) = S(x, y)` if `S(x, y) > λ`
//! else `0`:
//!
//! ```text
//! L_pos  = -log Σ_i exp S(Vc_i, Tu_i)
//! L'_neg =  log Σ_{i,j} exp( S_λ(Vc_i, Tu_j) · (1 - δ_ij) )
//! L_cap  =  log Σ_{i,j} exp  S_λ(Vc_i, T_j)
//! L''    =  L'_neg + L_cap
//! L      =  α_pos · L_pos + α_neg · L''
//! ```
//!
//! Sums are not averaged over the batch and carry no temperature. Diagonal
//! terms of `L'_neg` have exponent zero and still contribute `e⁰ = 1` each
//! unless [`LossConfig::exclude_diagonal`] is set. Gradients treat the gate
//! as a constant mask.

use crate::error::{check_dim, Error, Result};
use crate::tensor::{dot, logsumexp, norm, Matrix, Scalar, ZERO_NORM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Hard-negative margin λ.
    pub margin: f64,
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    /// Temperature κ; only used by [`clip_i2t_loss`].
    pub temperature: f64,
    /// Drop the diagonal terms of the batch-negative sum instead of counting them as `e⁰`.
    pub exclude_diagonal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            alpha_pos: 10.0,
            alpha_neg: 0.1,
            temperature: 0.07,
            exclude_diagonal: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} outside [-1, 1]", self.margin)));
        }
        if !(self.alpha_pos >= 0.0 && self.alpha_neg >= 0.0) {
            return Err(Error::Config("scaling factors must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown<T> {
    pub l_pos: T,
    pub l_neg_prime: T,
    pub l_caption_neg: T,
    pub l_neg_combined: T,
    pub l_total: T,
    /// dL/dVc, one row per batch item.
    pub grad: Matrix<T>,
}

/// Margin-gated similarity: `s` if `s > margin` (strict), else 0.
#[inline]
pub fn margin_sim<T: Scalar>(s: T, margin: T) -> T {
    if s > margin {
        s
    } else {
        T::zero()
    }
}

/// Cosine similarities between rows of `a` and `b`, plus inverse row norms.
struct Sims<T> {
    s: Matrix<T>,
    inv_a: Vec<T>,
    unit_a: Matrix<T>,
    unit_b: Matrix<T>,
}

fn unit_rows<T: Scalar>(m: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    let mut out = m.clone();
    let mut inv = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !n.is_finite() {
            return Err(Error::NonFinite(format!("row {i}")));
        }
        if n.f64() < ZERO_NORM {
            return Err(Error::ZeroVector {
                threshold: ZERO_NORM,
            });
        }
        let k = T::one() / n;
        for x in out.row_mut(i) {
            *x = *x * k;
        }
        inv.push(k);
    }
    Ok((out, inv))
}

fn sims<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Sims<T>> {
    if a.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    check_dim(a.rows(), b.rows())?;
    check_dim(a.cols(), b.cols())?;
    let (unit_a, inv_a) = unit_rows(a)?;
    let (unit_b, _) = unit_rows(b)?;
    let n = a.rows();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s.set(i, j, dot(unit_a.row(i), unit_b.row(j)));
        }
    }
    Ok(Sims {
        s,
        inv_a,
        unit_a,
        unit_b,
    })
}

/// Chains `dL/dS` (N x N) through the cosine similarity to `dL/dA`.
fn chain_cosine<T: Scalar>(sims: &Sims<T>, d_s: &Matrix<T>) -> Matrix<T> {
    let (n, d) = (sims.s.rows(), sims.unit_a.cols());
    let mut grad = Matrix::zeros(n, d);
    for i in 0..n {
        let mut radial = T::zero();
        let g = grad.row_mut(i);
        for j in 0..n {
            let w = d_s.get(i, j);
            if w == T::zero() {
                continue;
            }
            radial = radial + w * sims.s.get(i, j);
            for (x, u) in g.iter_mut().zip(sims.unit_b.row(j)) {
                *x = *x + w * *u;
            }
        }
        for (x, a) in g.iter_mut().zip(sims.unit_a.row(i)) {
            *x = (*x - radial * *a) * sims.inv_a[i];
        }
    }
    grad
}

/// Log-sum-exp over the selected exponents, returning the loss and softmax
/// weights laid out like the input (zero where not selected).
fn lse_with_weights<T: Scalar>(exps: &Matrix<T>, include: impl Fn(usize, usize) -> bool) -> Result<(T, Matrix<T>)> {
    let n = exps.rows();
    let mut flat = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if include(i, j) {
                flat.push(exps.get(i, j));
            }
        }
    }
    if flat.is_empty() {
        // every term excluded: empty sum, no gradient
        return Ok((T::neg_infinity(), Matrix::zeros(n, n)));
    }
    let lse = logsumexp(&flat)?;
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if include(i, j) {
                w.set(i, j, (exps.get(i, j) - lse).exp());
            }
        }
    }
    Ok((lse, w))
}

/// Positive term and its gradient with respect to `vc`.
pub fn loss_pos<T: Scalar>(vc: &Matrix<T>, tu: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    let sims = sims(vc, tu)?;
    let n = vc.rows();
    let diag: Vec<T> = (0..n).map(|i| sims.s.get(i, i)).collect();
    let lse = logsumexp(&diag)?;
    let mut d_s = Matrix::zeros(n, n);
    for (i, x) in diag.iter().enumerate() {
        d_s.set(i, i, -(*x - lse).exp());
    }
    Ok((-lse, chain_cosine(&sims, &d_s)))
}

fn gated_neg<T: Scalar>(
    vc: &Matrix<T>,
    other: &Matrix<T>,
    margin: T,
    kronecker: bool,
    exclude_diagonal: bool,
) -> Result<(T, Matrix<T>)> {
    let sims = sims(vc, other)?;
    let n = vc.rows();
    let mut exps = Matrix::zeros(n, n);
    // d exponent / d S: 1 where the gate is open and the entry is not a killed diagonal
    let mut open = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if kronecker && i == j {
                continue;
            }
            let s = sims.s.get(i, j);
            let g = margin_sim(s, margin);
            exps.set(i, j, g);
            if s > margin {
                open.set(i, j, T::one());
            }
        }
    }
    let (loss, mut w) = lse_with_weights(&exps, |i, j| !(exclude_diagonal && i == j))?;
    for (x, o) in w.as_mut_slice().iter_mut().zip(open.as_slice()) {
        *x = *x * *o;
    }
    Ok((loss, chain_cosine(&sims, &w)))
}

/// Gated batch-negative term `L'_neg` against the other items' targets.
pub fn loss_neg_prime<T: Scalar>(vc: &Matrix<T>, tu: &Matrix<T>, margin: T) -> Result<(T, Matrix<T>)> {
    gated_neg(vc, tu, margin, true, false)
}

/// `L'_neg` with the diagonal terms removed from the sum entirely.
pub fn loss_neg_prime_excluding_diagonal<T: Scalar>(
    vc: &Matrix<T>,
    tu: &Matrix<T>,
    margin: T,
) -> Result<(T, Matrix<T>)> {
    gated_neg(vc, tu, margin, true, true)
}

/// Original-caption negative term over all pairs, diagonal included.
pub fn loss_caption_neg<T: Scalar>(vc: &Matrix<T>, captions: &Matrix<T>, margin: T) -> Result<(T, Matrix<T>)> {
    gated_neg(vc, captions, margin, false, false)
}

/// `L''_neg = L'_neg + L_cap`.
pub fn loss_neg_combined<T: Scalar>(
    vc: &Matrix<T>,
    tu: &Matrix<T>,
    captions: &Matrix<T>,
    margin: T,
) -> Result<(T, Matrix<T>)> {
    let (a, mut ga) = loss_neg_prime(vc, tu, margin)?;
    let (b, gb) = loss_caption_neg(vc, captions, margin)?;
    for (x, y) in ga.as_mut_slice().iter_mut().zip(gb.as_slice()) {
        *x = *x + *y;
    }
    Ok((a + b, ga))
}

pub fn total_loss<T: Scalar>(
    vc: &Matrix<T>,
    tu: &Matrix<T>,
    captions: &Matrix<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    cfg.validate()?;
    let margin = T::of(cfg.margin);
    let (l_pos, g_pos) = loss_pos(vc, tu)?;
    let (l_neg_prime, g_neg) = gated_neg(vc, tu, margin, true, cfg.exclude_diagonal)?;
    let (l_caption_neg, g_cap) = loss_caption_neg(vc, captions, margin)?;
    let l_neg_combined = l_neg_prime + l_caption_neg;
    let (ap, an) = (T::of(cfg.alpha_pos), T::of(cfg.alpha_neg));
    let l_total = ap * l_pos + an * l_neg_combined;
    let mut grad = g_pos;
    for ((g, n), c) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(g_neg.as_slice())
        .zip(g_cap.as_slice())
    {
        *g = ap * *g + an * (*n + *c);
    }
    Ok(LossBreakdown {
        l_pos,
        l_neg_prime,
        l_caption_neg,
        l_neg_combined,
        l_total,
        grad,
    })
}

/// Image-to-text half of the symmetric contrastive loss, averaged over the
/// batch, using raw dot products scaled by `1/κ`.
pub fn clip_i2t_loss<T: Scalar>(images: &Matrix<T>, texts: &Matrix<T>, temperature: f64) -> Result<T> {
    if images.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    check_dim(images.rows(), texts.rows())?;
    check_dim(images.cols(), texts.cols())?;
    let k = T::of(temperature);
    let n = images.rows();
    let mut total = T::zero();
    for i in 0..n {
        let logits: Vec<T> = (0..n).map(|j| dot(images.row(i), texts.row(j)) / k).collect();
        total = total + (logsumexp(&logits)? - logits[i]);
    }
    Ok(total / T::of(n as f64))
}
