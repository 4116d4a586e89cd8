//! Combiner composition network.
//!
//! ```text
//! t_p = Drop(ReLU(W1·T_m + b1))      v_p = Drop(ReLU(W2·V + b2))
//! c   = [t_p; v_p]
//! g   = Drop(ReLU(W3·c + b3))        o   = W4·g + b4
//! s   = sigmoid(W5·c + b5)
//! out = o + s·T_m + (1 - s)·V        V_c = out / ‖out‖
//! ```
//!
//! Gradients are derived by hand; [`CombinerParams::backward`] mirrors the
//! forward graph step by step.

use std::fs;
use std::path::Path;

use crate::error::{check_dim, Error, Result};
use crate::tensor::{dot, norm, Matrix, Rng, Scalar};

pub const CKPT_MAGIC: &[u8; 8] = b"SCOTCKPT";
pub const CKPT_VERSION: u32 = 1;
pub const CKPT_HEADER_LEN: usize = 8 + 4 + 4 * 3 + 4;

/// Below this norm the output cannot be normalized.
pub const DEGENERATE_NORM: f64 = 1e-9;

/// Layer sizes and dropout rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinerDims {
    /// Embedding dim.
    pub d: usize,
    /// Projection width.
    pub p: usize,
    /// Hidden width of the fusion layer.
    pub h: usize,
    pub dropout_rate: f32,
}

impl CombinerDims {
    /// Default ratios: `p = 4d`, `h = 8d`, dropout 0.5.
    pub fn for_dim(d: usize) -> Self {
        Self {
            d,
            p: 4 * d,
            h: 8 * d,
            dropout_rate: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.p == 0 || self.h == 0 {
            return Err(Error::BadDims(format!(
                "d={}, p={}, h={} must all be positive",
                self.d, self.p, self.h
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::BadDims(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinerParams<T> {
    pub dims: CombinerDims,
    /// Text projection, `p x d`.
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    /// Image projection, `p x d`.
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
    /// Fusion hidden layer, `h x 2p`.
    pub w3: Matrix<T>,
    pub b3: Vec<T>,
    /// Output head, `d x h`.
    pub w4: Matrix<T>,
    pub b4: Vec<T>,
    /// Dynamic-scalar head, `1 x 2p`.
    pub w5: Matrix<T>,
    pub b5: Vec<T>,
    generation: u64,
}

/// Forward mode. Dropout is only active in `Train`.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Eval,
}

/// Intermediates recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    dims: CombinerDims,
    generation: u64,
    image: Vec<T>,
    modification: Vec<T>,
    pre_t: Vec<T>,
    pre_v: Vec<T>,
    mask_t: Vec<T>,
    mask_v: Vec<T>,
    fused: Vec<T>,
    pre_g: Vec<T>,
    mask_g: Vec<T>,
    hidden: Vec<T>,
    /// Unnormalized output before the final normalization.
    pub out_raw: Vec<T>,
    pub out_norm: T,
    /// Dynamic scalar; weight on the text embedding.
    pub s: T,
    /// Composed unit-norm embedding.
    pub composed: Vec<T>,
}

/// Parameter gradients plus gradients with respect to both inputs.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: CombinerParams<T>,
    pub d_image: Vec<T>,
    pub d_modification: Vec<T>,
}

impl<T: Scalar> CombinerParams<T> {
    pub fn zeros(dims: CombinerDims) -> Result<Self> {
        dims.validate()?;
        let CombinerDims { d, p, h, .. } = dims;
        Ok(Self {
            dims,
            w1: Matrix::zeros(p, d),
            b1: vec![T::zero(); p],
            w2: Matrix::zeros(p, d),
            b2: vec![T::zero(); p],
            w3: Matrix::zeros(h, 2 * p),
            b3: vec![T::zero(); h],
            w4: Matrix::zeros(d, h),
            b4: vec![T::zero(); d],
            w5: Matrix::zeros(1, 2 * p),
            b5: vec![T::zero(); 1],
            generation: 0,
        })
    }

    /// Weights uniform in `±sqrt(1/fan_in)`, biases zero. Draw order is
    /// W1, W2, W3, W4, W5, each row-major, from one PCG32 stream.
    pub fn init(dims: CombinerDims, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(dims)?;
        let mut rng = Rng::new(seed);
        for w in [
            &mut params.w1,
            &mut params.w2,
            &mut params.w3,
            &mut params.w4,
            &mut params.w5,
        ] {
            let bound = (1.0 / w.cols() as f64).sqrt();
            for x in w.as_mut_slice() {
                *x = T::of(rng.uniform(-bound, bound)?);
            }
        }
        Ok(params)
    }

    pub fn dims(&self) -> CombinerDims {
        self.dims
    }

    /// Bumped whenever parameters are updated in place; caches from older
    /// generations are rejected by `backward`.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn bump_generation(&mut self) {
        self.generation = self.generation.wrapping_add(1);
    }

    /// Tensors in checkpoint order: W1, b1, W2, b2, W3, b3, W4, b4, W5, b5.
    pub fn tensors(&self) -> [&[T]; 10] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            self.w3.as_slice(),
            &self.b3,
            self.w4.as_slice(),
            &self.b4,
            self.w5.as_slice(),
            &self.b5,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 10] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            self.w3.as_mut_slice(),
            &mut self.b3,
            self.w4.as_mut_slice(),
            &mut self.b4,
            self.w5.as_mut_slice(),
            &mut self.b5,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> CombinerParams<U> {
        let v = |xs: &[T]| xs.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        CombinerParams {
            dims: self.dims,
            w1: self.w1.cast(),
            b1: v(&self.b1),
            w2: self.w2.cast(),
            b2: v(&self.b2),
            w3: self.w3.cast(),
            b3: v(&self.b3),
            w4: self.w4.cast(),
            b4: v(&self.b4),
            w5: self.w5.cast(),
            b5: v(&self.b5),
            generation: self.generation,
        }
    }

    /// Sets every entry of every tensor to zero.
    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    /// `self += other`, tensor by tensor in fixed order.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x * k;
            }
        }
    }

    pub fn forward(&self, image: &[T], modification: &[T], mode: Mode<'_>) -> Result<ForwardCache<T>> {
        let CombinerDims { d, p, .. } = self.dims;
        check_dim(d, image.len())?;
        check_dim(d, modification.len())?;

        let rate = self.dims.dropout_rate as f64;
        let mut rng = match mode {
            Mode::Train(rng) if rate > 0.0 => Some(rng),
            _ => None,
        };
        let keep = T::of(1.0 / (1.0 - rate));
        let mut mask = |n: usize| -> Vec<T> {
            match rng.as_deref_mut() {
                Some(r) => (0..n)
                    .map(|_| if r.next_f64() < rate { T::zero() } else { keep })
                    .collect(),
                None => vec![T::one(); n],
            }
        };

        let pre_t = self.w1.affine(modification, &self.b1);
        let mask_t = mask(p);
        let pre_v = self.w2.affine(image, &self.b2);
        let mask_v = mask(p);
        let mut fused = Vec::with_capacity(2 * p);
        fused.extend(pre_t.iter().zip(&mask_t).map(|(x, m)| relu(*x) * *m));
        fused.extend(pre_v.iter().zip(&mask_v).map(|(x, m)| relu(*x) * *m));

        let pre_g = self.w3.affine(&fused, &self.b3);
        let mask_g = mask(pre_g.len());
        let hidden: Vec<T> = pre_g.iter().zip(&mask_g).map(|(x, m)| relu(*x) * *m).collect();
        let o = self.w4.affine(&hidden, &self.b4);

        let z = dot(self.w5.row(0), &fused) + self.b5[0];
        let s = sigmoid(z);

        let out_raw: Vec<T> = o
            .iter()
            .zip(modification.iter().zip(image))
            .map(|(o, (t, v))| *o + s * *t + (T::one() - s) * *v)
            .collect();
        let out_norm = norm(&out_raw);
        if !out_norm.is_finite() {
            return Err(Error::NonFinite("combiner output".into()));
        }
        if out_norm.f64() < DEGENERATE_NORM {
            return Err(Error::DegenerateOutput {
                norm: out_norm.f64(),
                threshold: DEGENERATE_NORM,
            });
        }
        let composed = out_raw.iter().map(|x| *x / out_norm).collect();

        Ok(ForwardCache {
            dims: self.dims,
            generation: self.generation,
            image: image.to_vec(),
            modification: modification.to_vec(),
            pre_t,
            pre_v,
            mask_t,
            mask_v,
            fused,
            pre_g,
            mask_g,
            hidden,
            out_raw,
            out_norm,
            s,
            composed,
        })
    }

    /// Eval-mode forward returning the composed embedding and the dynamic scalar.
    pub fn compose(&self, image: &[T], modification: &[T]) -> Result<(Vec<T>, T)> {
        let c = self.forward(image, modification, Mode::Eval)?;
        Ok((c.composed, c.s))
    }

    pub fn backward(&self, cache: &ForwardCache<T>, d_composed: &[T]) -> Result<Gradients<T>> {
        let mut grads = Self::zeros(self.dims)?;
        let (d_image, d_modification) = self.backward_into(cache, d_composed, &mut grads)?;
        Ok(Gradients {
            params: grads,
            d_image,
            d_modification,
        })
    }

    /// Accumulates parameter gradients into `acc` and returns
    /// `(dL/dV, dL/dT_m)`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<T>,
        d_composed: &[T],
        acc: &mut Self,
    ) -> Result<(Vec<T>, Vec<T>)> {
        if cache.dims != self.dims || cache.generation != self.generation {
            return Err(Error::StaleCache(format!(
                "cache from generation {} ({:?}), params at generation {} ({:?})",
                cache.generation, cache.dims, self.generation, self.dims
            )));
        }
        if acc.dims != self.dims {
            return Err(Error::ShapeMismatch("gradient accumulator dims differ".into()));
        }
        let CombinerDims { d, p, .. } = self.dims;
        check_dim(d, d_composed.len())?;

        // normalization Jacobian: (I - y yᵀ) / ‖out‖
        let y = &cache.composed;
        let proj = dot(y, d_composed);
        let d_out: Vec<T> = d_composed
            .iter()
            .zip(y)
            .map(|(g, yi)| (*g - *yi * proj) / cache.out_norm)
            .collect();

        let s = cache.s;
        let one_minus_s = T::one() - s;
        let mut d_image: Vec<T> = d_out.iter().map(|g| *g * one_minus_s).collect();
        let mut d_mod: Vec<T> = d_out.iter().map(|g| *g * s).collect();

        // dynamic scalar head
        let d_s: T = d_out
            .iter()
            .zip(cache.modification.iter().zip(&cache.image))
            .map(|(g, (t, v))| *g * (*t - *v))
            .sum();
        let d_z = d_s * s * one_minus_s;
        let mut d_fused: Vec<T> = self.w5.row(0).iter().map(|w| *w * d_z).collect();
        acc.w5.add_outer(&[d_z], &cache.fused);
        acc.b5[0] = acc.b5[0] + d_z;

        // output head
        acc.w4.add_outer(&d_out, &cache.hidden);
        add_into(&mut acc.b4, &d_out);
        let d_hidden = self.w4.transpose_mul(&d_out);

        // fusion hidden layer
        let d_pre_g: Vec<T> = relu_dropout_grad(&d_hidden, &cache.pre_g, &cache.mask_g);
        acc.w3.add_outer(&d_pre_g, &cache.fused);
        add_into(&mut acc.b3, &d_pre_g);
        add_into(&mut d_fused, &self.w3.transpose_mul(&d_pre_g));

        // projections
        let d_pre_t = relu_dropout_grad(&d_fused[..p], &cache.pre_t, &cache.mask_t);
        let d_pre_v = relu_dropout_grad(&d_fused[p..], &cache.pre_v, &cache.mask_v);
        acc.w1.add_outer(&d_pre_t, &cache.modification);
        add_into(&mut acc.b1, &d_pre_t);
        acc.w2.add_outer(&d_pre_v, &cache.image);
        add_into(&mut acc.b2, &d_pre_v);
        add_into(&mut d_mod, &self.w1.transpose_mul(&d_pre_t));
        add_into(&mut d_image, &self.w2.transpose_mul(&d_pre_v));

        Ok((d_image, d_mod))
    }
}

#[inline]
fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    let s = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    // keep s strictly inside (0, 1) once the float saturates
    s.max(T::epsilon()).min(T::one() - T::epsilon())
}

fn relu_dropout_grad<T: Scalar>(upstream: &[T], pre: &[T], mask: &[T]) -> Vec<T> {
    upstream
        .iter()
        .zip(pre.iter().zip(mask))
        .map(|(g, (x, m))| if *x > T::zero() { *g * *m } else { T::zero() })
        .collect()
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a = *a + *b;
    }
}

pub fn encode_checkpoint<T: Scalar>(params: &CombinerParams<T>) -> Vec<u8> {
    let dims = params.dims;
    let mut buf = Vec::with_capacity(CKPT_HEADER_LEN + params.num_params() * 4);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for n in [dims.d, dims.p, dims.h] {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    buf.extend_from_slice(&dims.dropout_rate.to_le_bytes());
    for t in params.tensors() {
        for x in t {
            buf.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CombinerParams<f32>> {
    if bytes.len() < 8 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::BadMagic {
            expected: "SCOTCKPT".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into(),
        });
    }
    if bytes.len() < CKPT_HEADER_LEN {
        return Err(Error::CorruptPayload("truncated checkpoint header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CKPT_VERSION,
            found: version,
        });
    }
    let dims = CombinerDims {
        d: u32_at(12) as usize,
        p: u32_at(16) as usize,
        h: u32_at(20) as usize,
        dropout_rate: f32::from_le_bytes(bytes[24..28].try_into().unwrap()),
    };
    let mut params = CombinerParams::<f32>::zeros(dims)
        .map_err(|e| Error::CorruptPayload(format!("bad checkpoint header: {e}")))?;
    let expected = CKPT_HEADER_LEN + params.num_params() * 4;
    if bytes.len() != expected {
        return Err(Error::CorruptPayload(format!(
            "checkpoint is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut floats = bytes[CKPT_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            *x = floats.next().unwrap();
        }
    }
    if !params.all_finite() {
        return Err(Error::CorruptPayload("non-finite parameter".into()));
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &CombinerParams<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CombinerParams<f32>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and checks it was trained for embedding dim `d`.
pub fn load_checkpoint_for_dim(path: impl AsRef<Path>, d: usize) -> Result<CombinerParams<f32>> {
    let params = load_checkpoint(path)?;
    if params.dims.d != d {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has d={}, pipeline expects d={d}",
            params.dims.d
        )));
    }
    Ok(params)
}
