//! AdamW with decoupled weight decay.

use std::fs;
use std::path::Path;

use crate::combiner::{CombinerDims, CombinerParams};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Update one flat tensor in place. `step` is the 1-based step count.
///
/// ```text
/// m ← β1·m + (1-β1)·g
/// v ← β2·v + (1-β2)·g²
/// θ ← θ - lr·m̂/(√v̂ + eps) - lr·wd·θ
/// ```
pub fn adamw_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamWConfig,
) {
    debug_assert!(step >= 1);
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let c1 = T::of(1.0 - cfg.beta1.powf(step as f64));
    let c2 = T::of(1.0 - cfg.beta2.powf(step as f64));
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.eps);
    let decay = T::of(cfg.learning_rate * cfg.weight_decay);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        let old = theta[i];
        theta[i] = old - lr * m_hat / (v_hat.sqrt() + eps) - decay * old;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub m: CombinerParams<T>,
    pub v: CombinerParams<T>,
    pub step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(dims: CombinerDims) -> Result<Self> {
        Ok(Self {
            m: CombinerParams::zeros(dims)?,
            v: CombinerParams::zeros(dims)?,
            step: 0,
        })
    }
}

pub fn adamw_step<T: Scalar>(
    params: &mut CombinerParams<T>,
    grads: &CombinerParams<T>,
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    let dims = params.dims();
    if grads.dims() != dims || state.m.dims() != dims || state.v.dims() != dims {
        return Err(Error::ShapeMismatch(format!(
            "params {:?}, grads {:?}, state {:?}",
            dims,
            grads.dims(),
            state.m.dims()
        )));
    }
    state.step += 1;
    let step = state.step;
    for (((theta, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        adamw_update(theta, g, m, v, step, cfg);
    }
    params.bump_generation();
    Ok(())
}

pub const OPT_MAGIC: &[u8; 8] = b"SCOTOPT1";

/// Optimizer state sidecar written next to each epoch checkpoint so runs can resume.
///
/// Layout: magic, u32 version = 1, u64 step, u32 epochs completed, then the
/// first- and second-moment tensors as f32 in checkpoint order.
pub fn save_optimizer_state(state: &AdamWState<f32>, epochs_done: u32, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(OPT_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&epochs_done.to_le_bytes());
    for p in [&state.m, &state.v] {
        for t in p.tensors() {
            for x in t {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_optimizer_state(dims: CombinerDims, path: impl AsRef<Path>) -> Result<(AdamWState<f32>, u32)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 24 || &bytes[..8] != OPT_MAGIC {
        return Err(Error::BadMagic {
            expected: "SCOTOPT1".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != 1 {
        return Err(Error::VersionMismatch { expected: 1, found: version });
    }
    let step = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let epochs = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let mut state = AdamWState::<f32>::new(dims)?;
    state.step = step;
    let n = state.m.num_params();
    if bytes.len() != 24 + 2 * n * 4 {
        return Err(Error::ShapeMismatch(format!(
            "optimizer state has {} bytes, dims {:?} need {}",
            bytes.len(),
            dims,
            24 + 2 * n * 4
        )));
    }
    let mut floats = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for p in [&mut state.m, &mut state.v] {
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                *x = floats.next().unwrap();
            }
        }
    }
    Ok((state, epochs))
}
