//! Mini-batch training of the Combiner.
//!
//! Each batch: forward every item in train mode, stack the composed
//! embeddings, evaluate the loss against text (or image) targets, back-propagate
//! per item and take one AdamW step.
//!
//! Items are processed in fixed-size chunks whose gradients are reduced in
//! chunk order, so the result is bit-identical for any thread count.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combiner::{save_checkpoint, CombinerParams, ForwardCache, Mode};
use crate::error::{check_dim, Error, Result};
use crate::loss::{total_loss, LossBreakdown, LossConfig};
use crate::optim::{adamw_step, save_optimizer_state, AdamWConfig, AdamWState};
use crate::store::TrainingExample;
use crate::tensor::{Matrix, Rng};

/// Items per gradient-accumulation chunk. Part of the determinism contract:
/// changing it changes float summation order.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSource {
    /// Modified-caption text embeddings.
    Text,
    /// Supplied target-image embeddings.
    Image,
}

impl std::str::FromStr for TargetSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "image" => Ok(Self::Image),
            other => Err(Error::Config(format!("unknown target source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub adamw: AdamWConfig,
    pub target_source: TargetSource,
    pub min_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            epochs: 10,
            seed: 0,
            loss: LossConfig::default(),
            adamw: AdamWConfig::default(),
            target_source: TargetSource::Text,
            min_batch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_batch < 2 {
            return Err(Error::Config(format!("min_batch {} must be at least 2", self.min_batch)));
        }
        if self.batch_size < self.min_batch {
            return Err(Error::Config(format!(
                "batch_size {} below min_batch {}",
                self.batch_size, self.min_batch
            )));
        }
        if !(self.adamw.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.loss.validate()
    }
}

/// Shuffled index batches for one epoch, plus the number of trailing items dropped.
pub fn make_batches(
    n_examples: usize,
    batch_size: usize,
    min_batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<(Vec<Vec<usize>>, usize)> {
    if n_examples == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n_examples).collect();
    Rng::derive(seed, &[epoch as u64]).shuffle(&mut order);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let dropped = batches.pop_if(|b| b.len() < min_batch).map_or(0, |b| b.len());
    if dropped > 0 {
        log::info!("epoch {epoch}: dropped final partial batch of {dropped}");
    }
    Ok((batches, dropped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub epoch: usize,
    pub batch: usize,
    #[serde(rename = "L_pos")]
    pub l_pos: f64,
    #[serde(rename = "L_neg_prime")]
    pub l_neg_prime: f64,
    #[serde(rename = "L_caption_neg")]
    pub l_caption_neg: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub batches: usize,
    pub mean_l_total: f64,
    pub mean_l_pos: f64,
    pub dropped: usize,
}

/// Hooks called during training.
pub trait TrainObserver {
    fn on_batch(&mut self, _metrics: &BatchMetrics) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(
        &mut self,
        _epoch: usize,
        _params: &CombinerParams<f32>,
        _state: &AdamWState<f32>,
    ) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Writes `metrics.jsonl` and per-epoch `epoch_{k}.ckpt` / `epoch_{k}.opt` into a directory.
pub struct DirObserver {
    dir: PathBuf,
    metrics: BufWriter<fs::File>,
}

impl DirObserver {
    /// Creates the directory. With `append`, an existing metrics log is extended.
    pub fn new(dir: impl AsRef<Path>, append: bool) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(dir.join("metrics.jsonl"))?;
        Ok(Self {
            dir,
            metrics: BufWriter::new(file),
        })
    }

    pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
        dir.join(format!("epoch_{epoch}.ckpt"))
    }

    pub fn optimizer_path(dir: &Path, epoch: usize) -> PathBuf {
        dir.join(format!("epoch_{epoch}.opt"))
    }
}

impl TrainObserver for DirObserver {
    fn on_batch(&mut self, m: &BatchMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, m).map_err(std::io::Error::from)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    fn on_epoch_end(&mut self, epoch: usize, params: &CombinerParams<f32>, state: &AdamWState<f32>) -> Result<()> {
        self.metrics.flush()?;
        save_checkpoint(params, Self::checkpoint_path(&self.dir, epoch))?;
        save_optimizer_state(state, epoch as u32, Self::optimizer_path(&self.dir, epoch))?;
        Ok(())
    }
}

/// Where training starts: fresh parameters, or a resumed run.
pub struct TrainStart {
    pub params: CombinerParams<f32>,
    pub state: Option<AdamWState<f32>>,
    pub epochs_done: usize,
}

impl TrainStart {
    pub fn fresh(params: CombinerParams<f32>) -> Self {
        Self {
            params,
            state: None,
            epochs_done: 0,
        }
    }
}

pub struct TrainOutcome {
    pub params: CombinerParams<f32>,
    pub state: AdamWState<f32>,
    pub epochs: Vec<EpochMetrics>,
    pub batches: Vec<BatchMetrics>,
}

/// Stacked loss inputs for one batch.
pub struct BatchInputs {
    pub composed: Matrix<f32>,
    pub targets: Matrix<f32>,
    pub captions: Matrix<f32>,
}

fn targets_for(ex: &TrainingExample, source: TargetSource) -> Result<&[f32]> {
    match source {
        TargetSource::Text => Ok(&ex.target_text),
        TargetSource::Image => ex
            .target_image
            .as_deref()
            .ok_or_else(|| Error::Config(format!("example {} has no target-image embedding", ex.id))),
    }
}

/// Train-mode forward for every item of a batch. Item `k` of batch `b` in
/// epoch `e` draws its dropout masks from the stream `(seed, e, b, k)`.
pub fn forward_batch(
    params: &CombinerParams<f32>,
    data: &[TrainingExample],
    batch: &[usize],
    seed: u64,
    epoch: usize,
    batch_idx: usize,
) -> Result<Vec<ForwardCache<f32>>> {
    batch
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let ex = &data[i];
            let mut rng = Rng::derive(seed, &[epoch as u64, batch_idx as u64, k as u64]);
            params
                .forward(&ex.image, &ex.modification, Mode::Train(&mut rng))
                .map_err(|e| match e {
                    Error::NonFinite(_) | Error::DegenerateOutput { .. } => Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        detail: format!("example {}: {e}", ex.id),
                    },
                    other => other,
                })
        })
        .collect()
}

pub fn batch_inputs(
    caches: &[ForwardCache<f32>],
    data: &[TrainingExample],
    batch: &[usize],
    source: TargetSource,
) -> Result<BatchInputs> {
    let composed: Vec<&[f32]> = caches.iter().map(|c| c.composed.as_slice()).collect();
    let targets = batch
        .iter()
        .map(|&i| targets_for(&data[i], source))
        .collect::<Result<Vec<_>>>()?;
    let captions: Vec<&[f32]> = batch.iter().map(|&i| data[i].caption.as_slice()).collect();
    Ok(BatchInputs {
        composed: Matrix::from_rows(&composed)?,
        targets: Matrix::from_rows(&targets)?,
        captions: Matrix::from_rows(&captions)?,
    })
}

/// Backward for every item, reduced chunk by chunk in order.
fn accumulate_gradients(
    params: &CombinerParams<f32>,
    caches: &[ForwardCache<f32>],
    grad_composed: &Matrix<f32>,
) -> Result<CombinerParams<f32>> {
    let partials: Vec<CombinerParams<f32>> = caches
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = CombinerParams::zeros(params.dims())?;
            for (k, cache) in chunk.iter().enumerate() {
                params.backward_into(cache, grad_composed.row(c * CHUNK + k), &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = CombinerParams::zeros(params.dims())?;
    for p in &partials {
        total.add_assign(p);
    }
    Ok(total)
}

fn check_finite(b: &LossBreakdown<f64>, epoch: usize, batch: usize) -> Result<()> {
    let vals = [b.l_pos, b.l_neg_prime, b.l_caption_neg, b.l_total];
    if vals.iter().all(|x| x.is_finite()) && b.grad.all_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        epoch,
        batch,
        detail: format!(
            "L_pos={} L_neg_prime={} L_caption_neg={} L_total={}",
            b.l_pos, b.l_neg_prime, b.l_caption_neg, b.l_total
        ),
    })
}

pub fn train(
    data: &[TrainingExample],
    cfg: &TrainConfig,
    start: TrainStart,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = start.params;
    let d = params.dims().d;
    for ex in data {
        check_dim(d, ex.image.len())?;
        check_dim(d, ex.modification.len())?;
        check_dim(d, ex.target_text.len())?;
        check_dim(d, ex.caption.len())?;
        let target = targets_for(ex, cfg.target_source)?;
        check_dim(d, target.len())?;
    }
    let mut state = match start.state {
        Some(s) => s,
        None => AdamWState::new(params.dims())?,
    };

    let mut epochs = Vec::new();
    let mut all_batches = Vec::new();
    for epoch in start.epochs_done + 1..=start.epochs_done + cfg.epochs {
        let (batches, dropped) = make_batches(data.len(), cfg.batch_size, cfg.min_batch, cfg.seed, epoch)?;
        let mut sum_total = 0.0;
        let mut sum_pos = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let t0 = Instant::now();
            let caches = forward_batch(&params, data, batch, cfg.seed, epoch, b)?;
            let inputs = batch_inputs(&caches, data, batch, cfg.target_source)?;
            // loss in f64; only the gradient goes back to f32
            let breakdown = total_loss(
                &inputs.composed.cast::<f64>(),
                &inputs.targets.cast(),
                &inputs.captions.cast(),
                &cfg.loss,
            )?;
            check_finite(&breakdown, epoch, b)?;
            let grads = accumulate_gradients(&params, &caches, &breakdown.grad.cast())?;
            adamw_step(&mut params, &grads, &mut state, &cfg.adamw)?;
            if !params.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: "parameters became non-finite after the optimizer step".into(),
                });
            }
            let m = BatchMetrics {
                epoch,
                batch: b,
                l_pos: breakdown.l_pos,
                l_neg_prime: breakdown.l_neg_prime,
                l_caption_neg: breakdown.l_caption_neg,
                l_total: breakdown.l_total,
                wall_ms: t0.elapsed().as_millis() as u64,
            };
            sum_total += m.l_total;
            sum_pos += m.l_pos;
            observer.on_batch(&m)?;
            all_batches.push(m);
        }
        let n = batches.len().max(1) as f64;
        let em = EpochMetrics {
            epoch,
            batches: batches.len(),
            mean_l_total: sum_total / n,
            mean_l_pos: sum_pos / n,
            dropped,
        };
        log::info!(
            "epoch {epoch}: {} batches, mean L_total {:.5}",
            em.batches,
            em.mean_l_total
        );
        observer.on_epoch_end(epoch, &params, &state)?;
        epochs.push(em);
    }
    Ok(TrainOutcome {
        params,
        state,
        epochs,
        batches: all_batches,
    })
}
