use std::path::{Path, PathBuf};

use clap::Args;

use scot_core::combiner::load_checkpoint;
use scot_core::optim::load_optimizer_state;
use scot_core::store::{assemble_training_set, attach_image_targets, read_table};
use scot_core::trainer::{train, DirObserver};
use scot_core::{
    AdamWConfig, CombinerDims, CombinerParams, EmbeddingTable, LossConfig, TargetSource, TrainConfig, TrainStart,
};

use crate::failure::{Context, Failure};
use crate::settings::{require_file, Resolver};

#[derive(Args)]
pub struct TrainArgs {
    /// Directory holding images/modifications/targets/originals[/image_targets].semb.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    modifications: Option<PathBuf>,
    /// Modified-caption embeddings.
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Original-caption embeddings.
    #[arg(long)]
    originals: Option<PathBuf>,
    /// Target-image embeddings, needed for `--target-source image`.
    #[arg(long)]
    image_targets: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and the config snapshot.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from `epoch_k.ckpt`; the sibling `epoch_k.opt` must exist.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total epochs, counting those already done when resuming.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    min_batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target_source: Option<TargetSource>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    margin: Option<f64>,
    #[arg(long)]
    alpha_pos: Option<f64>,
    #[arg(long)]
    alpha_neg: Option<f64>,
    /// Drop the diagonal of the batch-negative sum.
    #[arg(long)]
    exclude_diagonal: bool,
    #[arg(long)]
    dropout: Option<f64>,
    /// Projection width; default 4 x dim.
    #[arg(long)]
    proj_dim: Option<usize>,
    /// Fusion hidden width; default 8 x dim.
    #[arg(long)]
    hidden_dim: Option<usize>,
}

fn table_path(
    r: &mut Resolver,
    key: &str,
    flag: Option<PathBuf>,
    data: Option<&Path>,
    file: &str,
) -> Result<Option<PathBuf>, Failure> {
    r.resolve(key, flag, data.map(|d| d.join(file)))
}

fn load(path: &Path) -> Result<EmbeddingTable, Failure> {
    read_table(path).at(path.display())
}

/// `epoch_3.ckpt` -> `epoch_3.opt`.
pub fn optimizer_sidecar(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("opt")
}

pub fn run(a: TrainArgs, mut r: Resolver) -> Result<(), Failure> {
    let td = TrainConfig::default();
    let ld = LossConfig::default();
    let ad = AdamWConfig::default();

    let data = r.optional("data", a.data)?;
    let images = table_path(&mut r, "images", a.images, data.as_deref(), "images.semb")?;
    let mods = table_path(&mut r, "modifications", a.modifications, data.as_deref(), "modifications.semb")?;
    let targets = table_path(&mut r, "targets", a.targets, data.as_deref(), "targets.semb")?;
    let originals = table_path(&mut r, "originals", a.originals, data.as_deref(), "originals.semb")?;
    let implied_image_targets = data
        .as_deref()
        .map(|d| d.join("image_targets.semb"))
        .filter(|p| p.is_file());
    let image_targets = r.resolve("image_targets", a.image_targets, implied_image_targets)?;
    let out: PathBuf = r.required("out", a.out)?;
    let resume = r.optional("resume", a.resume)?;

    let cfg = TrainConfig {
        batch_size: r.value("batch_size", a.batch_size, td.batch_size)?,
        epochs: r.value("epochs", a.epochs, td.epochs)?,
        seed: r.value("seed", a.seed, td.seed)?,
        loss: LossConfig {
            margin: r.value("margin", a.margin, ld.margin)?,
            alpha_pos: r.value("alpha_pos", a.alpha_pos, ld.alpha_pos)?,
            alpha_neg: r.value("alpha_neg", a.alpha_neg, ld.alpha_neg)?,
            temperature: ld.temperature,
            exclude_diagonal: r.switch("exclude_diagonal", a.exclude_diagonal)?,
        },
        adamw: AdamWConfig {
            learning_rate: r.value("lr", a.lr, ad.learning_rate)?,
            beta1: r.value("beta1", a.beta1, ad.beta1)?,
            beta2: r.value("beta2", a.beta2, ad.beta2)?,
            eps: r.value("eps", a.eps, ad.eps)?,
            weight_decay: r.value("weight_decay", a.weight_decay, ad.weight_decay)?,
        },
        target_source: r.value("target_source", a.target_source, td.target_source)?,
        min_batch: r.value("min_batch", a.min_batch, td.min_batch)?,
    };
    let dropout = r.optional("dropout", a.dropout)?;
    let proj_dim = r.optional("proj_dim", a.proj_dim)?;
    let hidden_dim = r.optional("hidden_dim", a.hidden_dim)?;
    r.finish()?;

    // configuration problems surface before any table is read
    cfg.validate()?;
    let [images, mods, targets, originals] = [("images", images), ("modifications", mods), ("targets", targets), ("originals", originals)]
        .map(|(k, p)| p.ok_or_else(|| Failure::config(format!("missing --{k} (or --data)"))));
    let (images, mods, targets, originals) = (images?, mods?, targets?, originals?);
    if cfg.target_source == TargetSource::Image && image_targets.is_none() {
        return Err(Failure::config("target_source=image needs an image-targets table"));
    }
    if let Some(p) = dropout {
        if !(0.0..1.0).contains(&p) {
            return Err(Failure::config(format!("dropout {p} outside [0, 1)")));
        }
    }
    for p in [&images, &mods, &targets, &originals].into_iter().chain(image_targets.as_ref()) {
        require_file(p)?;
    }
    let sidecar = resume.as_deref().map(optimizer_sidecar);
    for p in resume.iter().chain(sidecar.iter()) {
        require_file(p)?;
    }

    let (mut examples, report) =
        assemble_training_set(&load(&images)?, &load(&mods)?, &load(&targets)?, &load(&originals)?)?;
    if !report.dropped.is_empty() {
        log::warn!("{} ids not present in all four tables were skipped", report.dropped.len());
    }
    if let Some(p) = &image_targets {
        let missing = attach_image_targets(&mut examples, &load(p)?)?;
        if cfg.target_source == TargetSource::Image && !missing.is_empty() {
            log::warn!("{} examples lack a target image and were skipped", missing.len());
            examples.retain(|e| e.target_image.is_some());
        }
    }
    let d = examples[0].dim();

    let start = match (&resume, &sidecar) {
        (Some(ckpt), Some(opt)) => {
            let params = load_checkpoint(ckpt).at(ckpt.display())?;
            let dims = params.dims();
            if dims.d != d {
                return Err(Failure::config(format!("checkpoint dim {} but data dim {d}", dims.d)));
            }
            let clash = proj_dim.is_some_and(|p| p != dims.p)
                || hidden_dim.is_some_and(|h| h != dims.h)
                || dropout.is_some_and(|p| p as f32 != dims.dropout_rate);
            if clash {
                return Err(Failure::config("width or dropout flags disagree with the resumed checkpoint"));
            }
            let (state, done) = load_optimizer_state(dims, opt).at(opt.display())?;
            TrainStart {
                params,
                state: Some(state),
                epochs_done: done as usize,
            }
        }
        _ => {
            let dims = CombinerDims {
                d,
                p: proj_dim.unwrap_or(4 * d),
                h: hidden_dim.unwrap_or(8 * d),
                dropout_rate: dropout.unwrap_or(0.5) as f32,
            };
            TrainStart::fresh(CombinerParams::init(dims, cfg.seed)?)
        }
    };
    let dims = start.params.dims();
    r.record("proj_dim", &dims.p)?;
    r.record("hidden_dim", &dims.h)?;
    r.record("dropout", &(dims.dropout_rate as f64))?;

    let remaining = cfg.epochs.checked_sub(start.epochs_done).filter(|n| *n > 0).ok_or_else(|| {
        Failure::config(format!(
            "--epochs {} is the total; {} already done",
            cfg.epochs, start.epochs_done
        ))
    })?;
    let run_cfg = TrainConfig {
        epochs: remaining,
        ..cfg.clone()
    };

    let mut observer = DirObserver::new(&out, resume.is_some()).at(out.display())?;
    r.write_snapshot(&out.join("config.toml"))?;
    log::info!(
        "training {} examples, d={}, epochs {}..={}",
        examples.len(),
        d,
        start.epochs_done + 1,
        cfg.epochs
    );
    let outcome = train(&examples, &run_cfg, start, &mut observer)?;
    for e in &outcome.epochs {
        println!(
            "epoch={} batches={} mean_l_total={:.6} mean_l_pos={:.6}",
            e.epoch, e.batches, e.mean_l_total, e.mean_l_pos
        );
    }
    println!("checkpoint={}", DirObserver::checkpoint_path(&out, cfg.epochs).display());
    Ok(())
}
