use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use scot_core::combiner::load_checkpoint_for_dim;
use scot_core::loss::clip_i2t_loss;
use scot_core::retrieval::{evaluate, search_excluding};
use scot_core::store::{load_eval_queries, read_table};
use scot_core::{CombinerParams, EmbeddingTable, Error, EvalContext, EvalQuery, GalleryIndex, Matrix, QueryMode, Rng};

use crate::failure::{Context, Failure};
use crate::settings::{require_file, Resolver};

#[derive(Args)]
pub struct EvalArgs {
    /// Directory with gallery.semb, query_modifications.semb and queries.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Reference image table; defaults to the gallery.
    #[arg(long)]
    references: Option<PathBuf>,
    /// Modification-text table, keyed by query id or modification text.
    #[arg(long)]
    modifications: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    /// Default: every baseline, plus scot when a checkpoint is given.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<QueryMode>,
    /// Leave each query's reference image out of its ranking.
    #[arg(long)]
    exclude_reference: bool,
    /// Directory for report.jsonl, results.jsonl and the config snapshot.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Reference image table; defaults to the gallery.
    #[arg(long)]
    references: Option<PathBuf>,
    #[arg(long)]
    reference_id: Option<String>,
    /// Table holding the modification-text embedding.
    #[arg(long)]
    modifications: Option<PathBuf>,
    #[arg(long)]
    modification_id: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    mode: Option<QueryMode>,
    #[arg(long)]
    exclude_reference: bool,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    texts: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Permute the text rows with this seed before scoring, to get a mismatched baseline.
    #[arg(long)]
    shuffle: Option<u64>,
}

const BASELINES: [QueryMode; 3] = [QueryMode::TextOnly, QueryMode::ImageOnly, QueryMode::ImagePlusText];

fn load(path: &Path) -> Result<EmbeddingTable, Failure> {
    require_file(path)?;
    read_table(path).at(path.display())
}

fn load_params(path: &Path, d: usize) -> Result<CombinerParams<f32>, Failure> {
    require_file(path)?;
    load_checkpoint_for_dim(path, d).at(path.display())
}

pub fn run_eval(a: EvalArgs, mut r: Resolver) -> Result<(), Failure> {
    let data = r.optional::<PathBuf>("data", a.data)?;
    let from_data = |f: &str| data.as_ref().map(|d| d.join(f));
    let checkpoint = r.optional("checkpoint", a.checkpoint)?;
    let gallery_path: PathBuf = r
        .resolve("gallery", a.gallery, from_data("gallery.semb"))?
        .ok_or_else(|| Failure::config("missing --gallery (or --data)"))?;
    let references = r.value("references", a.references, gallery_path.clone())?;
    let mods_path: PathBuf = r
        .resolve("modifications", a.modifications, from_data("query_modifications.semb"))?
        .ok_or_else(|| Failure::config("missing --modifications (or --data)"))?;
    let queries_path: PathBuf = r
        .resolve("queries", a.queries, from_data("queries.jsonl"))?
        .ok_or_else(|| Failure::config("missing --queries (or --data)"))?;
    let ks = r.list("ks", a.ks, vec![1, 5, 10, 50])?;
    let default_modes = if checkpoint.is_some() {
        vec![QueryMode::Scot, QueryMode::TextOnly, QueryMode::ImageOnly, QueryMode::ImagePlusText]
    } else {
        BASELINES.to_vec()
    };
    let modes = r.list("modes", a.modes, default_modes)?;
    let exclude_reference = r.switch("exclude_reference", a.exclude_reference)?;
    let out = r.optional::<PathBuf>("out", a.out)?;
    r.finish()?;
    if modes.contains(&QueryMode::Scot) && checkpoint.is_none() {
        return Err(Failure::config("mode scot requires --checkpoint"));
    }

    let gallery = GalleryIndex::new(load(&gallery_path)?);
    let refs = if references == gallery_path {
        gallery.table().clone()
    } else {
        load(&references)?
    };
    let mods = load(&mods_path)?;
    require_file(&queries_path)?;
    let queries: Vec<EvalQuery> = load_eval_queries(&queries_path).at(queries_path.display())?;
    let params = checkpoint.as_deref().map(|p| load_params(p, gallery.dim())).transpose()?;
    let ctx = EvalContext {
        gallery: &gallery,
        references: &refs,
        modifications: &mods,
        params: params.as_ref(),
        exclude_reference,
    };
    let report = evaluate(&ctx, &queries, &ks, &modes)?;
    print!("{}", report.to_text());
    if let Some(dir) = out {
        fs::create_dir_all(&dir).at(dir.display())?;
        fs::write(dir.join("report.jsonl"), report.to_jsonl())?;
        fs::write(dir.join("results.jsonl"), report.results_jsonl())?;
        r.write_snapshot(&dir.join("config.toml"))?;
    }
    Ok(())
}

pub fn run_search(a: SearchArgs, mut r: Resolver) -> Result<(), Failure> {
    let checkpoint = r.optional::<PathBuf>("checkpoint", a.checkpoint)?;
    let gallery_path: PathBuf = r.required("gallery", a.gallery)?;
    let references = r.value("references", a.references, gallery_path.clone())?;
    let reference_id: String = r.required("reference_id", a.reference_id)?;
    let mods_path: PathBuf = r.required("modifications", a.modifications)?;
    let modification_id: String = r.required("modification_id", a.modification_id)?;
    let k = r.value("k", a.k, 10usize)?;
    let mode = r.value("mode", a.mode, QueryMode::Scot)?;
    let exclude_reference = r.switch("exclude_reference", a.exclude_reference)?;
    r.finish()?;
    if mode == QueryMode::Scot && checkpoint.is_none() {
        return Err(Failure::config("mode scot requires --checkpoint"));
    }

    let gallery = GalleryIndex::new(load(&gallery_path)?);
    let refs = if references == gallery_path {
        gallery.table().clone()
    } else {
        load(&references)?
    };
    let mods = load(&mods_path)?;
    let params = checkpoint.as_deref().map(|p| load_params(p, gallery.dim())).transpose()?;
    let ctx = EvalContext {
        gallery: &gallery,
        references: &refs,
        modifications: &mods,
        params: params.as_ref(),
        exclude_reference,
    };
    if !mods.contains(&modification_id) {
        return Err(Error::UnknownId {
            query: "search".into(),
            id: modification_id,
        }
        .into());
    }
    let q = EvalQuery {
        id: modification_id.clone(),
        reference_id: reference_id.clone(),
        modification_text: modification_id,
        target_id: String::new(),
        subset_ids: None,
    };
    let (v, s) = ctx.query_vector(mode, &q)?;
    let exclude = exclude_reference.then_some(reference_id.as_str());
    let ranked = search_excluding(&gallery, &q.id, &v, k, exclude)?;
    if let Some(s) = s {
        println!("s={s:.6}");
    }
    for (i, hit) in ranked.hits.iter().enumerate() {
        println!("{}\t{}\t{:.6}", i + 1, hit.id, hit.score);
    }
    Ok(())
}

pub fn run_probe(a: ProbeArgs, mut r: Resolver) -> Result<(), Failure> {
    let images: PathBuf = r.required("images", a.images)?;
    let texts: PathBuf = r.required("texts", a.texts)?;
    let temperature = r.value("temperature", a.temperature, 0.07)?;
    let shuffle = r.optional::<u64>("shuffle", a.shuffle)?;
    r.finish()?;

    let images = load(&images)?;
    let texts = load(&texts)?;
    if images.dim() != texts.dim() {
        return Err(Error::DimMismatch {
            expected: images.dim(),
            actual: texts.dim(),
        }
        .into());
    }
    let ids: Vec<&String> = images.ids().iter().filter(|id| texts.contains(id)).collect();
    if ids.is_empty() {
        return Err(Error::EmptyJoin.into());
    }
    let mut text_ids = ids.clone();
    if let Some(seed) = shuffle {
        Rng::new(seed).shuffle(&mut text_ids);
    }
    let rows = |t: &EmbeddingTable, ids: &[&String]| -> Result<Matrix<f64>, Error> {
        let v: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| t.get(id).expect("joined id").iter().map(|x| *x as f64).collect())
            .collect();
        Matrix::from_rows(&v)
    };
    let loss = clip_i2t_loss(&rows(&images, &ids)?, &rows(&texts, &text_ids)?, temperature)?;
    println!("pairs={}", ids.len());
    println!("clip_i2t_loss={loss:.6}");
    Ok(())
}
