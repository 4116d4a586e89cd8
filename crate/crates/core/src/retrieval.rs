//! Exact cosine search over a gallery and the Recall@K protocol.
//!
//! Rankings sort by descending score; equal scores are ordered by ascending
//! gallery id. Scores are accumulated in `f64` from the stored `f32` rows.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combiner::CombinerParams;
use crate::error::{check_dim, Error, Result};
use crate::store::{EmbeddingTable, EvalQuery};
use crate::tensor::{l2_normalize, ZERO_NORM};

#[derive(Debug, Clone)]
pub struct GalleryIndex {
    table: EmbeddingTable,
    /// Row norms in `f64`; stored rows are only unit to `f32` precision.
    norms: Vec<f64>,
}

impl GalleryIndex {
    pub fn new(table: EmbeddingTable) -> Self {
        let norms = table
            .matrix()
            .iter_rows()
            .map(|r| r.iter().map(|x| *x as f64 * *x as f64).sum::<f64>().sqrt())
            .collect();
        Self { table, norms }
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    /// Cosine between `q` and gallery row `i`.
    fn score(&self, q: &[f32], q_norm: f64, i: usize) -> f64 {
        let row = self.table.matrix().row(i);
        let mut acc = 0.0f64;
        for (a, b) in q.iter().zip(row) {
            acc += *a as f64 * *b as f64;
        }
        acc / (q_norm * self.norms[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

impl RankedResult {
    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.hits.iter().position(|h| h.id == id).map(|p| p + 1)
    }
}

/// Total order used by every ranking: score descending, then id ascending.
pub fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

fn query_norm(q: &[f32]) -> Result<f64> {
    let n = q.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if !n.is_finite() {
        return Err(Error::NonFinite("query".into()));
    }
    if n < ZERO_NORM {
        return Err(Error::ZeroVector {
            threshold: ZERO_NORM,
        });
    }
    Ok(n)
}

fn rank_rows(index: &GalleryIndex, q: &[f32], rows: Vec<usize>, k: usize) -> Result<Vec<Hit>> {
    let qn = query_norm(q)?;
    let ids = index.table.ids();
    let mut scored: Vec<(f64, usize)> = rows.into_iter().map(|i| (index.score(q, qn, i), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| rank_order((a.0, &ids[a.1]), (b.0, &ids[b.1]));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(score, i)| Hit {
            id: ids[i].clone(),
            score,
        })
        .collect())
}

/// Top-`k` gallery items for query vector `q`.
pub fn search(index: &GalleryIndex, query_id: &str, q: &[f32], k: usize) -> Result<RankedResult> {
    search_excluding(index, query_id, q, k, None)
}

/// Like [`search`], optionally leaving one gallery id out of the ranking.
pub fn search_excluding(
    index: &GalleryIndex,
    query_id: &str,
    q: &[f32],
    k: usize,
    exclude: Option<&str>,
) -> Result<RankedResult> {
    check_dim(index.dim(), q.len())?;
    let skip = exclude.and_then(|id| index.table.position(id));
    let rows: Vec<usize> = (0..index.len()).filter(|i| Some(*i) != skip).collect();
    if k == 0 || k > rows.len() {
        return Err(Error::BadK { k, size: rows.len() });
    }
    Ok(RankedResult {
        query_id: query_id.to_string(),
        hits: rank_rows(index, q, rows, k)?,
    })
}

/// Ranks only the listed gallery ids.
pub fn rank_subset(index: &GalleryIndex, query_id: &str, q: &[f32], subset: &[String]) -> Result<RankedResult> {
    check_dim(index.dim(), q.len())?;
    let rows = subset
        .iter()
        .map(|id| {
            index.table.position(id).ok_or_else(|| Error::UnknownId {
                query: query_id.into(),
                id: id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len();
    Ok(RankedResult {
        query_id: query_id.to_string(),
        hits: rank_rows(index, q, rows, n)?,
    })
}

/// Fraction of queries whose target is within the first `k` hits.
pub fn recall_at_k(results: &[RankedResult], ground_truth: &HashMap<String, String>, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut found = 0usize;
    for r in results {
        let target = ground_truth
            .get(&r.query_id)
            .ok_or_else(|| Error::MissingGroundTruth(r.query_id.clone()))?;
        if r.hits.iter().take(k).any(|h| &h.id == target) {
            found += 1;
        }
    }
    Ok(found as f64 / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Learned composition of reference image and modification text.
    Scot,
    ImageOnly,
    TextOnly,
    ImagePlusText,
}

impl QueryMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Scot => "scot",
            Self::ImageOnly => "image_only",
            Self::TextOnly => "text_only",
            Self::ImagePlusText => "image_plus_text",
        }
    }
}

impl FromStr for QueryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scot" => Ok(Self::Scot),
            "image_only" => Ok(Self::ImageOnly),
            "text_only" => Ok(Self::TextOnly),
            "image_plus_text" => Ok(Self::ImagePlusText),
            other => Err(Error::Config(format!("unknown query mode {other:?}"))),
        }
    }
}

/// Baseline queries that need no learned parameters.
pub fn baseline_query(mode: QueryMode, image: &[f32], modification: &[f32]) -> Result<Vec<f32>> {
    check_dim(image.len(), modification.len())?;
    match mode {
        QueryMode::ImageOnly => Ok(image.to_vec()),
        QueryMode::TextOnly => Ok(modification.to_vec()),
        QueryMode::ImagePlusText => {
            let sum: Vec<f32> = image.iter().zip(modification).map(|(a, b)| a + b).collect();
            l2_normalize(&sum)
        }
        QueryMode::Scot => Err(Error::Config("scot is not a baseline mode".into())),
    }
}

/// Eval-mode composed query and its dynamic scalar.
pub fn compose_query(params: &CombinerParams<f32>, image: &[f32], modification: &[f32]) -> Result<(Vec<f32>, f32)> {
    params.compose(image, modification)
}

/// Embeddings and parameters needed to turn an [`EvalQuery`] into a vector.
pub struct EvalContext<'a> {
    pub gallery: &'a GalleryIndex,
    /// Reference image embeddings, looked up by `reference_id`.
    pub references: &'a EmbeddingTable,
    /// Modification-text embeddings, looked up by query id and then by
    /// `modification_text`.
    pub modifications: &'a EmbeddingTable,
    pub params: Option<&'a CombinerParams<f32>>,
    /// Leave each query's reference image out of its ranking.
    pub exclude_reference: bool,
}

impl EvalContext<'_> {
    fn lookup_modification(&self, q: &EvalQuery) -> Result<&[f32]> {
        self.modifications
            .get(&q.id)
            .or_else(|| self.modifications.get(&q.modification_text))
            .ok_or_else(|| Error::UnknownId {
                query: q.id.clone(),
                id: format!("modification embedding for {:?}", q.modification_text),
            })
    }

    /// Query vector plus the dynamic scalar when the mode is `Scot`.
    pub fn query_vector(&self, mode: QueryMode, q: &EvalQuery) -> Result<(Vec<f32>, Option<f32>)> {
        let image = self.references.get(&q.reference_id).ok_or_else(|| Error::UnknownId {
            query: q.id.clone(),
            id: q.reference_id.clone(),
        })?;
        let modification = self.lookup_modification(q)?;
        match mode {
            QueryMode::Scot => {
                let params = self
                    .params
                    .ok_or_else(|| Error::Config("mode scot requires a checkpoint".into()))?;
                let (v, s) = compose_query(params, image, modification)?;
                Ok((v, Some(s)))
            }
            other => Ok((baseline_query(other, image, modification)?, None)),
        }
    }

    fn check_target(&self, q: &EvalQuery) -> Result<()> {
        if !self.gallery.table().contains(&q.target_id) {
            return Err(Error::MissingGroundTruth(format!(
                "{}: target {} not in gallery",
                q.id, q.target_id
            )));
        }
        Ok(())
    }
}

/// Recall@K with each query ranked only against its own labelled subset.
pub fn recall_subset_at_k(ctx: &EvalContext<'_>, mode: QueryMode, queries: &[EvalQuery], k: usize) -> Result<f64> {
    let subset_results = subset_rankings(ctx, mode, queries)?;
    if subset_results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = subset_results
        .iter()
        .zip(queries.iter().filter(|q| q.subset_ids.is_some()))
        .filter(|(r, q)| r.hits.iter().take(k).any(|h| h.id == q.target_id))
        .count();
    Ok(hits as f64 / subset_results.len() as f64)
}

fn subset_rankings(ctx: &EvalContext<'_>, mode: QueryMode, queries: &[EvalQuery]) -> Result<Vec<RankedResult>> {
    queries
        .par_iter()
        .filter_map(|q| q.subset_ids.as_ref().map(|s| (q, s)))
        .map(|(q, subset)| {
            if !subset.contains(&q.target_id) {
                return Err(Error::SubsetMissingTarget {
                    query: q.id.clone(),
                    target: q.target_id.clone(),
                });
            }
            let (v, _) = ctx.query_vector(mode, q)?;
            rank_subset(ctx.gallery, &q.id, &v, subset)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ScalarStats {
    fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeReport {
    pub mode: QueryMode,
    pub recall: Vec<(usize, f64)>,
    pub recall_subset: Vec<(usize, f64)>,
    /// Distribution of the dynamic scalar over queries (scot mode only).
    pub dynamic_scalar: Option<ScalarStats>,
    pub results: Vec<RankedResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub modes: Vec<ModeReport>,
}

#[derive(Serialize)]
struct MetricRecord<'a> {
    mode: &'a str,
    metric: &'a str,
    k: Option<usize>,
    value: f64,
}

impl EvalReport {
    pub fn mode(&self, mode: QueryMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// `metric=K=value` lines, e.g. `scot.recall=10=0.875000`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in &self.modes {
            let name = m.mode.name();
            for (k, v) in &m.recall {
                let _ = writeln!(out, "{name}.recall={k}={v:.6}");
            }
            for (k, v) in &m.recall_subset {
                let _ = writeln!(out, "{name}.recall_subset={k}={v:.6}");
            }
            if let Some(s) = &m.dynamic_scalar {
                let _ = writeln!(out, "{name}.dynamic_scalar_mean={:.6}", s.mean);
                let _ = writeln!(out, "{name}.dynamic_scalar_std={:.6}", s.std);
                let _ = writeln!(out, "{name}.dynamic_scalar_min={:.6}", s.min);
                let _ = writeln!(out, "{name}.dynamic_scalar_max={:.6}", s.max);
            }
        }
        out
    }

    /// One JSON record per metric value.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: MetricRecord<'_>| {
            out.push_str(&serde_json::to_string(&r).expect("metric record serializes"));
            out.push('\n');
        };
        for m in &self.modes {
            let mode = m.mode.name();
            for (k, v) in &m.recall {
                push(MetricRecord { mode, metric: "recall", k: Some(*k), value: *v });
            }
            for (k, v) in &m.recall_subset {
                push(MetricRecord { mode, metric: "recall_subset", k: Some(*k), value: *v });
            }
            if let Some(s) = &m.dynamic_scalar {
                push(MetricRecord { mode, metric: "dynamic_scalar_mean", k: None, value: s.mean });
                push(MetricRecord { mode, metric: "dynamic_scalar_std", k: None, value: s.std });
            }
        }
        out
    }

    /// Every ranked result, one JSON object per line, prefixed by mode.
    pub fn results_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Dump<'a> {
            mode: &'a str,
            #[serde(flatten)]
            result: &'a RankedResult,
        }
        let mut out = String::new();
        for m in &self.modes {
            for r in &m.results {
                out.push_str(
                    &serde_json::to_string(&Dump {
                        mode: m.mode.name(),
                        result: r,
                    })
                    .expect("ranked result serializes"),
                );
                out.push('\n');
            }
        }
        out
    }
}

/// Runs every mode over every query and computes Recall@K (and subset
/// recall where queries carry subsets) for each `k` in `ks`.
pub fn evaluate(ctx: &EvalContext<'_>, queries: &[EvalQuery], ks: &[usize], modes: &[QueryMode]) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::EmptyInput);
    }
    let depth = *ks.iter().max().ok_or_else(|| Error::Config("no K values".into()))?;
    for q in queries {
        ctx.check_target(q)?;
    }
    let truth: HashMap<String, String> = queries.iter().map(|q| (q.id.clone(), q.target_id.clone())).collect();
    let has_subsets = queries.iter().any(|q| q.subset_ids.is_some());

    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let ranked: Vec<(RankedResult, Option<f32>)> = queries
            .par_iter()
            .map(|q| {
                let (v, s) = ctx.query_vector(mode, q)?;
                let exclude = ctx.exclude_reference.then_some(q.reference_id.as_str());
                Ok((search_excluding(ctx.gallery, &q.id, &v, depth, exclude)?, s))
            })
            .collect::<Result<_>>()?;
        let s_values: Vec<f64> = ranked.iter().filter_map(|(_, s)| s.map(f64::from)).collect();
        let results: Vec<RankedResult> = ranked.into_iter().map(|(r, _)| r).collect();
        let recall = ks
            .iter()
            .map(|&k| Ok((k, recall_at_k(&results, &truth, k)?)))
            .collect::<Result<Vec<_>>>()?;
        let recall_subset = if has_subsets {
            let subset_results = subset_rankings(ctx, mode, queries)?;
            let subset_queries: Vec<&EvalQuery> = queries.iter().filter(|q| q.subset_ids.is_some()).collect();
            ks.iter()
                .map(|&k| {
                    let hits = subset_results
                        .iter()
                        .zip(&subset_queries)
                        .filter(|(r, q)| r.hits.iter().take(k).any(|h| h.id == q.target_id))
                        .count();
                    (k, hits as f64 / subset_results.len() as f64)
                })
                .collect()
        } else {
            Vec::new()
        };
        reports.push(ModeReport {
            mode,
            recall,
            recall_subset,
            dynamic_scalar: ScalarStats::of(&s_values),
            results,
        });
    }
    Ok(EvalReport { modes: reports })
}
