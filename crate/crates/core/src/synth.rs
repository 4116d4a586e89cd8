//! Synthetic aligned-encoder world: `C` orthonormal concept directions in
//! `d` dimensions, with image and text embeddings sampled as noisy copies.
//!
//! Noise is isotropic Gaussian with per-coordinate standard deviation
//! `σ/√d`, so its expected norm is about `σ`. For an edit `a → b`:
//!
//! ```text
//! V   = normalize(e_a + σ_img·n)        T   = normalize(e_a + σ_txt·n)
//! T_m = normalize(e_b - e_a + σ_txt·n)  T_u = normalize(e_b + σ_txt·n)
//! ```
//!
//! Gallery rows are image samples of concepts assigned round-robin. An eval
//! query takes a gallery item of concept `a` as reference, and its target is
//! the concept-`b` gallery item closest to `e_b`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::store::{
    assemble_training_set, attach_image_targets, write_eval_queries, write_table, write_triplets, EmbeddingTable,
    EvalQuery, TextTriplet, TrainingExample,
};
use crate::tensor::{dot, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptWorld {
    pub concepts: usize,
    pub dim: usize,
    /// `concepts` orthonormal rows of length `dim`.
    pub basis: Vec<Vec<f64>>,
    pub sigma_img: f64,
    pub sigma_txt: f64,
    pub seed: u64,
}

pub fn gen_world(concepts: usize, dim: usize, sigma_img: f64, sigma_txt: f64, seed: u64) -> Result<ConceptWorld> {
    if concepts == 0 || concepts > dim {
        return Err(Error::BadDims(format!("need 0 < C <= d, got C={concepts}, d={dim}")));
    }
    for s in [sigma_img, sigma_txt] {
        if !(0.0..0.5).contains(&s) {
            return Err(Error::BadDims(format!("noise level {s} outside [0, 0.5)")));
        }
    }
    let mut rng = Rng::new(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(concepts);
    while basis.len() < concepts {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        // modified Gram-Schmidt, two passes for accuracy
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-6 {
            continue;
        }
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    Ok(ConceptWorld {
        concepts,
        dim,
        basis,
        sigma_img,
        sigma_txt,
        seed,
    })
}

impl ConceptWorld {
    fn noisy(&self, base: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f32> {
        let scale = sigma / (self.dim as f64).sqrt();
        let v: Vec<f64> = base.iter().map(|x| x + scale * rng.normal()).collect();
        let n = dot(&v, &v).sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    }

    pub fn image(&self, concept: usize, rng: &mut Rng) -> Vec<f32> {
        self.noisy(&self.basis[concept], self.sigma_img, rng)
    }

    pub fn text(&self, concept: usize, rng: &mut Rng) -> Vec<f32> {
        self.noisy(&self.basis[concept], self.sigma_txt, rng)
    }

    /// Text embedding of the edit `a → b`.
    pub fn edit(&self, from: usize, to: usize, rng: &mut Rng) -> Vec<f32> {
        let dir: Vec<f64> = self.basis[to]
            .iter()
            .zip(&self.basis[from])
            .map(|(b, a)| b - a)
            .collect();
        self.noisy(&dir, self.sigma_txt, rng)
    }

    pub fn concept_name(c: usize) -> String {
        format!("concept{c:02}")
    }

    fn distinct_pair(&self, rng: &mut Rng) -> (usize, usize) {
        let a = rng.below(self.concepts);
        let mut b = rng.below(self.concepts - 1);
        if b >= a {
            b += 1;
        }
        (a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_eval: usize,
    pub gallery_size: usize,
    /// Fraction of image targets replaced by a wrong concept.
    pub corruption: f64,
    /// Size of each query's labelled subset (target included); 0 disables subsets.
    pub subset_size: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_eval: 200,
            gallery_size: 200,
            corruption: 0.0,
            subset_size: 6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: EmbeddingTable,
    pub modifications: EmbeddingTable,
    pub targets: EmbeddingTable,
    pub originals: EmbeddingTable,
    pub image_targets: EmbeddingTable,
    pub triplets: Vec<TextTriplet>,
    /// Joined training set with image targets attached.
    pub train: Vec<TrainingExample>,
    /// `(a, b)` edit of each training example.
    pub train_edits: Vec<(usize, usize)>,
    /// Concept carried by each image target; differs from `b` when corrupted.
    pub image_target_concepts: Vec<usize>,
    pub gallery: EmbeddingTable,
    pub gallery_concepts: Vec<usize>,
    pub queries: Vec<EvalQuery>,
    /// Modification embeddings keyed by query id.
    pub query_modifications: EmbeddingTable,
    pub query_edits: Vec<(usize, usize)>,
}

pub fn gen_dataset(world: &ConceptWorld, spec: &DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    if spec.n_train == 0 || spec.n_eval == 0 || spec.gallery_size == 0 {
        return Err(Error::BadSizes("train, eval and gallery sizes must be positive".into()));
    }
    if world.concepts < 2 {
        return Err(Error::BadSizes("need at least two concepts to form edits".into()));
    }
    if !(0.0..=1.0).contains(&spec.corruption) {
        return Err(Error::BadSizes(format!("corruption rate {} outside [0, 1]", spec.corruption)));
    }
    if spec.subset_size == 1 || spec.subset_size > spec.gallery_size {
        return Err(Error::BadSizes(format!(
            "subset size {} must be 0 or in [2, gallery size]",
            spec.subset_size
        )));
    }

    // disjoint streams per split
    let mut train_rng = Rng::derive(seed, &[1]);
    let mut gallery_rng = Rng::derive(seed, &[2]);
    let mut eval_rng = Rng::derive(seed, &[3]);
    let mut corrupt_rng = Rng::derive(seed, &[4]);

    let n = spec.n_train;
    let n_corrupt = (spec.corruption * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    corrupt_rng.shuffle(&mut order);
    let mut corrupted = vec![false; n];
    for &i in &order[..n_corrupt] {
        corrupted[i] = true;
    }

    let tag = format!("synthetic:C={},d={},seed={}", world.concepts, world.dim, world.seed);
    let mut rows: [Vec<(String, Vec<f32>)>; 5] = Default::default();
    let mut triplets = Vec::with_capacity(n);
    let mut train_edits = Vec::with_capacity(n);
    let mut image_target_concepts = Vec::with_capacity(n);
    for (i, &bad) in corrupted.iter().enumerate() {
        let id = format!("train-{i:05}");
        let (a, b) = world.distinct_pair(&mut train_rng);
        let image = world.image(a, &mut train_rng);
        let caption = world.text(a, &mut train_rng);
        let modification = world.edit(a, b, &mut train_rng);
        let target = world.text(b, &mut train_rng);
        let target_concept = if bad {
            let mut c = train_rng.below(world.concepts - 1);
            if c >= b {
                c += 1;
            }
            c
        } else {
            b
        };
        let image_target = world.image(target_concept, &mut train_rng);
        for (slot, v) in rows.iter_mut().zip([image, modification, target, caption, image_target]) {
            slot.push((id.clone(), v));
        }
        let (na, nb) = (ConceptWorld::concept_name(a), ConceptWorld::concept_name(b));
        triplets.push(TextTriplet {
            id,
            caption: format!("a photo of a {na}"),
            modification: format!("replace the {na} with a {nb}"),
            modified_caption: format!("a photo of a {nb}"),
        });
        train_edits.push((a, b));
        image_target_concepts.push(target_concept);
    }
    let [images, modifications, targets, originals, image_targets] =
        rows.map(|r| EmbeddingTable::from_pairs(r, &tag));
    let (images, modifications, targets, originals, image_targets) =
        (images?, modifications?, targets?, originals?, image_targets?);

    let (mut train, _) = assemble_training_set(&images, &modifications, &targets, &originals)?;
    attach_image_targets(&mut train, &image_targets)?;

    let gallery_concepts: Vec<usize> = (0..spec.gallery_size).map(|j| j % world.concepts).collect();
    let gallery_rows: Vec<(String, Vec<f32>)> = gallery_concepts
        .iter()
        .enumerate()
        .map(|(j, &c)| (format!("gal-{j:05}"), world.image(c, &mut gallery_rng)))
        .collect();
    let gallery = EmbeddingTable::from_pairs(gallery_rows, &tag)?;

    let present: Vec<usize> = {
        let mut p: Vec<usize> = gallery_concepts.clone();
        p.sort_unstable();
        p.dedup();
        p
    };
    if present.len() < 2 {
        return Err(Error::BadSizes("gallery must cover at least two concepts".into()));
    }
    let mut queries = Vec::with_capacity(spec.n_eval);
    let mut mod_rows = Vec::with_capacity(spec.n_eval);
    let mut query_edits = Vec::with_capacity(spec.n_eval);
    for q in 0..spec.n_eval {
        let id = format!("q-{q:05}");
        let r = eval_rng.below(spec.gallery_size);
        let a = gallery_concepts[r];
        let others: Vec<usize> = present.iter().copied().filter(|c| *c != a).collect();
        let b = others[eval_rng.below(others.len())];
        let target = closest_of_concept(world, &gallery, &gallery_concepts, b);
        let subset_ids = (spec.subset_size > 0)
            .then(|| pick_subset(&mut eval_rng, &gallery_concepts, target, b, spec.subset_size, gallery.ids()));
        mod_rows.push((id.clone(), world.edit(a, b, &mut eval_rng)));
        queries.push(EvalQuery {
            id,
            reference_id: gallery.ids()[r].clone(),
            modification_text: format!(
                "replace the {} with a {}",
                ConceptWorld::concept_name(a),
                ConceptWorld::concept_name(b)
            ),
            target_id: gallery.ids()[target].clone(),
            subset_ids,
        });
        query_edits.push((a, b));
    }
    let query_modifications = EmbeddingTable::from_pairs(mod_rows, &tag)?;

    Ok(SyntheticDataset {
        images,
        modifications,
        targets,
        originals,
        image_targets,
        triplets,
        train,
        train_edits,
        image_target_concepts,
        gallery,
        gallery_concepts,
        queries,
        query_modifications,
        query_edits,
    })
}

/// Gallery row of `concept` with the highest cosine to the clean concept direction.
fn closest_of_concept(world: &ConceptWorld, gallery: &EmbeddingTable, concepts: &[usize], concept: usize) -> usize {
    let dir = &world.basis[concept];
    let mut best: Option<(f64, usize)> = None;
    for (j, _) in concepts.iter().enumerate().filter(|(_, c)| **c == concept) {
        let s: f64 = gallery.matrix().row(j).iter().zip(dir).map(|(x, y)| *x as f64 * y).sum();
        // ascending id order equals ascending row order here
        if best.is_none_or(|(bs, _)| s > bs) {
            best = Some((s, j));
        }
    }
    best.expect("concept present in gallery").1
}

/// Target plus distractors: up to half drawn from the target concept, the rest from anywhere.
fn pick_subset(
    rng: &mut Rng,
    concepts: &[usize],
    target: usize,
    concept: usize,
    size: usize,
    ids: &[String],
) -> Vec<String> {
    let mut same: Vec<usize> = (0..concepts.len()).filter(|&j| j != target && concepts[j] == concept).collect();
    rng.shuffle(&mut same);
    let mut chosen = vec![target];
    chosen.extend(same.into_iter().take((size - 1) / 2));
    let mut rest: Vec<usize> = (0..concepts.len()).filter(|j| !chosen.contains(j)).collect();
    rng.shuffle(&mut rest);
    let need = size - chosen.len();
    chosen.extend(rest.into_iter().take(need));
    chosen.sort_unstable();
    chosen.into_iter().map(|j| ids[j].clone()).collect()
}

impl SyntheticDataset {
    /// Writes every table and record file into `dir` using the public formats.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (name, t) in [
            ("images", &self.images),
            ("modifications", &self.modifications),
            ("targets", &self.targets),
            ("originals", &self.originals),
            ("image_targets", &self.image_targets),
            ("gallery", &self.gallery),
            ("query_modifications", &self.query_modifications),
        ] {
            write_table(t, dir.join(format!("{name}.semb")))?;
        }
        write_triplets(dir.join("triplets.jsonl"), &self.triplets)?;
        write_eval_queries(dir.join("queries.jsonl"), &self.queries)?;
        Ok(())
    }
}

impl EmbeddingTable {
    /// Table from `(id, row)` pairs; rows must already be near unit norm.
    pub fn from_pairs(rows: Vec<(String, Vec<f32>)>, tag: &str) -> Result<Self> {
        let (ids, data): (Vec<String>, Vec<Vec<f32>>) = rows.into_iter().unzip();
        Self::new(ids, crate::tensor::Matrix::from_rows(&data)?, tag)
    }
}
