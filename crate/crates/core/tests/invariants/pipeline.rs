//! Property tests for training and retrieval.

use crate::oracle;

use std::collections::HashMap;
use std::sync::LazyLock;

use proptest::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};
use scot_core::combiner::encode_checkpoint;
use scot_core::optim::{adamw_step, AdamWConfig, AdamWState};
use scot_core::retrieval::{
    evaluate, rank_subset, recall_at_k, recall_subset_at_k, search, EvalContext, GalleryIndex, QueryMode,
};
use scot_core::tensor::{Matrix, Rng};
use scot_core::trainer::{batch_inputs, forward_batch, make_batches, train, BatchMetrics, NoopObserver};
use scot_core::{CombinerDims, CombinerParams, EmbeddingTable, EvalQuery, TrainConfig, TrainStart, TrainingExample};

static SERIAL: LazyLock<ThreadPool> = LazyLock::new(|| ThreadPoolBuilder::new().num_threads(1).build().unwrap());
static PARALLEL: LazyLock<ThreadPool> = LazyLock::new(|| ThreadPoolBuilder::new().num_threads(4).build().unwrap());

fn unit_f32(rng: &mut Rng, d: usize) -> Vec<f32> {
    oracle::random_unit(rng, d).into_iter().map(|x| x as f32).collect()
}

fn tiny_data(rng: &mut Rng, n: usize, d: usize) -> Vec<TrainingExample> {
    (0..n)
        .map(|i| TrainingExample {
            id: format!("e{i}"),
            image: unit_f32(rng, d),
            modification: unit_f32(rng, d),
            target_text: unit_f32(rng, d),
            caption: unit_f32(rng, d),
            target_image: None,
        })
        .collect()
}

fn tiny_setup(seed: u64) -> (Vec<TrainingExample>, TrainConfig, CombinerParams<f32>) {
    let mut rng = Rng::new(seed);
    let d = 2 + rng.below(5);
    let n = 4 + rng.below(13);
    let data = tiny_data(&mut rng, n, d);
    let cfg = TrainConfig {
        batch_size: 2 + rng.below(7),
        epochs: 1 + rng.below(2),
        seed,
        ..TrainConfig::default()
    };
    let params = CombinerParams::<f32>::init(CombinerDims::for_dim(d), seed).unwrap();
    (data, cfg, params)
}

fn losses(b: &[BatchMetrics]) -> Vec<[u64; 4]> {
    b.iter()
        .map(|m| [m.l_pos, m.l_neg_prime, m.l_caption_neg, m.l_total].map(f64::to_bits))
        .collect()
}

fn gallery_of(rng: &mut Rng, g: usize, d: usize) -> (Vec<String>, Vec<Vec<f32>>, GalleryIndex) {
    let ids: Vec<String> = (0..g).map(|i| format!("g{i:05}")).collect();
    let rows: Vec<Vec<f32>> = (0..g).map(|_| unit_f32(rng, d)).collect();
    let table = EmbeddingTable::new(ids.clone(), Matrix::from_rows(&rows).unwrap(), "").unwrap();
    let rows = table.matrix().iter_rows().map(<[f32]>::to_vec).collect();
    (ids, rows, GalleryIndex::new(table))
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(1000) })]

    fn training_is_bit_reproducible(seed: u64) {
        let (data, cfg, params) = tiny_setup(seed);
        let run = |pool: &ThreadPool| {
            pool.install(|| train(&data, &cfg, TrainStart::fresh(params.clone()), &mut NoopObserver).unwrap())
        };
        let (a, b, c) = (run(&SERIAL), run(&SERIAL), run(&PARALLEL));
        prop_assert_eq!(encode_checkpoint(&a.params), encode_checkpoint(&b.params));
        prop_assert_eq!(encode_checkpoint(&a.params), encode_checkpoint(&c.params));
        prop_assert_eq!(losses(&a.batches), losses(&b.batches));
        prop_assert_eq!(losses(&a.batches), losses(&c.batches));
    }

    fn logged_loss_matches_independent_evaluation(seed: u64) {
        let (data, mut cfg, params) = tiny_setup(seed);
        cfg.epochs = 1;
        let out = train(&data, &cfg, TrainStart::fresh(params.clone()), &mut NoopObserver).unwrap();
        let (batches, _) = make_batches(data.len(), cfg.batch_size, cfg.min_batch, cfg.seed, 1).unwrap();
        // only the first batch sees the initial parameters
        let caches = forward_batch(&params, &data, &batches[0], cfg.seed, 1, 0).unwrap();
        let inputs = batch_inputs(&caches, &data, &batches[0], cfg.target_source).unwrap();
        let rows = |m: &Matrix<f32>| m.iter_rows().map(|r| r.iter().map(|x| *x as f64).collect()).collect::<Vec<Vec<f64>>>();
        let want = oracle::naive_losses(&rows(&inputs.composed), &rows(&inputs.targets), &rows(&inputs.captions), &cfg.loss);
        let got = &out.batches[0];
        prop_assert!(oracle::rel_err(got.l_total, want.l_total) <= 1e-6, "{} vs {}", got.l_total, want.l_total);
        prop_assert!(oracle::rel_err(got.l_pos, want.l_pos) <= 1e-6);
        prop_assert!(oracle::rel_err(got.l_neg_prime, want.l_neg_prime) <= 1e-6);
    }

    fn zero_gradient_without_decay_is_a_no_op(seed: u64, steps in 1usize..5) {
        let mut rng = Rng::new(seed);
        let dims = CombinerDims::for_dim(1 + rng.below(6));
        let mut params = CombinerParams::<f32>::init(dims, seed).unwrap();
        let before = encode_checkpoint(&params);
        let zero = CombinerParams::<f32>::zeros(dims).unwrap();
        let mut state = AdamWState::new(dims).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, learning_rate: rng.uniform(1e-6, 1.0).unwrap(), ..AdamWConfig::default() };
        for _ in 0..steps {
            adamw_step(&mut params, &zero, &mut state, &cfg).unwrap();
        }
        prop_assert_eq!(encode_checkpoint(&params), before);
    }

    fn search_equals_full_sort(seed: u64) {
        let mut rng = Rng::new(seed);
        let g = 1 + rng.below(10_000);
        let d = 1 + rng.below(8);
        let (ids, rows, index) = gallery_of(&mut rng, g, d);
        let q = unit_f32(&mut rng, d);
        let k = 1 + rng.below(g.min(100));
        let got: Vec<(String, f64)> = search(&index, "q", &q, k).unwrap().hits.into_iter().map(|h| (h.id, h.score)).collect();
        let want = oracle::brute_rank(&ids, &rows, &q);
        prop_assert_eq!(got, want[..k].to_vec());
    }

    fn recall_never_decreases_with_k(seed: u64) {
        let mut rng = Rng::new(seed);
        let g = 2 + rng.below(60);
        let d = 1 + rng.below(8);
        let (ids, _, index) = gallery_of(&mut rng, g, d);
        let mut results = Vec::new();
        let mut truth = HashMap::new();
        for q in 0..1 + rng.below(10) {
            results.push(search(&index, &format!("q{q}"), &unit_f32(&mut rng, d), g).unwrap());
            truth.insert(format!("q{q}"), ids[rng.below(g)].clone());
        }
        let mut prev = 0.0;
        for k in 1..=g {
            let r = recall_at_k(&results, &truth, k).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
    }

    fn subset_rankings(seed: u64) {
        let mut rng = Rng::new(seed);
        let g = 6 + rng.below(200);
        let d = 2 + rng.below(8);
        let (ids, _, index) = gallery_of(&mut rng, g, d);
        let size = 2 + rng.below(5);
        let mut queries = Vec::new();
        let mut refs = Vec::new();
        let mut mods = Vec::new();
        for q in 0..1 + rng.below(8) {
            let mut pool = ids.clone();
            rng.shuffle(&mut pool);
            let subset: Vec<String> = pool[..size].to_vec();
            let v = unit_f32(&mut rng, d);
            // restriction of the global ranking
            let global: Vec<String> = search(&index, "x", &v, g).unwrap().hits.into_iter().map(|h| h.id).collect();
            let restricted: Vec<String> = global.into_iter().filter(|id| subset.contains(id)).collect();
            let ranked: Vec<String> = rank_subset(&index, "x", &v, &subset).unwrap().hits.into_iter().map(|h| h.id).collect();
            prop_assert_eq!(ranked, restricted);
            refs.push((format!("r{q}"), v));
            mods.push((format!("q{q}"), unit_f32(&mut rng, d)));
            queries.push(EvalQuery {
                id: format!("q{q}"),
                reference_id: format!("r{q}"),
                modification_text: "m".into(),
                target_id: subset[rng.below(size)].clone(),
                subset_ids: Some(subset),
            });
        }
        let references = EmbeddingTable::from_raw(refs, "").unwrap();
        let modifications = EmbeddingTable::from_raw(mods, "").unwrap();
        let ctx = EvalContext { gallery: &index, references: &references, modifications: &modifications, params: None, exclude_reference: false };
        for mode in [QueryMode::ImageOnly, QueryMode::TextOnly, QueryMode::ImagePlusText] {
            prop_assert_eq!(recall_subset_at_k(&ctx, mode, &queries, size).unwrap(), 1.0);
        }
    }

    fn reference_in_gallery_is_retrieved_first(seed: u64) {
        let mut rng = Rng::new(seed);
        let g = 2 + rng.below(300);
        let d = 2 + rng.below(8);
        let (ids, _, index) = gallery_of(&mut rng, g, d);
        let queries: Vec<EvalQuery> = (0..1 + rng.below(10))
            .map(|q| {
                let r = ids[rng.below(g)].clone();
                EvalQuery { id: format!("q{q}"), reference_id: r.clone(), modification_text: "m".into(), target_id: r, subset_ids: None }
            })
            .collect();
        let mods = EmbeddingTable::from_raw(queries.iter().map(|q| (q.id.clone(), unit_f32(&mut rng, d))).collect::<Vec<_>>(), "").unwrap();
        let ctx = EvalContext { gallery: &index, references: index.table(), modifications: &mods, params: None, exclude_reference: false };
        let report = evaluate(&ctx, &queries, &[1], &[QueryMode::ImageOnly]).unwrap();
        prop_assert_eq!(report.mode(QueryMode::ImageOnly).unwrap().recall[0].1, 1.0);
    }
}

registry!(
    training_is_bit_reproducible,
    logged_loss_matches_independent_evaluation,
    zero_gradient_without_decay_is_a_no_op,
    search_equals_full_sort,
    recall_never_decreases_with_k,
    subset_rankings,
    reference_in_gallery_is_retrieved_first,
);
