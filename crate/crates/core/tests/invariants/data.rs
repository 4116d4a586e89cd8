//! Property tests for tables, triplet generation and the synthetic world.

use crate::oracle;

use std::collections::BTreeSet;
use std::time::Duration;

use proptest::prelude::*;
use scot_core::forge::{
    default_grammar, gen_template_edit, llm_generate, validate_triplet, LlmEndpointConfig, LlmRequest, RuleAction,
    Transport,
};
use scot_core::store::{assemble_training_set, read_table, write_table};
use scot_core::synth::{gen_dataset, gen_world, DatasetSpec};
use scot_core::tensor::{Matrix, Rng};
use scot_core::EmbeddingTable;

fn unit_f32(rng: &mut Rng, d: usize) -> Vec<f32> {
    oracle::random_unit(rng, d).into_iter().map(|x| x as f32).collect()
}

fn table_for(ids: &BTreeSet<u8>, d: usize, rng: &mut Rng) -> EmbeddingTable {
    let ids: Vec<String> = ids.iter().map(|i| format!("id{i}")).collect();
    let rows: Vec<Vec<f32>> = ids.iter().map(|_| unit_f32(rng, d)).collect();
    EmbeddingTable::new(ids, Matrix::from_rows(&rows).unwrap(), "p").unwrap()
}

const WORDS: &[&str] = &[
    "a", "the", "red", "blue", "navy", "dress", "shirt", "dog", "striped", "leather", "with", "long", "sleeves",
    "photo", "of", "vintage", "car", "small",
];

fn caption() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..8).prop_map(|w| w.join(" "))
}

struct Canned(String);

impl Transport for Canned {
    fn send(&self, _: &str, _: &LlmRequest, _: Duration) -> Result<String, String> {
        Ok(self.0.clone())
    }
}

fn text_field() -> impl Strategy<Value = String> {
    prop_oneof![
        Just(String::new()),
        "[a-z ]{1,30}",
        Just("a red dress".to_string()),
        Just("x".repeat(600)),
    ]
}

fn response_body() -> impl Strategy<Value = String> {
    prop_oneof![
        (text_field(), text_field()).prop_map(|(m, u)| serde_json::json!({"modification": m, "modified_caption": u}).to_string()),
        (text_field(), text_field()).prop_map(|(m, u)| {
            let inner = serde_json::json!({"modification": m, "modified_caption": u}).to_string();
            serde_json::json!({"choices": [{"text": inner}]}).to_string()
        }),
        "\\PC{0,40}",
        Just("{\"modification\": 3}".to_string()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(1000) })]

    fn tables_survive_write_then_read(seed: u64) {
        let mut rng = Rng::new(seed);
        let n = 1 + rng.below(40);
        let d = 1 + rng.below(40);
        let rows: Vec<(String, Vec<f32>)> = (0..n).map(|i| (format!("r{i}"), unit_f32(&mut rng, d))).collect();
        let table = EmbeddingTable::from_raw(rows, "tag").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.semb");
        write_table(&table, &path).unwrap();
        let back = read_table(&path).unwrap();
        prop_assert_eq!(&back, &table);
        let bits = |t: &EmbeddingTable| t.matrix().as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&table));
    }

    fn join_keeps_exactly_the_intersection(
        sets in prop::array::uniform4(prop::collection::btree_set(0u8..30, 1..30)),
        seed: u64,
    ) {
        let mut rng = Rng::new(seed);
        let d = 1 + rng.below(8);
        let tables: Vec<EmbeddingTable> = sets.iter().map(|s| table_for(s, d, &mut rng)).collect();
        let common: BTreeSet<u8> = sets.iter().skip(1).fold(sets[0].clone(), |acc, s| acc.intersection(s).copied().collect());
        match assemble_training_set(&tables[0], &tables[1], &tables[2], &tables[3]) {
            Ok((examples, _)) => {
                prop_assert_eq!(examples.len(), common.len());
                for ex in &examples {
                    for v in [&ex.image, &ex.modification, &ex.target_text, &ex.caption] {
                        let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                        prop_assert!((n - 1.0).abs() <= 1e-6);
                    }
                }
            }
            Err(e) => {
                prop_assert!(common.is_empty());
                prop_assert_eq!(e.kind(), "EmptyJoin");
            }
        }
    }

    fn grammar_generation_is_pure(c in caption(), seed: u64) {
        let rules = default_grammar();
        let a = gen_template_edit("x", &c, &rules, &mut Rng::new(seed));
        let b = gen_template_edit("x", &c, &rules, &mut Rng::new(seed));
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(a), Err(b)) => prop_assert_eq!(a.kind(), b.kind()),
            _ => prop_assert!(false, "outcomes differ"),
        }
    }

    fn slot_substitution_reproduces_modified_caption(c in caption(), seed: u64) {
        let rules = default_grammar();
        if let Ok((t, edit)) = gen_template_edit("x", &c, &rules, &mut Rng::new(seed)) {
            let rule = &rules[edit.rule];
            let mut tokens: Vec<&str> = t.caption.split(' ').collect();
            prop_assert_eq!(tokens[edit.position], edit.old.as_str());
            match rule.action {
                RuleAction::Replace => tokens[edit.position] = &edit.new,
                RuleAction::InsertBefore => tokens.insert(edit.position, &edit.new),
                RuleAction::Delete => { tokens.remove(edit.position); }
            }
            prop_assert_eq!(tokens.join(" "), t.modified_caption.clone());
            prop_assert_eq!(t.modification.clone(), rule.template.replace("{old}", &edit.old).replace("{new}", &edit.new));
            prop_assert!(validate_triplet(&t).is_ok());
        }
    }

    fn endpoint_output_always_validates(body in response_body(), c in caption()) {
        let cfg = LlmEndpointConfig { initial_backoff: Duration::ZERO, ..LlmEndpointConfig::default() };
        if let Ok(t) = llm_generate("x", &c, &cfg, &Canned(body)) {
            prop_assert!(validate_triplet(&t).is_ok());
        }
    }

    fn noise_free_targets_coincide_with_gallery(seed: u64) {
        let mut rng = Rng::new(seed);
        let c = 2 + rng.below(7);
        let d = c + rng.below(10);
        let world = gen_world(c, d, 0.0, 0.0, seed).unwrap();
        let spec = DatasetSpec { n_train: 12, n_eval: 3, gallery_size: 2 * c, corruption: 0.0, subset_size: 0 };
        let ds = gen_dataset(&world, &spec, seed ^ 7).unwrap();
        for (ex, &(_, b)) in ds.train.iter().zip(&ds.train_edits) {
            for (j, _) in ds.gallery_concepts.iter().enumerate().filter(|(_, g)| **g == b) {
                let row = ds.gallery.matrix().row(j);
                prop_assert!(row.iter().zip(&ex.target_text).all(|(x, y)| x.to_bits() == y.to_bits()));
                let s: f64 = row.iter().map(|x| *x as f64 * *x as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    fn same_concept_similarity_exceeds_cross_concept(seed: u64, sigma in 0.0f64..=0.1) {
        let mut rng = Rng::new(seed);
        let c = 2 + rng.below(15);
        let d = c + rng.below(32);
        let world = gen_world(c, d, sigma, sigma, seed).unwrap();
        let (mut same, mut cross) = (0.0, 0.0);
        let samples = 1000;
        for _ in 0..samples {
            let a = rng.below(c);
            let b = (a + 1 + rng.below(c - 1)) % c;
            let img = world.image(a, &mut rng);
            let dotf = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(p, q)| *p as f64 * *q as f64).sum::<f64>();
            same += dotf(&img, &world.text(a, &mut rng));
            cross += dotf(&img, &world.text(b, &mut rng));
        }
        prop_assert!((same - cross) / samples as f64 > 0.5);
    }
}

registry!(
    tables_survive_write_then_read,
    join_keeps_exactly_the_intersection,
    grammar_generation_is_pure,
    slot_substitution_reproduces_modified_caption,
    endpoint_output_always_validates,
    noise_free_targets_coincide_with_gallery,
    same_concept_similarity_exceeds_cross_concept,
);
