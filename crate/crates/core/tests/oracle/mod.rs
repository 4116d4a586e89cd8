//! Reference implementations written as plain loops, independent of the
//! library's matrix code. Shared by the integration and acceptance tests.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::HashMap;

use scot_core::combiner::{CombinerDims, CombinerParams, Mode};
use scot_core::loss::total_loss;
use scot_core::tensor::{Matrix, Rng};
use scot_core::LossConfig;

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn gate(s: f64, margin: f64) -> f64 {
    if s > margin {
        s
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NaiveLosses {
    pub l_pos: f64,
    pub l_neg_prime: f64,
    pub l_neg_combined: f64,
    pub l_total: f64,
}

/// Direct transcription of the objective with explicit sums of exponentials.
pub fn naive_losses(vc: &[Vec<f64>], tu: &[Vec<f64>], t: &[Vec<f64>], cfg: &LossConfig) -> NaiveLosses {
    let n = vc.len();
    let mut pos = 0.0;
    for i in 0..n {
        pos += cos(&vc[i], &tu[i]).exp();
    }
    let l_pos = -pos.ln();

    let mut neg = 0.0;
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            neg += (gate(cos(&vc[i], &tu[j]), cfg.margin) * (1.0 - delta)).exp();
        }
    }
    let l_neg_prime = neg.ln();

    let mut cap = 0.0;
    for i in 0..n {
        for j in 0..n {
            cap += gate(cos(&vc[i], &t[j]), cfg.margin).exp();
        }
    }
    let l_neg_combined = l_neg_prime + cap.ln();
    NaiveLosses {
        l_pos,
        l_neg_prime,
        l_neg_combined,
        l_total: cfg.alpha_pos * l_pos + cfg.alpha_neg * l_neg_combined,
    }
}

/// Smallest distance of any gated similarity from the margin.
pub fn gate_clearance(vc: &[Vec<f64>], tu: &[Vec<f64>], t: &[Vec<f64>], margin: f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..vc.len() {
        for j in 0..vc.len() {
            if i != j {
                best = best.min((cos(&vc[i], &tu[j]) - margin).abs());
            }
            best = best.min((cos(&vc[i], &t[j]) - margin).abs());
        }
    }
    best
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Denominator floor for gradient relative errors. Central differences at
/// step 1e-5 carry roundoff near `eps·|L|/step`, about 1e-9 for losses of
/// order 50, so entries below the floor are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn grad_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

pub fn random_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.normal()).collect()
}

pub fn random_unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let v = random_vec(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix<f64> {
    Matrix::from_rows(rows).unwrap()
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn affine(w: &Matrix<f64>, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.rows()];
    for r in 0..w.rows() {
        let mut acc = b[r];
        for c in 0..w.cols() {
            acc += w.get(r, c) * x[c];
        }
        out[r] = acc;
    }
    out
}

/// Eval-mode combiner forward: composed unit vector, dynamic scalar, and
/// every ReLU pre-activation.
pub fn naive_forward(p: &CombinerParams<f64>, image: &[f64], modification: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
    let zt = affine(&p.w1, &p.b1, modification);
    let zv = affine(&p.w2, &p.b2, image);
    let mut c: Vec<f64> = zt.iter().map(|x| relu(*x)).collect();
    c.extend(zv.iter().map(|x| relu(*x)));
    let zg = affine(&p.w3, &p.b3, &c);
    let g: Vec<f64> = zg.iter().map(|x| relu(*x)).collect();
    let o = affine(&p.w4, &p.b4, &g);
    let s = 1.0 / (1.0 + (-affine(&p.w5, &p.b5, &c)[0]).exp());
    let raw: Vec<f64> = (0..o.len())
        .map(|k| o[k] + s * modification[k] + (1.0 - s) * image[k])
        .collect();
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut pre = zt;
    pre.extend(zv);
    pre.extend(zg);
    (raw.into_iter().map(|x| x / n).collect(), s, pre)
}

/// Random f64 parameters with biases also drawn (init leaves them zero).
pub fn random_params(rng: &mut Rng, dims: CombinerDims) -> CombinerParams<f64> {
    let mut p = CombinerParams::<f64>::zeros(dims).unwrap();
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x = 0.5 * rng.normal();
        }
    }
    p
}

/// Analytic vs central-difference gradients of `w · V_c` for the combiner.
/// Returns the worst relative error over every parameter and both inputs,
/// or `None` when some ReLU pre-activation sits within `clearance` of zero.
pub fn combiner_grad_check(rng: &mut Rng, dims: CombinerDims, step: f64, clearance: f64) -> Option<f64> {
    let params = random_params(rng, dims);
    let image = random_unit(rng, dims.d);
    let modification = random_unit(rng, dims.d);
    let w = random_vec(rng, dims.d);
    let (_, _, pre) = naive_forward(&params, &image, &modification);
    if pre.iter().any(|z| z.abs() < clearance) {
        return None;
    }
    let objective = |p: &CombinerParams<f64>, v: &[f64], t: &[f64]| -> f64 {
        let (vc, _) = p.compose(v, t).unwrap();
        vc.iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let mut scratch = Rng::new(0);
    let cache = params.forward(&image, &modification, Mode::Train(&mut scratch)).unwrap();
    let grads = params.backward(&cache, &w).unwrap();

    let mut worst: f64 = 0.0;
    let analytic: Vec<f64> = grads.params.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let mut k = 0;
    for ti in 0..10 {
        let len = params.tensors()[ti].len();
        for e in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[ti][e] += step;
            let mut minus = params.clone();
            minus.tensors_mut()[ti][e] -= step;
            let numeric = (objective(&plus, &image, &modification) - objective(&minus, &image, &modification)) / (2.0 * step);
            worst = worst.max(grad_err(analytic[k], numeric));
            k += 1;
        }
    }
    for (which, input) in [(0, &image), (1, &modification)] {
        let analytic = if which == 0 { &grads.d_image } else { &grads.d_modification };
        for e in 0..dims.d {
            let mut plus = input.clone();
            plus[e] += step;
            let mut minus = input.clone();
            minus[e] -= step;
            let numeric = if which == 0 {
                (objective(&params, &plus, &modification) - objective(&params, &minus, &modification)) / (2.0 * step)
            } else {
                (objective(&params, &image, &plus) - objective(&params, &image, &minus)) / (2.0 * step)
            };
            worst = worst.max(grad_err(analytic[e], numeric));
        }
    }
    Some(worst)
}

/// Analytic vs central-difference gradient of the total loss with respect to
/// the composed rows. `None` when a gated similarity is within `clearance`
/// of the margin.
pub fn loss_grad_check(rng: &mut Rng, n: usize, d: usize, cfg: &LossConfig, step: f64, clearance: f64) -> Option<f64> {
    // targets correlated with the composed rows so that gates open
    let vc: Vec<Vec<f64>> = (0..n).map(|_| random_unit(rng, d)).collect();
    let tu: Vec<Vec<f64>> = vc
        .iter()
        .map(|v| v.iter().map(|x| x + 0.3 * rng.normal() / (d as f64).sqrt()).collect())
        .collect();
    let t: Vec<Vec<f64>> = (0..n).map(|_| random_unit(rng, d)).collect();
    if gate_clearance(&vc, &tu, &t, cfg.margin) < clearance {
        return None;
    }
    let (tu_m, t_m) = (to_matrix(&tu), to_matrix(&t));
    let analytic = total_loss(&to_matrix(&vc), &tu_m, &t_m, cfg).unwrap().grad;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for k in 0..d {
            let mut plus = vc.clone();
            plus[i][k] += step;
            let mut minus = vc.clone();
            minus[i][k] -= step;
            let lp = total_loss(&to_matrix(&plus), &tu_m, &t_m, cfg).unwrap().l_total;
            let lm = total_loss(&to_matrix(&minus), &tu_m, &t_m, cfg).unwrap().l_total;
            let numeric = (lp - lm) / (2.0 * step);
            worst = worst.max(grad_err(analytic.get(i, k), numeric));
        }
    }
    Some(worst)
}

/// Full sort by cosine descending, id ascending.
pub fn brute_rank(ids: &[String], rows: &[Vec<f32>], q: &[f32]) -> Vec<(String, f64)> {
    let qn = q.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    let mut all: Vec<(String, f64)> = ids
        .iter()
        .zip(rows)
        .map(|(id, r)| {
            let mut acc = 0.0f64;
            let mut rr = 0.0f64;
            for k in 0..q.len() {
                acc += q[k] as f64 * r[k] as f64;
                rr += r[k] as f64 * r[k] as f64;
            }
            (id.clone(), acc / (qn * rr.sqrt()))
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all
}

/// Fraction of queries whose target is among the first `k` ids.
pub fn brute_recall(rankings: &HashMap<String, Vec<String>>, truth: &HashMap<String, String>, k: usize) -> f64 {
    let hits = rankings
        .iter()
        .filter(|(q, r)| r.iter().take(k).any(|id| id == &truth[*q]))
        .count();
    hits as f64 / rankings.len() as f64
}

/// One random batch: every loss term against [`naive_losses`]. Returns the
/// worst relative error.
pub fn loss_case(rng: &mut Rng) -> f64 {
    let n = [1, 2, 4, 8, 16][rng.below(5)];
    let d = [4, 16, 64][rng.below(3)];
    let rows = |rng: &mut Rng| (0..n).map(|_| random_vec(rng, d)).collect::<Vec<_>>();
    let (vc, tu, t) = (rows(rng), rows(rng), rows(rng));
    let cfg = LossConfig {
        margin: rng.uniform(-0.5, 0.5).unwrap(),
        ..LossConfig::default()
    };
    let want = naive_losses(&vc, &tu, &t, &cfg);
    let got = total_loss(&to_matrix(&vc), &to_matrix(&tu), &to_matrix(&t), &cfg).unwrap();
    [
        rel_err(got.l_pos, want.l_pos),
        rel_err(got.l_neg_prime, want.l_neg_prime),
        rel_err(got.l_neg_combined, want.l_neg_combined),
        rel_err(got.l_total, want.l_total),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn unit_f32(rng: &mut Rng, d: usize) -> Vec<f32> {
    random_unit(rng, d).into_iter().map(|x| x as f32).collect()
}

/// One random gallery with queries: `search`, `recall_at_k` and
/// `recall_subset_at_k` against full sorts. Some gallery rows are exact
/// duplicates so ties are exercised.
pub fn retrieval_case(rng: &mut Rng) -> std::result::Result<(), String> {
    use scot_core::retrieval::{recall_at_k, recall_subset_at_k, search, EvalContext, GalleryIndex, QueryMode};
    use scot_core::{EmbeddingTable, EvalQuery};

    let g = 6 + rng.below(995);
    let d = [4, 16, 32][rng.below(3)];
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(g);
    for i in 0..g {
        if i > 0 && rng.below(10) == 0 {
            let j = rng.below(i);
            rows.push(rows[j].clone());
        } else {
            rows.push(unit_f32(rng, d));
        }
    }
    // ids deliberately not in row order
    let mut ids: Vec<String> = (0..g).map(|i| format!("g{:04}", (i * 7919) % 10007)).collect();
    ids.dedup();
    let gallery = EmbeddingTable::new(ids.clone(), Matrix::from_rows(&rows).unwrap(), "t").map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f32>> = gallery.matrix().iter_rows().map(<[f32]>::to_vec).collect();
    let index = GalleryIndex::new(gallery);

    let nq = 1 + rng.below(20);
    let k = 1 + rng.below(g.min(50));
    let mut queries = Vec::new();
    let mut refs = Vec::new();
    let mut mods = Vec::new();
    let mut truth = HashMap::new();
    let mut brute_full = HashMap::new();
    let mut results = Vec::new();
    for qi in 0..nq {
        let qid = format!("q{qi}");
        let q = if rng.below(4) == 0 { rows[rng.below(g)].clone() } else { unit_f32(rng, d) };
        let brute = brute_rank(&ids, &rows, &q);
        let got = search(&index, &qid, &q, k).map_err(|e| e.to_string())?;
        let want: Vec<(String, f64)> = brute[..k].to_vec();
        let got_pairs: Vec<(String, f64)> = got.hits.iter().map(|h| (h.id.clone(), h.score)).collect();
        if got_pairs != want {
            return Err(format!("search mismatch for {qid} (g={g}, k={k})"));
        }
        results.push(got);
        let target = ids[rng.below(g)].clone();
        let mut subset = vec![target.clone()];
        while subset.len() < 6.min(g) {
            let c = ids[rng.below(g)].clone();
            if !subset.contains(&c) {
                subset.push(c);
            }
        }
        truth.insert(qid.clone(), target.clone());
        brute_full.insert(qid.clone(), brute.iter().map(|(id, _)| id.clone()).collect::<Vec<_>>());
        refs.push((format!("ref{qi}"), q));
        mods.push((qid.clone(), unit_f32(rng, d)));
        queries.push(EvalQuery {
            id: qid,
            reference_id: format!("ref{qi}"),
            modification_text: "m".into(),
            target_id: target,
            subset_ids: Some(subset),
        });
    }
    for kk in [1, k] {
        let got = recall_at_k(&results, &truth, kk).map_err(|e| e.to_string())?;
        let want = brute_recall(&brute_full, &truth, kk);
        if got != want {
            return Err(format!("recall@{kk}: {got} vs {want}"));
        }
    }

    let references = EmbeddingTable::new(
        refs.iter().map(|r| r.0.clone()).collect(),
        Matrix::from_rows(&refs.iter().map(|r| r.1.clone()).collect::<Vec<_>>()).unwrap(),
        "t",
    )
    .map_err(|e| e.to_string())?;
    let modifications = EmbeddingTable::new(
        mods.iter().map(|r| r.0.clone()).collect(),
        Matrix::from_rows(&mods.iter().map(|r| r.1.clone()).collect::<Vec<_>>()).unwrap(),
        "t",
    )
    .map_err(|e| e.to_string())?;
    let ctx = EvalContext {
        gallery: &index,
        references: &references,
        modifications: &modifications,
        params: None,
        exclude_reference: false,
    };
    let mut subset_rank = HashMap::new();
    for q in &queries {
        let subset = q.subset_ids.as_ref().unwrap();
        let qv = references.get(&q.reference_id).unwrap();
        let order: Vec<String> = brute_rank(&ids, &rows, qv)
            .into_iter()
            .map(|(id, _)| id)
            .filter(|id| subset.contains(id))
            .collect();
        subset_rank.insert(q.id.clone(), order);
    }
    for kk in 1..=3 {
        let got = recall_subset_at_k(&ctx, QueryMode::ImageOnly, &queries, kk).map_err(|e| e.to_string())?;
        let want = brute_recall(&subset_rank, &truth, kk);
        if got != want {
            return Err(format!("recall_subset@{kk}: {got} vs {want}"));
        }
    }
    Ok(())
}

/// Random table through encode and decode; true when bit-exact.
pub fn semb_round_trip_case(rng: &mut Rng) -> bool {
    use scot_core::store::{decode_table, encode_table};
    use scot_core::EmbeddingTable;
    let n = 1 + rng.below(200);
    let d = 1 + rng.below(96);
    let rows: Vec<(String, Vec<f32>)> = (0..n)
        .map(|i| {
            let len = rng.below(12);
            let id: String = (0..len).map(|_| char::from(b'a' + rng.below(26) as u8)).collect();
            (format!("{id}-{i}-é"), unit_f32(rng, d))
        })
        .collect();
    let tag = if rng.below(2) == 0 { String::new() } else { "encoder/x".into() };
    let table = EmbeddingTable::from_raw(rows, tag).unwrap();
    let bytes = encode_table(&table).unwrap();
    let back = decode_table(&bytes).unwrap();
    let same_bits = table
        .matrix()
        .as_slice()
        .iter()
        .zip(back.matrix().as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    same_bits && back.ids() == table.ids() && back.source_tag() == table.source_tag() && encode_table(&back).unwrap() == bytes
}

/// Random parameters through checkpoint encode and decode; true when bit-exact.
pub fn checkpoint_round_trip_case(rng: &mut Rng) -> bool {
    use scot_core::combiner::{decode_checkpoint, encode_checkpoint};
    let dims = CombinerDims {
        d: 1 + rng.below(32),
        p: 1 + rng.below(32),
        h: 1 + rng.below(64),
        dropout_rate: rng.next_f64() as f32 * 0.9,
    };
    let mut params = CombinerParams::<f32>::init(dims, rng.next_u32() as u64).unwrap();
    for b in [&mut params.b1, &mut params.b3, &mut params.b5] {
        for x in b.iter_mut() {
            *x = rng.normal() as f32;
        }
    }
    let bytes = encode_checkpoint(&params);
    let back = decode_checkpoint(&bytes).unwrap();
    let same_bits = params
        .tensors()
        .iter()
        .zip(back.tensors())
        .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    same_bits && back.dims() == dims && encode_checkpoint(&back) == bytes
}
