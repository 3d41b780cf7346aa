//! Checks shared by the integration tests and the acceptance target. Each
//! returns a summary on success and a description of the first failure
//! otherwise.

use std::collections::BTreeSet;

use ndarray::Array1;
use radalign::alignment::{
    anchor_loss, classify, cross_attend, similarities, total_loss, AlignModel, AttendedTokens, ClassifierHead,
    ConceptTokens, ModelConfig, SimilarityVector, TaskMode,
};
use radalign::datagen::{generate, SynthSpec};
use radalign::encoders::{TextEmbedding, VisionFeatures};
use radalign::knowledge::CriterionSet;
use radalign::metrics::auc;
use radalign::retrieval::{query_topk, ReportIndex};
use radalign::alignment::Fingerprint;
use rand::Rng;

use super::*;

pub type Outcome = Result<String, String>;

fn tokens(inst: &Instance) -> ConceptTokens {
    ConceptTokens {
        z: inst.z.clone(),
        w_q: inst.w_q.clone(),
        w_k: inst.w_k.clone(),
        w_v: inst.w_v.clone(),
        heads: inst.heads,
    }
}

fn feats(inst: &Instance) -> VisionFeatures {
    VisionFeatures { image_id: "oracle".into(), grid: inst.feats.clone(), grid_shape: (1, inst.m) }
}

fn embeddings(inst: &Instance) -> Vec<TextEmbedding> {
    inst.anchors.iter().enumerate().map(|(i, a)| TextEmbedding { criterion_id: i, matrix: a.clone() }).collect()
}

fn attended(inst: &Instance) -> AttendedTokens {
    cross_attend(&tokens(inst), &feats(inst)).expect("valid instance")
}

pub fn cross_attend_matches_oracle(n: u64, tol: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let inst = instance(seed);
        let got = attended(&inst);
        let (z_hat, attn) = super::cross_attend(
            &to_mat(&inst.z),
            &to_mat(&inst.w_q),
            &to_mat(&inst.w_k),
            &to_mat(&inst.w_v),
            inst.heads,
            &to_mat(&inst.feats),
        );
        let diff = max_abs_diff(&to_mat(&got.z_hat), &z_hat).max(max_abs_diff(&to_mat(&got.attn_weights), &attn));
        if diff > tol {
            return Err(format!("seed {seed}: max diff {diff:e}"));
        }
        worst = worst.max(diff);
    }
    Ok(format!("{n} instances, max diff {worst:.2e}"))
}

pub fn similarities_match_oracle(n: u64, tol: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let inst = instance(seed);
        let att = attended(&inst);
        let got = similarities(&att, &embeddings(&inst)).map_err(|e| e.to_string())?;
        let want = super::similarities(&to_mat(&att.z_hat), &inst.anchors.iter().map(to_mat).collect::<Vec<_>>());
        let got: Mat = got.blocks.iter().map(|b| b.to_vec()).collect();
        let diff = max_abs_diff(&got, &want);
        if diff > tol {
            return Err(format!("seed {seed}: max diff {diff:e}"));
        }
        worst = worst.max(diff);
    }
    Ok(format!("{n} instances, max diff {worst:.2e}"))
}

fn sim_vector(inst: &Instance) -> SimilarityVector {
    similarities(&attended(inst), &embeddings(inst)).expect("valid instance")
}

pub fn classify_matches_oracle(n: u64, tol: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let inst = instance(seed);
        let s = sim_vector(&inst);
        let head = ClassifierHead { w: inst.head_w.clone(), b: inst.head_b.clone() };
        for (mode, multi) in [(TaskMode::MultiLabel, true), (TaskMode::SingleLabel, false)] {
            let got = classify(&s, &head, mode).map_err(|e| e.to_string())?;
            let flat = s.concat().to_vec();
            let (logits, scores) =
                super::classify(&to_mat(&inst.head_w), inst.head_b.as_ref().map(|b| b.as_slice().unwrap()), &flat, multi);
            let diff = max_abs_diff(&vec![got.logits.to_vec(), got.scores.to_vec()], &vec![logits, scores]);
            if diff > tol {
                return Err(format!("seed {seed} {mode:?}: max diff {diff:e}"));
            }
            worst = worst.max(diff);
        }
    }
    Ok(format!("{n} instances x 2 modes, max diff {worst:.2e}"))
}

pub fn total_loss_matches_oracle(n: u64, tol: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let inst = instance(seed);
        let att = attended(&inst);
        let s = sim_vector(&inst);
        let mut r = rng(seed ^ 0xabc);
        let tau = r.random_range(0.05..1.0);
        let mut lib_anchor = Vec::new();
        let mut oracle_anchor = Vec::new();
        for (i, block) in inst.anchors.iter().enumerate() {
            let n_desc = block.nrows();
            let positives: Vec<usize> = (0..n_desc).filter(|_| r.random_bool(0.5)).collect();
            let positives = if positives.is_empty() { vec![r.random_range(0..n_desc)] } else { positives };
            lib_anchor.push(anchor_loss(att.z_hat.row(i), block.view(), &positives, tau).map_err(|e| e.to_string())?);
            oracle_anchor.push(super::anchor_loss(&s.blocks[i].to_vec(), &positives, tau));
        }
        let head = ClassifierHead { w: inst.head_w.clone(), b: inst.head_b.clone() };
        for (mode, multi) in [(TaskMode::MultiLabel, true), (TaskMode::SingleLabel, false)] {
            let logits = classify(&s, &head, mode).map_err(|e| e.to_string())?.logits;
            let got = total_loss(&logits, &inst.labels, &lib_anchor, mode).map_err(|e| e.to_string())?.total;
            let want = super::total_loss(&logits.to_vec(), &inst.labels, &oracle_anchor, multi);
            let diff = (got - want).abs();
            if diff > tol {
                return Err(format!("seed {seed} {mode:?}: {got} vs {want}"));
            }
            worst = worst.max(diff);
        }
    }
    Ok(format!("{n} instances x 2 modes, max diff {worst:.2e}"))
}

/// Random index of `size` entries with `(k, d)` tokens.
pub fn random_entries(seed: u64, size: usize, k: usize, d: usize) -> Vec<Mat> {
    let mut r = rng(seed);
    (0..size).map(|_| to_mat(&rand_mat(&mut r, k, d, 1.0))).collect()
}

pub fn index_of(entries: &[Mat], k: usize, d: usize) -> ReportIndex {
    let mut idx = ReportIndex::new(k, d, Fingerprint([0; 32]));
    for (i, e) in entries.iter().enumerate() {
        idx.push(from_mat(e), format!("report {i}"), None).unwrap();
    }
    idx
}

pub fn query_topk_matches_oracle(n: u64, tol: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let mut r = rng(seed ^ 0x1d3);
        let (k, d) = (r.random_range(1..=5), r.random_range(1..=8));
        let size = if seed % 10 == 0 { 1000 } else { r.random_range(1..=200) };
        let top = r.random_range(1..=12);
        let entries = random_entries(seed, size, k, d);
        let idx = index_of(&entries, k, d);
        let query = to_mat(&rand_mat(&mut r, k, d, 1.0));
        let got = query_topk(&idx, from_mat(&query).view(), top).map_err(|e| e.to_string())?;
        let want = topk(&entries, &query, top);
        if got.len() != want.len() {
            return Err(format!("seed {seed}: {} results vs {}", got.len(), want.len()));
        }
        for (g, (id, score)) in got.iter().zip(&want) {
            if g.entry_id != *id {
                return Err(format!("seed {seed}: ranking differs ({} vs {id})", g.entry_id));
            }
            let diff = (g.score - score).abs();
            if diff > tol {
                return Err(format!("seed {seed}: score diff {diff:e}"));
            }
            worst = worst.max(diff);
        }
    }
    Ok(format!("{n} queries (index sizes up to 1000), max score diff {worst:.2e}"))
}

/// Central finite differences on `coords` random coordinates of every
/// trainable tensor.
pub fn gradient_suite(config: ModelConfig, coords: usize, step: f64, rel: f64, floor: f64) -> Outcome {
    let cs = CriterionSet::chest_xray_fixture();
    let data = generate(&SynthSpec { n_examples: 8, seed: 3, ..SynthSpec::default() }, &cs).unwrap();
    let ex = data.iter().find(|e| !e.labels.is_empty()).expect("a labelled example");
    let mut model = AlignModel::new(config, cs).map_err(|e| e.to_string())?;
    let (_, grads) = model.example_loss_and_grad(ex.image.view(), &ex.labels).map_err(|e| e.to_string())?;
    let analytic: Vec<(&'static str, Vec<f64>)> =
        grads.tensors().into_iter().map(|t| (t.name, t.data.to_vec())).collect();
    let mut r = rng(99);
    let mut report = Vec::new();
    for (g, (name, a)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for _ in 0..coords {
            let i = r.random_range(0..a.len());
            let eval = |model: &mut AlignModel, delta: f64| {
                let orig = model.params.tensors_mut()[g].1[i];
                model.params.tensors_mut()[g].1[i] = orig + delta;
                let l = model.example_loss(ex.image.view(), &ex.labels).unwrap().total;
                model.params.tensors_mut()[g].1[i] = orig;
                l
            };
            let numeric = (eval(&mut model, step) - eval(&mut model, -step)) / (2.0 * step);
            if !grad_close(a[i], numeric, rel, floor) {
                return Err(format!("{name}[{i}]: analytic {} vs numeric {numeric}", a[i]));
            }
            let scale = a[i].abs().max(numeric.abs());
            if scale > 0.0 {
                worst = worst.max((a[i] - numeric).abs() / scale);
            }
        }
        report.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!("{} groups x {coords} coords, worst rel err: {}", analytic.len(), report.join(", ")))
}

pub fn anchor_loss_analytics() -> Outcome {
    let mut r = rng(5);
    // One description: the softmax over a single logit is 1.
    for _ in 0..10 {
        let z = rand_vec(&mut r, 6, 2.0);
        let e = rand_mat(&mut r, 1, 6, 2.0);
        let l = anchor_loss(z.view(), e.view(), &[0], 0.07).map_err(|e| e.to_string())?;
        if l != 0.0 {
            return Err(format!("single description gave {l}, expected exactly 0"));
        }
    }
    // Identical anchors give uniform similarities.
    for n in 2..=6 {
        let z = rand_vec(&mut r, 5, 1.0);
        let row = rand_vec(&mut r, 5, 1.0);
        let e = ndarray::Array2::from_shape_fn((n, 5), |(_, c)| row[c]);
        let l = anchor_loss(z.view(), e.view(), &[n - 1], 0.07).map_err(|e| e.to_string())?;
        let want = (n as f64).ln();
        if (l - want).abs() > 1e-12 {
            return Err(format!("uniform n={n}: {l} vs ln n = {want}"));
        }
    }
    // Two candidates with similarities 1 and 0 at tau 1: -log(e/(e+1)).
    let z = Array1::from(vec![1.0, 0.0]);
    let e = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
    let l = anchor_loss(z.view(), e.view(), &[0], 1.0).map_err(|e| e.to_string())?;
    let want = (1.0 + (-1f64).exp()).ln();
    if (l - want).abs() > 1e-9 || (l - 0.31326).abs() > 1e-5 {
        return Err(format!("two-candidate case {l} vs softplus(-1) {want}"));
    }
    Ok(format!("n=1 -> 0 exactly; uniform -> ln n; two-candidate {l:.9}"))
}

pub fn auc_matches_pair_counting(n: u64) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let mut r = rng(seed ^ 0xa0c);
        let len = r.random_range(2..=60);
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..len).map(|_| r.random_range(0..10) as f64 / 10.0).collect();
        let mut labels: Vec<bool> = (0..len).map(|_| r.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = auc_pairs(&scores, &labels);
        let diff = (got - want).abs();
        if diff > 1e-12 {
            return Err(format!("seed {seed}: {got} vs {want}"));
        }
        worst = worst.max(diff);
    }
    let hand = auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).map_err(|e| e.to_string())?;
    if hand != 0.75 {
        return Err(format!("hand case gave {hand}"));
    }
    Ok(format!("{n} instances, max diff {worst:.1e}; hand case = 0.75 exactly"))
}

pub fn labels(v: &[usize]) -> BTreeSet<usize> {
    v.iter().copied().collect()
}

/// Criteria JSON, dataset directory, checkpoint and index all round-trip
/// value-equal with bit-exact floats, and queries agree before and after.
pub fn persistence_round_trips(dir: &std::path::Path) -> Outcome {
    use radalign::alignment::{train, TrainConfig};
    use radalign::datagen::{load_dataset, save_dataset};
    use radalign::knowledge::{load_criteria, save_criteria};
    use radalign::retrieval::{build_index, load_index, save_index};

    let bits_eq = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    let e = |x: &dyn std::fmt::Display| x.to_string();

    let cs = CriterionSet::chest_xray_fixture();
    let cpath = dir.join("criteria.json");
    save_criteria(&cs, &cpath).map_err(|x| e(&x))?;
    if load_criteria(&cpath).map_err(|x| e(&x))? != cs {
        return Err("criteria differ after reload".into());
    }

    let data = generate(&SynthSpec { n_examples: 40, seed: 11, ..SynthSpec::default() }, &cs).map_err(|x| e(&x))?;
    let dpath = dir.join("dataset");
    save_dataset(&dpath, &data).map_err(|x| e(&x))?;
    let back = load_dataset(&dpath).map_err(|x| e(&x))?;
    if back != data
        || !back.iter().zip(&data).all(|(a, b)| bits_eq(a.image.as_slice().unwrap(), b.image.as_slice().unwrap()))
    {
        return Err("dataset differs after reload".into());
    }

    let model = AlignModel::new(ModelConfig::default(), cs).map_err(|x| e(&x))?;
    let model = train(model, &data, &TrainConfig { epochs: 2, ..TrainConfig::default() }).map_err(|x| e(&x))?.model;
    let mpath = dir.join("model.raln");
    let fp = model.save_checkpoint(&mpath).map_err(|x| e(&x))?;
    let loaded = AlignModel::load_checkpoint(&mpath).map_err(|x| e(&x))?;
    if loaded != model || loaded.fingerprint() != fp {
        return Err("checkpoint differs after reload".into());
    }
    for (a, b) in model.params.tensors().iter().zip(loaded.params.tensors()) {
        if !bits_eq(a.data, b.data) {
            return Err(format!("tensor {} not bit-exact", a.name));
        }
    }

    let index = build_index(&model, &data).map_err(|x| e(&x))?;
    let ipath = dir.join("index.ridx");
    save_index(&index, &ipath).map_err(|x| e(&x))?;
    let index2 = load_index(&ipath).map_err(|x| e(&x))?;
    if index2 != index {
        return Err("index differs after reload".into());
    }
    for ex in &data {
        let q1 = model.infer(ex.image.view()).map_err(|x| e(&x))?.attended.z_hat;
        let q2 = loaded.infer(ex.image.view()).map_err(|x| e(&x))?.attended.z_hat;
        let a = query_topk(&index, q1.view(), 7).map_err(|x| e(&x))?;
        let b = query_topk(&index2, q2.view(), 7).map_err(|x| e(&x))?;
        if a != b {
            return Err(format!("query results differ for {}", ex.id));
        }
    }
    Ok(format!("criteria, {} examples, checkpoint {}, {}-entry index", data.len(), &fp.to_hex()[..12], index.len()))
}

/// The fixed seed-0 regression experiment: 300 planted-concept examples
/// split 200 train / 100 test, default model, 40 epochs.
pub struct SyntheticRun {
    pub spec: SynthSpec,
    pub model: AlignModel,
    pub train: Vec<radalign::datagen::Example>,
    pub test: Vec<radalign::datagen::Example>,
    pub trace: radalign::alignment::LossTrace,
    pub seconds: f64,
}

pub fn synthetic_run() -> Result<SyntheticRun, String> {
    use radalign::alignment::{train, TrainConfig};
    let start = std::time::Instant::now();
    let cs = CriterionSet::chest_xray_fixture();
    let spec = SynthSpec { n_examples: 300, seed: 0, ..SynthSpec::default() };
    let mut data = generate(&spec, &cs).map_err(|e| e.to_string())?;
    let test = data.split_off(200);
    let model = AlignModel::new(ModelConfig::default(), cs).map_err(|e| e.to_string())?;
    let run = train(model, &data, &TrainConfig::default()).map_err(|e| e.to_string())?;
    Ok(SyntheticRun {
        spec,
        model: run.model,
        train: data,
        test,
        trace: run.trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn end_to_end_metrics(run: &SyntheticRun) -> Outcome {
    let ev = radalign::metrics::evaluate(&run.model, &run.test).map_err(|e| e.to_string())?;
    let n_labels = run.model.criteria().num_labels();
    let n_criteria = run.model.criteria().num_criteria();
    let initial = run.trace.initial().ok_or("empty trace")?.total;
    let last = run.trace.last().ok_or("empty trace")?.total;
    let auc = ev.macro_auc.ok_or("macro AUC undefined")?;
    let summary = format!(
        "{} train / {} test, {n_labels} classes, {n_criteria} criteria, {} epochs in {:.1}s: \
         macro AUC {auc:.4}, macro F1 {:.4}, loss {initial:.4} -> {last:.4}",
        run.train.len(),
        run.test.len(),
        run.trace.0.len() - 1,
        run.seconds,
        ev.macro_f1,
    );
    let ok = run.train.len() == 200
        && run.test.len() == 100
        && n_labels == 5
        && n_criteria == 14
        && run.seconds <= 300.0
        && auc >= 0.95
        && ev.macro_f1 >= 0.85
        && last < 0.5 * initial;
    if ok { Ok(summary) } else { Err(summary) }
}

pub fn retrieval_quality(run: &SyntheticRun) -> Outcome {
    let index = radalign::retrieval::build_index(&run.model, &run.train).map_err(|e| e.to_string())?;
    let entries: Vec<Mat> = index.entries().iter().map(|e| to_mat(&e.tokens)).collect();
    let mut good = 0;
    for ex in &run.test {
        let q = run.model.infer(ex.image.view()).map_err(|e| e.to_string())?.attended.z_hat;
        let hits = query_topk(&index, q.view(), 7).map_err(|e| e.to_string())?;
        let want = topk(&entries, &to_mat(&q), 7);
        let same = hits.len() == want.len()
            && hits.iter().zip(&want).all(|(h, (id, s))| h.entry_id == *id && h.score.to_bits() == s.to_bits());
        if !same {
            return Err(format!("{}: top-7 differs from exhaustive sort", ex.id));
        }
        let sharing = hits
            .iter()
            .filter(|h| {
                let labels = index.entries()[h.entry_id].labels.as_ref();
                labels.is_some_and(|l| !l.is_disjoint(&ex.labels))
            })
            .count();
        if sharing >= 4 {
            good += 1;
        }
    }
    let frac = good as f64 / run.test.len() as f64;
    let summary = format!("{good}/{} queries with >= 4 of top-7 sharing a label; top-7 equals exhaustive sort", run.test.len());
    if frac >= 0.8 { Ok(summary) } else { Err(summary) }
}

/// Exported rows sum to one, and the Heart Size token concentrates on the
/// cardiomegaly signature of noise-free planted images.
pub fn attention_contract(run: &SyntheticRun, dir: &std::path::Path) -> Outcome {
    use radalign::interpret::{attention_maps, export_attention, mass_in_box};
    let model = &run.model;
    let cs = model.criteria();
    let enc = model.config().encoder;
    let grid = (run.spec.height / enc.patch_size, run.spec.width / enc.patch_size);

    let mut worst_row: f64 = 0.0;
    for ex in run.test.iter().take(10) {
        let maps = attention_maps(model, ex.image.view()).map_err(|e| e.to_string())?;
        let side = export_attention(&maps, grid, &ex.id, &dir.join(&ex.id)).map_err(|e| e.to_string())?;
        for t in &side.tokens {
            worst_row = worst_row.max((t.weights.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if worst_row > 1e-6 {
        return Err(format!("attention row sum off by {worst_row:e}"));
    }

    let cm = cs.label_by_code("CM").ok_or("no CM label")?.id;
    let hs = cs.criterion_by_name("Heart Size").ok_or("no Heart Size criterion")?.id;
    let sigs = run.spec.signatures(cs.num_labels()).map_err(|e| e.to_string())?;
    let cm_sig = sigs.iter().find(|s| s.label == cm).ok_or("no CM signature")?;
    let (h, w) = (run.spec.height, run.spec.width);
    // CM alone, then CM alongside each other finding.
    let mut images = vec![cm_sig.render(h, w)];
    for s in sigs.iter().filter(|s| s.label != cm) {
        images.push(cm_sig.render(h, w) + s.render(h, w));
    }
    let mut mass = 0.0;
    for img in &images {
        let inf = model.infer(img.view()).map_err(|e| e.to_string())?;
        let row = inf.attended.attn_weights.row(hs).to_vec();
        mass += mass_in_box(&row, inf.grid_shape, enc.patch_size, cm_sig.top, cm_sig.left, cm_sig.size());
    }
    let mass = mass / images.len() as f64;
    let patches_in_box = (cm_sig.size() / enc.patch_size).pow(2);
    let baseline = patches_in_box as f64 / (grid.0 * grid.1) as f64;
    let summary = format!(
        "row sums within {worst_row:.1e}; Heart Size mass in CM box {mass:.4} vs baseline {baseline:.4} ({:.1}x over {} images)",
        mass / baseline,
        images.len()
    );
    if mass >= 2.0 * baseline { Ok(summary) } else { Err(summary) }
}
