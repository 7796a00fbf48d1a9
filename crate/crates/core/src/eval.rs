//! Accuracy reports, answer-reduction evaluation and embedding export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{dataset_digest, read_manifest, read_split_packed, Split};
use crate::net::Network;
use crate::render::admissible_canvases;
use crate::train::data::{reduction_seed, SplitView};
use crate::train::loss::{bce_with_logits, cross_entropy};
use crate::train::{Checkpoint, TrainError};

const BATCH: usize = 64;

/// 1/n_a, the accuracy of uniform guessing.
pub fn chance_baseline(n_a: usize) -> f64 {
    assert!(n_a >= 2, "n_a must be at least 2");
    1.0 / n_a as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n_a: usize,
    pub count: usize,
    /// Answer cross-entropy plus the weighted rule loss.
    pub loss: f64,
    pub answer_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub predicted: usize,
    pub label: usize,
}

/// Eval-mode pass over a view. Only the first `view.n_a()` answer logits are
/// considered, so a head trained with more answers can score reduced sets.
pub fn predict_view(net: &Network<f32>, view: &SplitView, batch: usize) -> (Vec<Prediction>, Vec<(f64, f64)>) {
    let n_a = view.n_a();
    assert!(n_a <= net.config.n_a, "view has more answers than the head");
    let mut preds = Vec::with_capacity(view.len());
    let mut losses = Vec::with_capacity(view.len());
    let idx: Vec<usize> = (0..view.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let b = view.batch(chunk);
        let out = net.forward_eval(&b.input, b.len()).expect("view canvas matches the model");
        for (k, &label) in b.labels.iter().enumerate() {
            let logits = &out.answer_row(k)[..n_a];
            let mut best = 0;
            for (j, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = j;
                }
            }
            preds.push(Prediction { predicted: best, label });
            let ce = cross_entropy(logits, label) as f64;
            let bce = if out.rule_dim == b.rules[k].len() { bce_with_logits(out.rule_row(k), &b.rules[k]) as f64 } else { 0.0 };
            losses.push((ce, bce));
        }
    }
    (preds, losses)
}

pub fn evaluate_view(net: &Network<f32>, view: &SplitView, beta: f64, batch: usize) -> SplitMetrics {
    let (preds, losses) = predict_view(net, view, batch);
    let n = preds.len().max(1) as f64;
    let correct = preds.iter().filter(|p| p.predicted == p.label).count();
    SplitMetrics {
        n_a: view.n_a(),
        count: preds.len(),
        loss: losses.iter().map(|(c, b)| c + beta * b).sum::<f64>() / n,
        answer_loss: losses.iter().map(|(c, _)| c).sum::<f64>() / n,
        accuracy: correct as f64 / n,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub dataset_sha256: String,
    pub split: Split,
    pub n_a: usize,
    pub count: usize,
    pub accuracy: f64,
    pub chance: f64,
    /// Each instance counted once under every active rule.
    pub per_rule: BTreeMap<String, Slice>,
    /// Each instance counted once under its full set of active rules; these
    /// slices partition the split.
    pub per_rule_set: BTreeMap<String, Slice>,
}

fn add(map: &mut BTreeMap<String, Slice>, key: String, ok: bool) {
    let s = map.entry(key).or_default();
    s.count += 1;
    s.correct += ok as usize;
}

fn finalize(map: &mut BTreeMap<String, Slice>) {
    for s in map.values_mut() {
        s.accuracy = s.correct as f64 / s.count as f64;
    }
}

fn active_names(vocab: &[String], bits: &[u8]) -> Vec<String> {
    bits.iter().zip(vocab).filter(|(&b, _)| b == 1).map(|(_, n)| n.clone()).collect()
}

/// Builds the view a checkpoint is scored on: the model's canvas, with
/// answers reduced to `n_a` using `seed`.
pub fn checkpoint_view(ckpt: &Checkpoint, dataset: &Path, split: Split, n_a: usize, seed: u64) -> Result<SplitView, TrainError> {
    let manifest = read_manifest(dataset)?;
    let cfg = &ckpt.network.config;
    if n_a < 2 || n_a > manifest.n_a {
        return Err(TrainError::Config(format!("n_a={n_a} must lie in [2, {}] for this dataset", manifest.n_a)));
    }
    if n_a > cfg.n_a {
        return Err(TrainError::Incompatible(format!("model scores {} answers, {n_a} requested", cfg.n_a)));
    }
    let canvas = (cfg.input_h, cfg.input_w);
    if !admissible_canvases(manifest.family, n_a).contains(&canvas) {
        return Err(TrainError::Incompatible(format!(
            "model canvas {}x{} cannot show {} with {n_a} answers",
            canvas.0, canvas.1, manifest.family
        )));
    }
    let items = read_split_packed(dataset, &manifest, split)?;
    Ok(SplitView::new(split, items, manifest.structure(), n_a, canvas, reduction_seed(seed, n_a))?)
}

pub fn evaluate(ckpt: &Checkpoint, dataset: &Path, split: Split, n_a: usize, seed: u64) -> Result<EvalReport, TrainError> {
    let view = checkpoint_view(ckpt, dataset, split, n_a, seed)?;
    if view.is_empty() {
        return Err(TrainError::Config(format!("{} split is empty", split.name())));
    }
    let vocab = read_manifest(dataset)?.rule_vocab;
    let (preds, _) = predict_view(&ckpt.network, &view, BATCH);
    let mut per_rule = BTreeMap::new();
    let mut per_rule_set = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        let ok = p.predicted == p.label;
        let names = active_names(&vocab, view.rules(i));
        for name in &names {
            add(&mut per_rule, name.clone(), ok);
        }
        let key = if names.is_empty() { "none".to_string() } else { names.join("+") };
        add(&mut per_rule_set, key, ok);
    }
    finalize(&mut per_rule);
    finalize(&mut per_rule_set);
    let correct = preds.iter().filter(|p| p.predicted == p.label).count();
    Ok(EvalReport {
        dataset: dataset.display().to_string(),
        dataset_sha256: dataset_digest(dataset)?,
        split,
        n_a,
        count: preds.len(),
        accuracy: correct as f64 / preds.len() as f64,
        chance: chance_baseline(n_a),
        per_rule,
        per_rule_set,
    })
}

/// Writes one CSV row per instance: id, active rule names joined by `|`,
/// then the pooled embedding `z0..z{d-1}`.
pub fn export_embeddings(
    ckpt: &Checkpoint,
    dataset: &Path,
    split: Split,
    n_a: usize,
    seed: u64,
    out: &Path,
) -> Result<usize, TrainError> {
    let view = checkpoint_view(ckpt, dataset, split, n_a, seed)?;
    let vocab = read_manifest(dataset)?.rule_vocab;
    let d = ckpt.network.config.d();
    let io = |e: csv::Error| TrainError::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(out).map_err(io)?;
    let mut header = vec!["id".to_string(), "rules".to_string()];
    header.extend((0..d).map(|j| format!("z{j}")));
    w.write_record(&header).map_err(io)?;
    let idx: Vec<usize> = (0..view.len()).collect();
    for chunk in idx.chunks(BATCH) {
        let b = view.batch(chunk);
        let o = ckpt.network.forward_eval(&b.input, b.len())?;
        for (k, &i) in chunk.iter().enumerate() {
            let mut row = vec![format!("{}-{i}", split.name()), active_names(&vocab, view.rules(i)).join("|")];
            row.extend(o.pooled_row(k).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(view.len())
}
