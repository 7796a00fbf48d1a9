//! Losses, optimisation and the single-task, transfer and curriculum
//! training drivers.

pub mod checkpoint;
pub mod data;
pub mod loss;
pub mod optim;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{dataset_digest, read_manifest, read_split_packed, DatasetError, DatasetManifest, PackedInstance, Split};
use crate::derive_seed;
use crate::eval::{evaluate_view, SplitMetrics};
use crate::net::{ModelConfig, NetError, Network};
use crate::render::{canvas_size, RenderError};

pub use checkpoint::{Checkpoint, Provenance};
use data::{batches, reduction_seed, SplitView};
use loss::batch_loss;
pub use optim::{adam_step, early_stopping, lr_schedule, AdamState, EarlyStopping, LR_MIN, WARMUP_STEPS};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_HEAD: u64 = 4;
const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("incompatible: {0}")]
    Incompatible(String),
    #[error("numeric failure: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

impl From<RenderError> for TrainError {
    fn from(e: RenderError) -> Self {
        TrainError::Incompatible(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Stl,
    Transfer,
    Curriculum,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Stl => "stl",
            Regime::Transfer => "transfer",
            Regime::Curriculum => "curriculum",
        })
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stl" => Ok(Regime::Stl),
            "transfer" => Ok(Regime::Transfer),
            "curriculum" => Ok(Regime::Curriculum),
            other => Err(format!("unknown regime {other:?} (expected stl, transfer or curriculum)")),
        }
    }
}

/// The size-independent part of a [`ModelConfig`]; the answer count, rule
/// length and canvas come from the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub stem_channels: Vec<usize>,
    pub blocks: usize,
    pub segments: usize,
    pub expansion: usize,
}

impl Architecture {
    pub fn standard() -> Self {
        Self::from_config(&ModelConfig::standard(16, 16, 2, 1))
    }

    pub fn compact() -> Self {
        Self::from_config(&ModelConfig::compact(16, 16, 2, 1))
    }

    pub fn from_config(c: &ModelConfig) -> Self {
        Architecture {
            stem_channels: c.stem_channels.clone(),
            blocks: c.blocks,
            segments: c.segments,
            expansion: c.expansion,
        }
    }

    pub fn model(&self, canvas: (usize, usize), n_a: usize, rule_dim: usize) -> ModelConfig {
        ModelConfig {
            stem_channels: self.stem_channels.clone(),
            blocks: self.blocks,
            segments: self.segments,
            expansion: self.expansion,
            n_a,
            rule_dim,
            input_h: canvas.0,
            input_w: canvas.1,
        }
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self::compact()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    10
}
fn default_warmup() -> usize {
    WARMUP_STEPS
}
fn default_start() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunSpec {
    pub regime: Regime,
    pub dataset: PathBuf,
    #[serde(default)]
    pub model: Architecture,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Peak learning rate.
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Weight of the auxiliary rule loss.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Source checkpoint for transfer.
    #[serde(default)]
    pub source: Option<PathBuf>,
    /// Answer count to train at; defaults to the dataset's.
    #[serde(default)]
    pub n_a: Option<usize>,
    #[serde(default = "default_start")]
    pub curriculum_start: usize,
    /// Final curriculum answer count; defaults to the dataset's.
    #[serde(default)]
    pub curriculum_end: Option<usize>,
}

impl TrainRunSpec {
    pub fn new(regime: Regime, dataset: impl Into<PathBuf>) -> Self {
        TrainRunSpec {
            regime,
            dataset: dataset.into(),
            model: Architecture::default(),
            batch_size: default_batch(),
            lr: default_lr(),
            beta: default_beta(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            warmup_steps: default_warmup(),
            seed: 0,
            source: None,
            n_a: None,
            curriculum_start: default_start(),
            curriculum_end: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size < 1 {
            return err("batch_size must be at least 1");
        }
        if self.patience < 1 {
            return err("patience must be at least 1");
        }
        if self.max_epochs < 1 {
            return err("max_epochs must be at least 1");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return err("beta must be a finite value >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr must be positive");
        }
        if self.regime == Regime::Transfer && self.source.is_none() {
            return err("transfer needs a source checkpoint");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub n_a: usize,
    pub first_epoch: usize,
    pub last_epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
    pub first_lr: f64,
    /// Whether answer-head rows carried into this stage matched bit for bit.
    pub head_rows_preserved: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub regime: Regime,
    pub seed: u64,
    pub dataset_sha256: String,
    pub model: ModelConfig,
    pub param_count: usize,
    pub epochs_run: usize,
    pub stages: Vec<StageSummary>,
    pub test: Option<SplitMetrics>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub summary: RunSummary,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.umck";
pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.json";

impl TrainOutcome {
    /// Writes the checkpoint, history CSV and summary JSON into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        self.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        write_history_csv(&dir.join(HISTORY_FILE), &self.checkpoint.history)?;
        let mut json = serde_json::to_vec_pretty(&self.summary).map_err(std::io::Error::other)?;
        json.push(b'\n');
        fs::write(dir.join(SUMMARY_FILE), json)?;
        Ok(())
    }
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io(std::io::Error::other(e)))?;
    for r in history {
        w.serialize(r).map_err(|e| TrainError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>, TrainError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::Io(std::io::Error::other(e)))?;
    r.deserialize().map(|row| row.map_err(|e| TrainError::Io(std::io::Error::other(e)))).collect()
}

struct Task {
    manifest: DatasetManifest,
    digest: String,
    splits: [Vec<PackedInstance>; 3],
}

impl Task {
    fn load(path: &Path) -> Result<Self, TrainError> {
        let manifest = read_manifest(path)?;
        let digest = dataset_digest(path)?;
        let splits = Split::ALL.map(|s| read_split_packed(path, &manifest, s));
        let [a, b, c] = splits;
        Ok(Task { manifest, digest, splits: [a?, b?, c?] })
    }

    fn check_n_a(&self, n_a: usize) -> Result<(), TrainError> {
        if n_a < 2 || n_a > self.manifest.n_a {
            return Err(TrainError::Config(format!("n_a={n_a} must lie in [2, {}] for this dataset", self.manifest.n_a)));
        }
        Ok(())
    }

    fn view(&self, split: Split, n_a: usize, canvas: (usize, usize), seed: u64) -> Result<SplitView, TrainError> {
        let items = self.splits[split.index() as usize].clone();
        Ok(SplitView::new(split, items, self.manifest.structure(), n_a, canvas, reduction_seed(seed, n_a))?)
    }
}

/// Runs the driver selected by `spec.regime`.
pub fn train(spec: &TrainRunSpec) -> Result<TrainOutcome, TrainError> {
    match spec.regime {
        Regime::Stl => train_stl(spec),
        Regime::Transfer => train_transfer(spec),
        Regime::Curriculum => train_curriculum(spec),
    }
}

pub fn train_stl(spec: &TrainRunSpec) -> Result<TrainOutcome, TrainError> {
    spec.validate()?;
    let task = Task::load(&spec.dataset)?;
    let n_a = spec.n_a.unwrap_or(task.manifest.n_a);
    task.check_n_a(n_a)?;
    let canvas = canvas_size(&task.manifest.structure().with_n_a(n_a))?;
    let config = spec.model.model(canvas, n_a, task.manifest.rule_len());
    let net = Network::<f32>::new(config, derive_seed(spec.seed, &[TAG_INIT]))?;
    run_single(spec, Regime::Stl, &task, net, n_a, canvas)
}

pub fn train_transfer(spec: &TrainRunSpec) -> Result<TrainOutcome, TrainError> {
    spec.validate()?;
    let source_path = spec.source.as_ref().ok_or_else(|| TrainError::Config("transfer needs a source checkpoint".into()))?;
    let source = Checkpoint::load(source_path)?;
    let task = Task::load(&spec.dataset)?;
    let n_a = spec.n_a.unwrap_or(task.manifest.n_a);
    task.check_n_a(n_a)?;
    let canvas = canvas_size(&task.manifest.structure().with_n_a(n_a))?;
    let src = &source.network.config;
    if (src.input_h, src.input_w) != canvas {
        return Err(TrainError::Incompatible(format!(
            "transfer-compatibility: source model expects a {}x{} canvas, target needs {}x{}; \
             spatial pathway weights are bound to the canvas size",
            src.input_h, src.input_w, canvas.0, canvas.1
        )));
    }
    let net = source.network.with_heads(n_a, task.manifest.rule_len(), false, derive_seed(spec.seed, &[TAG_HEAD]))?;
    run_single(spec, Regime::Transfer, &task, net, n_a, canvas)
}

fn run_single(
    spec: &TrainRunSpec,
    regime: Regime,
    task: &Task,
    mut net: Network<f32>,
    n_a: usize,
    canvas: (usize, usize),
) -> Result<TrainOutcome, TrainError> {
    let train = task.view(Split::Train, n_a, canvas, spec.seed)?;
    let val = task.view(Split::Val, n_a, canvas, spec.seed)?;
    let mut history = Vec::new();
    let (stage, opt) = run_stage(&mut net, spec, &train, &val, 0, 0, &mut history)?;
    finish(spec, regime, task, net, opt, history, vec![stage], n_a, canvas)
}

pub fn train_curriculum(spec: &TrainRunSpec) -> Result<TrainOutcome, TrainError> {
    spec.validate()?;
    let task = Task::load(&spec.dataset)?;
    let end = spec.curriculum_end.unwrap_or(task.manifest.n_a);
    let start = spec.curriculum_start;
    task.check_n_a(end)?;
    if start < 2 || start > end {
        return Err(TrainError::Config(format!("curriculum range {start}..={end} is empty or starts below 2")));
    }
    let canvas = canvas_size(&task.manifest.structure().with_n_a(end))?;
    let rule_dim = task.manifest.rule_len();
    let mut net = Network::<f32>::new(spec.model.model(canvas, start, rule_dim), derive_seed(spec.seed, &[TAG_INIT]))?;
    let mut history = Vec::new();
    let mut stages = Vec::new();
    let mut opt = AdamState::new(0);
    for (k, n_a) in (start..=end).enumerate() {
        let mut preserved = None;
        if k > 0 {
            let prev = net.clone();
            net = prev.with_heads(n_a, rule_dim, true, derive_seed(spec.seed, &[TAG_HEAD, n_a as u64]))?;
            let old = prev.tensor("head.answer.weight").expect("answer head");
            let new = net.tensor("head.answer.weight").expect("answer head");
            let old_b = prev.tensor("head.answer.bias").expect("answer head");
            let new_b = net.tensor("head.answer.bias").expect("answer head");
            let same = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            preserved = Some(same(old, &new[..old.len()]) && same(old_b, &new_b[..old_b.len()]));
        }
        let train = task.view(Split::Train, n_a, canvas, spec.seed)?;
        let val = task.view(Split::Val, n_a, canvas, spec.seed)?;
        let offset = history.len() / 2;
        let (mut stage, o) = run_stage(&mut net, spec, &train, &val, k as u64, offset, &mut history)?;
        stage.head_rows_preserved = preserved;
        stages.push(stage);
        opt = o;
    }
    finish(spec, Regime::Curriculum, &task, net, opt, history, stages, end, canvas)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    spec: &TrainRunSpec,
    regime: Regime,
    task: &Task,
    net: Network<f32>,
    opt: AdamState,
    history: Vec<EpochRecord>,
    stages: Vec<StageSummary>,
    n_a: usize,
    canvas: (usize, usize),
) -> Result<TrainOutcome, TrainError> {
    let test_view = task.view(Split::Test, n_a, canvas, spec.seed)?;
    let test = (!test_view.is_empty()).then(|| evaluate_view(&net, &test_view, spec.beta, EVAL_BATCH));
    let summary = RunSummary {
        regime,
        seed: spec.seed,
        dataset_sha256: task.digest.clone(),
        model: net.config.clone(),
        param_count: net.param_count(),
        epochs_run: history.len() / 2,
        stages,
        test,
    };
    let checkpoint = Checkpoint {
        network: net,
        optimizer: Some(opt),
        history,
        provenance: Provenance { regime, seed: spec.seed, dataset_sha256: task.digest.clone() },
    };
    Ok(TrainOutcome { checkpoint, summary })
}

/// Trains until early stopping or `max_epochs`, then restores the
/// best-validation weights. Appends a train and a val row per epoch.
fn run_stage(
    net: &mut Network<f32>,
    spec: &TrainRunSpec,
    train: &SplitView,
    val: &SplitView,
    stage: u64,
    epoch_offset: usize,
    history: &mut Vec<EpochRecord>,
) -> Result<(StageSummary, AdamState), TrainError> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("train and val splits must be non-empty".into()));
    }
    let all: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = batches(&all, spec.batch_size).len();
    let total_steps = spec.max_epochs * steps_per_epoch;
    let warmup = spec.warmup_steps.min(total_steps / 2);
    if warmup < spec.warmup_steps {
        log::warn!("run has {total_steps} steps; warmup shortened from {} to {warmup}", spec.warmup_steps);
    }
    let schedule = |step: usize| lr_schedule(step, warmup, total_steps, spec.lr, LR_MIN);
    schedule(0)?;
    let beta = spec.beta as f32;
    let mut opt = AdamState::new(net.param_count());
    let mut stopper = EarlyStopping::new(spec.patience);
    let mut best = (net.clone(), opt.clone(), f64::NAN);
    let mut step = 0;
    let mut first_lr = f64::NAN;
    for epoch in 1..=spec.max_epochs {
        let mut order = all.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[TAG_SHUFFLE, stage, epoch as u64])));
        let epoch_lr = schedule(step)?;
        if epoch == 1 {
            first_lr = epoch_lr;
        }
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in batches(&order, spec.batch_size) {
            let batch = train.batch(&idx);
            let (out, tape) = net.forward_train(&batch.input, batch.len())?;
            let bl = batch_loss(&out, &batch.labels, &batch.rule_refs(), beta);
            if !bl.loss.is_finite() {
                return Err(TrainError::NonFinite(format!("loss {} at step {step}", bl.loss)));
            }
            let grads = net.backward(&tape, &bl.d_answer, &bl.d_rule);
            adam_step(&mut net.params, &grads, &mut opt, schedule(step)?)?;
            step += 1;
            loss_sum += bl.loss as f64 * batch.len() as f64;
            correct += bl.correct;
        }
        let n = train.len() as f64;
        let v = evaluate_view(net, val, spec.beta, EVAL_BATCH);
        if !v.loss.is_finite() {
            return Err(TrainError::NonFinite(format!("validation loss {} in epoch {epoch}", v.loss)));
        }
        let global = epoch_offset + epoch;
        history.push(EpochRecord { epoch: global, split: "train".into(), loss: loss_sum / n, accuracy: correct as f64 / n, lr: epoch_lr });
        history.push(EpochRecord { epoch: global, split: "val".into(), loss: v.loss, accuracy: v.accuracy, lr: epoch_lr });
        log::info!(
            "epoch {global} n_a={} lr={epoch_lr:.3e} train loss {:.4} acc {:.3} | val loss {:.4} acc {:.3}",
            train.n_a(),
            loss_sum / n,
            correct as f64 / n,
            v.loss,
            v.accuracy
        );
        if stopper.observe(v.loss) {
            best = (net.clone(), opt.clone(), v.accuracy);
        }
        if stopper.should_stop() {
            break;
        }
    }
    let (best_net, best_opt, best_acc) = best;
    *net = best_net;
    let summary = StageSummary {
        n_a: train.n_a(),
        first_epoch: epoch_offset + 1,
        last_epoch: epoch_offset + stopper.epochs_seen,
        best_epoch: epoch_offset + stopper.best_epoch,
        best_val_loss: stopper.best_loss,
        best_val_accuracy: best_acc,
        first_lr,
        head_rows_preserved: None,
    };
    Ok((summary, best_opt))
}
