//! Two-stage training: reconstruction pretraining, then detection fine-tuning.
//!
//! Training runs in `f32` on one thread of control; batches are drawn from a
//! seeded generator, so a fixed seed and fixed inputs give identical metric
//! logs. A tenth of the training patients (at least one when there are two
//! or more) is held out for validation, which drives early stopping and the
//! choice of the saved parameters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::synth::SynthConfig;
use crate::ingest::{Manifest, Split, Window, CHANNELS, WINDOW_SAMPLES};
use crate::loss::{bce_loss, combined_recon_loss, LossConfig};
use crate::metrics::{auroc, MetricError};
use crate::model::{classify_logit, load_checkpoint, reconstruct, save_checkpoint, ModelConfig, ModelParams};
use crate::nn::ParamSet;
use crate::optim::{collect_grads, AdamConfig, AdamState};
use crate::tensor::{Element, Graph, Tensor};

/// Training precision.
pub type Real = f32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Optimizer steps.
    pub steps: usize,
    pub lr: f64,
    /// Halve (by `lr_decay_factor`) the learning rate every this many steps.
    pub lr_decay_every: Option<usize>,
    pub lr_decay_factor: f64,
    pub lambda_spectral: f64,
    /// Probability of zeroing each input channel during training.
    pub mask_channels_prob: f64,
    /// Fine-tuning only: train the detection head alone.
    pub freeze_encoder: bool,
    /// Fine-tuning only: ignore any pretrained checkpoint.
    pub from_scratch: bool,
    /// Fraction of training patients held out for validation.
    pub val_fraction: f64,
    /// Steps between validation passes.
    pub eval_every: usize,
    /// Validation passes without improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 16,
            steps: 500,
            lr: 1e-3,
            lr_decay_every: None,
            lr_decay_factor: 0.5,
            lambda_spectral: 1.0,
            mask_channels_prob: 0.0,
            freeze_encoder: false,
            from_scratch: false,
            val_fraction: 0.1,
            eval_every: 25,
            patience: 10,
        }
    }
}

impl TrainConfig {
    /// Reconstruction pretraining at desk scale.
    pub fn desk_pretrain() -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 500,
            lr: 8e-3,
            lr_decay_every: Some(200),
            eval_every: 50,
            patience: 1000,
            ..TrainConfig::default()
        }
    }

    /// Detection fine-tuning at desk scale.
    pub fn desk_finetune() -> Self {
        TrainConfig {
            batch_size: 4,
            steps: 150,
            lr: 1e-3,
            eval_every: 25,
            patience: 4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m));
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return fail("batch_size, eval_every and patience must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(self.lambda_spectral >= 0.0 && self.lambda_spectral.is_finite()) {
            return fail("lambda_spectral must be non-negative");
        }
        if !(0.0..1.0).contains(&self.mask_channels_prob) {
            return fail("mask_channels_prob must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail("val_fraction must lie in [0, 1)");
        }
        if !(self.lr_decay_factor > 0.0) {
            return fail("lr_decay_factor must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            decay_every: self.lr_decay_every,
            decay_factor: self.lr_decay_factor,
            ..AdamConfig::default()
        }
    }

    fn loss(&self, model: &ModelConfig) -> LossConfig {
        LossConfig {
            lambda_spectral: self.lambda_spectral,
            spectral_pad: model.spectral_pad,
            spectral_scale: None,
        }
    }
}

/// Zeroes each channel of each batch element with probability `prob`,
/// redrawing a mask that would drop every channel. `x` is `[B, C, T]`.
pub fn mask_channels<T: Element>(x: &Tensor<T>, prob: f64, rng: &mut impl Rng) -> Tensor<T> {
    if prob <= 0.0 {
        return x.clone();
    }
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = x.clone();
    let data = out.data_mut();
    for i in 0..b {
        let keep = loop {
            let keep: Vec<bool> = (0..c).map(|_| !rng.random_bool(prob)).collect();
            if keep.iter().any(|&k| k) {
                break keep;
            }
        };
        for (ch, &k) in keep.iter().enumerate() {
            if !k {
                data[(i * c + ch) * t..(i * c + ch + 1) * t].fill(T::zero());
            }
        }
    }
    out
}

/// `[B, 19, 2000]` input batch.
pub fn batch_tensor<T: Element>(windows: &[&Window]) -> Tensor<T> {
    let per = CHANNELS.len() * WINDOW_SAMPLES;
    let mut data = Vec::with_capacity(windows.len() * per);
    for w in windows {
        data.extend(w.data.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(vec![windows.len(), CHANNELS.len(), WINDOW_SAMPLES], data).expect("window size")
}

fn label_tensor<T: Element>(windows: &[&Window]) -> Tensor<T> {
    Tensor::from_vec(vec![windows.len()], windows.iter().map(|w| T::of(w.label as f64)).collect()).unwrap()
}

/// Training windows split into fitting and validation sets by patient.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
}

/// Holds out `ceil(val_fraction · n)` of `n ≥ 2` training patients, chosen
/// with `seed`; a single patient is never held out.
pub fn split_patients(by_patient: BTreeMap<String, Vec<Window>>, val_fraction: f64, seed: u64) -> DataSplits {
    let mut patients: Vec<String> = by_patient.keys().cloned().collect();
    let n_val = if patients.len() >= 2 && val_fraction > 0.0 {
        ((patients.len() as f64 * val_fraction).ceil() as usize).clamp(1, patients.len() - 1)
    } else {
        0
    };
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed));
    let mut val_patients: Vec<String> = patients[..n_val].to_vec();
    let mut train_patients: Vec<String> = patients[n_val..].to_vec();
    val_patients.sort();
    train_patients.sort();
    let gather = |ids: &[String]| ids.iter().flat_map(|p| by_patient[p].iter().cloned()).collect::<Vec<_>>();
    DataSplits {
        train: gather(&train_patients),
        val: gather(&val_patients),
        train_patients,
        val_patients,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Reconstruction,
    Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_spec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_bce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
}

pub fn metrics_jsonl(records: &[MetricRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("metric record serializes") + "\n")
        .collect()
}

/// Losses of a parameter set over a whole window set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub windows: usize,
    pub positives: usize,
    pub loss_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_spec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_bce: Option<f64>,
    /// `None` when undefined; `auroc_note` then says why.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc_note: Option<String>,
}

/// Evaluates `params` over `windows` in fixed-order batches without updates.
pub fn evaluate_windows(
    windows: &[Window],
    params: &ModelParams<Real>,
    model: &ModelConfig,
    loss: &LossConfig,
    task: Task,
    batch_size: usize,
) -> Result<EvalSummary> {
    if windows.is_empty() {
        return Err(Error::data("cannot evaluate an empty window set"));
    }
    let (mut mse, mut spec, mut bce) = (0.0, 0.0, 0.0);
    let mut scores = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let x = batch_tensor::<Real>(&refs);
        let g = Graph::inference();
        let xv = g.constant(x);
        let n = chunk.len() as f64;
        match task {
            Task::Reconstruction => {
                let pred = reconstruct(xv, params, model)?;
                let l = combined_recon_loss(pred, xv, loss)?;
                mse += n * l.mse.value().item()? as f64;
                if let Some(s) = l.spectral {
                    spec += n * s.value().item()? as f64;
                }
            }
            Task::Detection => {
                let logit = classify_logit(xv, params, model)?;
                let l = bce_loss(logit.sigmoid(), g.constant(label_tensor(&refs)))?;
                bce += n * l.value().item()? as f64;
                scores.extend(logit.value().data().iter().map(|&v| v as f64));
            }
        }
    }
    let total = windows.len() as f64;
    let positives = windows.iter().filter(|w| w.label == 1).count();
    let mut out = EvalSummary {
        windows: windows.len(),
        positives,
        loss_total: 0.0,
        loss_mse: None,
        loss_spec: None,
        loss_bce: None,
        auroc: None,
        auroc_note: None,
    };
    match task {
        Task::Reconstruction => {
            out.loss_mse = Some(mse / total);
            if loss.lambda_spectral > 0.0 {
                out.loss_spec = Some(spec / total);
            }
            out.loss_total = (mse + loss.lambda_spectral * spec) / total;
        }
        Task::Detection => {
            out.loss_bce = Some(bce / total);
            out.loss_total = bce / total;
            let labels: Vec<bool> = windows.iter().map(|w| w.label == 1).collect();
            match auroc(&scores, &labels) {
                Ok(a) => out.auroc = Some(a),
                Err(e @ MetricError::SingleClass { .. }) => out.auroc_note = Some(format!("undefined: {e}")),
                Err(e) => return Err(Error::data(e.to_string())),
            }
        }
    }
    if !out.loss_total.is_finite() {
        return Err(Error::NonFinite {
            what: "evaluation loss".into(),
            step: 0,
        });
    }
    Ok(out)
}

/// Result of one optimization run.
#[derive(Debug, Clone)]
pub struct Trained {
    /// Parameters with the best validation loss (the last ones when there is
    /// no validation set).
    pub params: ModelParams<Real>,
    /// Parameters after the last step, when they differ from `params`.
    pub last: Option<ModelParams<Real>>,
    pub metrics: Vec<MetricRecord>,
    pub steps_run: usize,
    pub best_step: usize,
    pub stopped_early: bool,
}

/// Draws batch indices: shuffled passes for reconstruction, class-balanced
/// draws with replacement for detection.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    by_class: Option<[Vec<usize>; 2]>,
}

impl Sampler {
    fn new(windows: &[Window], task: Task, rng: ChaCha8Rng) -> Result<Self> {
        let by_class = match task {
            Task::Reconstruction => None,
            Task::Detection => {
                let neg: Vec<usize> = (0..windows.len()).filter(|&i| windows[i].label == 0).collect();
                let pos: Vec<usize> = (0..windows.len()).filter(|&i| windows[i].label == 1).collect();
                if neg.is_empty() || pos.is_empty() {
                    return Err(Error::data(format!(
                        "detection training needs both classes ({} positive, {} negative windows)",
                        pos.len(),
                        neg.len()
                    )));
                }
                Some([neg, pos])
            }
        };
        Ok(Sampler {
            rng,
            order: (0..windows.len()).collect(),
            cursor: windows.len(),
            by_class,
        })
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        if let Some(classes) = &self.by_class {
            // alternate classes from a random starting class
            let first = self.rng.random_range(0..2usize);
            return (0..batch)
                .map(|i| {
                    let cls = &classes[(first + i) % 2];
                    cls[self.rng.random_range(0..cls.len())]
                })
                .collect();
        }
        (0..batch)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Whether a parameter name belongs to the detection head.
fn in_cls_head(name: &str) -> bool {
    name.starts_with("cls_head.")
}

/// Optimizes `params` on `train`, validating on `val` every `eval_every` steps.
pub fn fit(
    train: &[Window],
    val: &[Window],
    mut params: ModelParams<Real>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    task: Task,
) -> Result<Trained> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(Error::data("no training windows"));
    }
    let loss_cfg = cfg.loss(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = Sampler::new(train, task, ChaCha8Rng::seed_from_u64(rng.random()))?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut adam = AdamState::new(cfg.adam());
    let mut metrics = Vec::new();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut steps_run = 0;

    for step in 1..=cfg.steps {
        let idx = sampler.next(cfg.batch_size);
        let refs: Vec<&Window> = idx.iter().map(|&i| &train[i]).collect();
        let target = batch_tensor::<Real>(&refs);
        let input = mask_channels(&target, cfg.mask_channels_prob, &mut mask_rng);

        let g = Graph::new();
        if task == Task::Detection && cfg.freeze_encoder {
            params.visit("", &mut |name, t| {
                if !in_cls_head(&name) {
                    g.freeze(t)
                }
            });
        }
        let x = g.constant(input);
        let mut rec = MetricRecord {
            step,
            phase: Phase::Train,
            loss_total: 0.0,
            loss_mse: None,
            loss_spec: None,
            loss_bce: None,
            auroc: None,
        };
        let total = match task {
            Task::Reconstruction => {
                let pred = reconstruct(x, &params, model)?;
                let l = combined_recon_loss(pred, g.constant(target), &loss_cfg)?;
                rec.loss_mse = Some(l.mse.value().item()? as f64);
                rec.loss_spec = l.spectral.map(|s| s.value().item()).transpose()?.map(f64::from);
                l.total
            }
            Task::Detection => {
                let prob = classify_logit(x, &params, model)?.sigmoid();
                let l = bce_loss(prob, g.constant(label_tensor(&refs)))?;
                rec.loss_bce = Some(l.value().item()? as f64);
                l
            }
        };
        rec.loss_total = total.value().item()? as f64;
        if !rec.loss_total.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss".into(),
                step,
            });
        }
        g.backward(total)?;
        let grads = collect_grads(&g, &params);
        if grads.iter().flatten().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                step,
            });
        }
        drop(g);
        adam.update(&mut params, &grads);
        metrics.push(rec);
        steps_run = step;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            if val.is_empty() {
                continue;
            }
            let s = evaluate_windows(val, &params, model, &loss_cfg, task, cfg.batch_size)?;
            metrics.push(MetricRecord {
                step,
                phase: Phase::Val,
                loss_total: s.loss_total,
                loss_mse: s.loss_mse,
                loss_spec: s.loss_spec,
                loss_bce: s.loss_bce,
                auroc: s.auroc,
            });
            if s.loss_total < best.0 {
                best = (s.loss_total, step, params.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    log::info!("early stop at step {step}: no improvement for {since_best} validations");
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let last = if val.is_empty() || best.1 == steps_run {
        None
    } else {
        Some(params.clone())
    };
    if val.is_empty() {
        best = (f64::NAN, steps_run, params);
    }
    Ok(Trained {
        params: best.2,
        last,
        metrics,
        steps_run,
        best_step: best.1,
        stopped_early,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Pretrain,
    Finetune,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: RunKind,
    pub task: Task,
    pub steps_run: usize,
    pub best_step: usize,
    pub stopped_early: bool,
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<EvalSummary>,
    /// Training windows under the parameters after the last step; `train`
    /// uses the parameters selected on validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_last: Option<EvalSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<EvalSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<EvalSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    #[serde(skip)]
    pub metrics: Vec<MetricRecord>,
}

impl RunReport {
    /// Held-out AUROC of a detection run.
    pub fn test_auroc(&self) -> Option<f64> {
        self.test.as_ref().and_then(|s| s.auroc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::ingest::write_atomic(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `metrics.jsonl` and the checkpoint under `out`.
fn persist(out: &Path, report: &mut RunReport, params: &ModelParams<Real>) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&ckpt, &report.model_config, params)?;
    report.checkpoint = Some(ckpt);
    write_file(&out.join("metrics.jsonl"), metrics_jsonl(&report.metrics).as_bytes())?;
    write_file(&out.join("report.json"), report.to_json().as_bytes())
}

fn load_split(manifest: &Manifest, split: Split) -> Result<BTreeMap<String, Vec<Window>>> {
    manifest.validate()?;
    let w = manifest.load_windows(split)?;
    if w.values().all(Vec::is_empty) {
        return Err(Error::data(format!("the {split:?} split has no windows")));
    }
    Ok(w)
}

fn flatten(by_patient: &BTreeMap<String, Vec<Window>>) -> Vec<Window> {
    by_patient.values().flatten().cloned().collect()
}

/// Reconstruction pretraining from a fresh initialization. Reports losses of
/// the selected parameters on the fitting, validation and test windows.
pub fn pretrain(
    manifest: &Manifest,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(RunReport, ModelParams<Real>)> {
    cfg.validate()?;
    model.validate()?;
    let splits = split_patients(load_split(manifest, Split::Train)?, cfg.val_fraction, cfg.seed);
    let params = ModelParams::<Real>::init(model, cfg.seed)?;
    let t = fit(&splits.train, &splits.val, params, model, cfg, Task::Reconstruction)?;
    let test = manifest.load_windows(Split::Test)?;
    let mut report = summarize(RunKind::Pretrain, Task::Reconstruction, &t, &splits, &flatten(&test), model, cfg)?;
    if let Some(out) = out {
        persist(out, &mut report, &t.params)?;
    }
    Ok((report, t.params))
}

/// Detection fine-tuning. Starts from `init` unless it is `None` or
/// `cfg.from_scratch` is set; the model configuration then comes from the
/// checkpoint. The checkpoint file is only read.
pub fn finetune(
    manifest: &Manifest,
    init: Option<&Path>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(RunReport, ModelParams<Real>)> {
    cfg.validate()?;
    let (model, params, init_checkpoint) = match init {
        Some(path) if !cfg.from_scratch => {
            let (m, p) = load_checkpoint::<Real>(path)?;
            (m, p, Some(path.to_path_buf()))
        }
        _ => (model.clone(), ModelParams::<Real>::init(model, cfg.seed)?, None),
    };
    model.validate()?;
    let splits = split_patients(load_split(manifest, Split::Train)?, cfg.val_fraction, cfg.seed);
    let t = fit(&splits.train, &splits.val, params, &model, cfg, Task::Detection)?;
    let test = manifest.load_windows(Split::Test)?;
    let mut report = summarize(RunKind::Finetune, Task::Detection, &t, &splits, &flatten(&test), &model, cfg)?;
    report.init_checkpoint = init_checkpoint;
    if let Some(out) = out {
        persist(out, &mut report, &t.params)?;
    }
    Ok((report, t.params))
}

fn summarize(
    kind: RunKind,
    task: Task,
    t: &Trained,
    splits: &DataSplits,
    test: &[Window],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<RunReport> {
    let loss = cfg.loss(model);
    let eval_with = |w: &[Window], p: &ModelParams<Real>| -> Result<Option<EvalSummary>> {
        if w.is_empty() {
            Ok(None)
        } else {
            evaluate_windows(w, p, model, &loss, task, cfg.batch_size).map(Some)
        }
    };
    let eval = |w: &[Window]| eval_with(w, &t.params);
    let train = eval(&splits.train)?;
    let train_last = match &t.last {
        Some(p) => eval_with(&splits.train, p)?,
        None => train.clone(),
    };
    Ok(RunReport {
        kind,
        task,
        steps_run: t.steps_run,
        best_step: t.best_step,
        stopped_early: t.stopped_early,
        train_patients: splits.train_patients.clone(),
        val_patients: splits.val_patients.clone(),
        train,
        train_last,
        val: eval(&splits.val)?,
        test: eval(test)?,
        checkpoint: None,
        init_checkpoint: None,
        train_config: cfg.clone(),
        model_config: model.clone(),
        metrics: t.metrics.clone(),
    })
}

/// Evaluates a checkpoint on one split of the manifest. No parameters change.
pub fn evaluate(
    manifest: &Manifest,
    checkpoint: &Path,
    split: Split,
    task: Task,
    cfg: &TrainConfig,
) -> Result<RunReport> {
    let (model, params) = load_checkpoint::<Real>(checkpoint)?;
    let windows = flatten(&load_split(manifest, split)?);
    let summary = evaluate_windows(&windows, &params, &model, &cfg.loss(&model), task, cfg.batch_size)?;
    let patients = manifest.patients(split);
    let (train, test, train_patients) = match split {
        Split::Train => (Some(summary), None, patients),
        Split::Test => (None, Some(summary), Vec::new()),
    };
    Ok(RunReport {
        kind: RunKind::Eval,
        task,
        steps_run: 0,
        best_step: 0,
        stopped_early: false,
        train_patients,
        val_patients: Vec::new(),
        train,
        train_last: None,
        val: None,
        test,
        checkpoint: Some(checkpoint.to_path_buf()),
        init_checkpoint: None,
        train_config: cfg.clone(),
        model_config: model,
        metrics: Vec::new(),
    })
}

/// Two runs of one experiment side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub experiment: String,
    pub arms: Vec<ComparisonArm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonArm {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_spectral: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_auroc: Option<f64>,
    pub steps_run: usize,
    pub report: PathBuf,
}

impl Comparison {
    /// Plain-text table of the arms.
    pub fn table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "{}\n{:<22} {:>10} {:>10} {:>12} {:>10} {:>6}\n",
            self.experiment, "arm", "train_mse", "test_mse", "test_spec", "test_auroc", "steps"
        );
        for a in &self.arms {
            s.push_str(&format!(
                "{:<22} {:>10} {:>10} {:>12} {:>10} {:>6}\n",
                a.name,
                f(a.train_mse),
                f(a.test_mse),
                f(a.test_spectral),
                f(a.test_auroc),
                a.steps_run
            ));
        }
        s
    }

    fn persist(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let json = serde_json::to_string_pretty(self).expect("comparison serializes");
        write_file(&out.join("comparison.json"), json.as_bytes())?;
        write_file(&out.join("comparison.txt"), self.table().as_bytes())
    }
}

fn arm(name: &str, r: &RunReport, dir: &Path) -> ComparisonArm {
    ComparisonArm {
        name: name.to_string(),
        train_mse: r.train.as_ref().and_then(|s| s.loss_mse),
        test_mse: r.test.as_ref().and_then(|s| s.loss_mse),
        test_spectral: r.test.as_ref().and_then(|s| s.loss_spec),
        test_auroc: r.test_auroc(),
        steps_run: r.steps_run,
        report: dir.join("report.json"),
    }
}

/// Pretrains with the configured spectral weight and with none, under the
/// same seed. Both arms report the held-out spectral term so they compare on
/// one scale.
pub fn spectral_ablation(
    manifest: &Manifest,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<(Comparison, RunReport, RunReport)> {
    let with_dir = out.join("with_spectral");
    let without_dir = out.join("without_spectral");
    let (with, _) = pretrain(manifest, model, cfg, Some(&with_dir))?;
    let ablated = TrainConfig {
        lambda_spectral: 0.0,
        ..cfg.clone()
    };
    let (mut without, params) = pretrain(manifest, model, &ablated, Some(&without_dir))?;
    // measure the ablated model's spectral error with the original weight
    let probe = cfg.loss(model);
    let test = flatten(&manifest.load_windows(Split::Test)?);
    if !test.is_empty() && probe.lambda_spectral > 0.0 {
        let s = evaluate_windows(&test, &params, model, &probe, Task::Reconstruction, cfg.batch_size)?;
        if let Some(t) = without.test.as_mut() {
            t.loss_spec = s.loss_spec;
        }
    }
    let cmp = Comparison {
        experiment: format!("spectral loss ablation (lambda {} vs 0)", cfg.lambda_spectral),
        arms: vec![
            arm("with_spectral", &with, &with_dir),
            arm("without_spectral", &without, &without_dir),
        ],
    };
    cmp.persist(out)?;
    Ok((cmp, with, without))
}

/// Fine-tunes from `checkpoint` and from scratch under the same seed.
pub fn pretrained_vs_scratch(
    manifest: &Manifest,
    checkpoint: &Path,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<(Comparison, RunReport, RunReport)> {
    let pre_dir = out.join("pretrained");
    let scratch_dir = out.join("scratch");
    let pre_cfg = TrainConfig {
        from_scratch: false,
        ..cfg.clone()
    };
    let (pre, _) = finetune(manifest, Some(checkpoint), model, &pre_cfg, Some(&pre_dir))?;
    let scratch_cfg = TrainConfig {
        from_scratch: true,
        ..cfg.clone()
    };
    let (scratch, _) = finetune(manifest, None, &pre.model_config, &scratch_cfg, Some(&scratch_dir))?;
    let cmp = Comparison {
        experiment: "detection: pretrained vs from scratch".into(),
        arms: vec![arm("pretrained", &pre, &pre_dir), arm("scratch", &scratch, &scratch_dir)],
    };
    cmp.persist(out)?;
    Ok((cmp, pre, scratch))
}

/// Every setting of a pipeline run: synthetic corpus, model and the two
/// training stages. Defaults are the desk-scale presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            model: ModelConfig::desk(),
            pretrain: TrainConfig::desk_pretrain(),
            finetune: TrainConfig::desk_finetune(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    /// Uses `seed` for data generation and both training stages.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self
    }
}
