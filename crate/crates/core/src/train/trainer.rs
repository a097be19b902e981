use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use levitmc_tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::checkpoint::Checkpoint;
use super::plateau::PlateauState;
use crate::data::{batch_schedule, load_split, ClassIndex, LoadedSplit, Manifest, Split};
use crate::error::{io_err, Error, Result};
use crate::model::{Mode, ModelGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Parameters whose names start with any of these are not updated.
    pub freeze_prefixes: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr0: 1e-5,
            plateau_factor: 0.1,
            plateau_patience: 10,
            min_delta: 1e-4,
            max_epochs: 30,
            seed: 0,
            freeze_prefixes: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor {} is outside (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.batch_size == 0 {
            return bad("plateau_patience and batch_size must be at least 1".into());
        }
        if !(self.min_delta >= 0.0) {
            return bad(format!("min_delta {} is negative", self.min_delta));
        }
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.freeze_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Eval-mode accuracy on the training split after the epoch's updates.
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// Rate used during the epoch.
    pub lr: f64,
}

impl EpochMetrics {
    /// The value the scheduler and best-checkpoint selection watch.
    pub fn monitored(&self) -> f64 {
        self.val_accuracy.unwrap_or(self.train_accuracy)
    }

    /// Loss on the same split as [`EpochMetrics::monitored`].
    pub fn monitored_loss(&self) -> f64 {
        self.val_loss.unwrap_or(self.train_loss)
    }

    /// Higher monitored accuracy wins; equal accuracy falls back to lower loss.
    pub fn beats(&self, other: &EpochMetrics) -> bool {
        let (a, b) = (self.monitored(), other.monitored());
        a > b || (a == b && self.monitored_loss() < other.monitored_loss())
    }
}

/// Which half of the cascade a dataset is routed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Benign (0) against every malign class (1).
    Binary,
    /// Malign samples only, labelled by family.
    Family,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: LoadedSplit,
    pub val: Option<LoadedSplit>,
}

impl TrainData {
    /// Decodes a manifest: its train/val splits when tagged, otherwise every
    /// record as training data.
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let tagged = manifest.records.iter().any(|r| r.split.is_some());
        if !tagged {
            return Ok(Self {
                train: load_split(manifest, None)?,
                val: None,
            });
        }
        let val = if manifest.select(Some(Split::Val)).is_empty() {
            None
        } else {
            Some(load_split(manifest, Some(Split::Val))?)
        };
        Ok(Self {
            train: load_split(manifest, Some(Split::Train))?,
            val,
        })
    }

    /// Relabels 26-class data for one stage.
    pub fn for_stage(&self, classes: &ClassIndex, stage: Stage) -> Result<Self> {
        let route = |s: &LoadedSplit| match stage {
            Stage::Binary => s.remap(|_| true, |l| usize::from(l != classes.benign_index())),
            Stage::Family => s.remap(
                |l| classes.family_of(l).is_some(),
                |l| classes.family_of(l).expect("kept malign only"),
            ),
        };
        let train = route(&self.train);
        if train.is_empty() {
            return Err(Error::EmptyDataset(format!("no training samples for {stage:?}")));
        }
        let val = self.val.as_ref().map(route).filter(|v| !v.is_empty());
        Ok(Self { train, val })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best monitored metric.
    pub best: Checkpoint,
    /// State after the last completed epoch, resumable.
    pub last: Checkpoint,
    pub log: Vec<EpochMetrics>,
    /// Set when a numeric failure stopped training; `last` is the last good state.
    pub aborted: Option<Error>,
}

/// Mean cross-entropy and accuracy of eval-mode predictions.
pub fn evaluate_split(model: &ModelGraph, split: &LoadedSplit, batch_size: usize) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = split.batch(chunk)?;
        let logits = model.infer(&batch.images)?;
        let c = logits.shape()[1];
        for (row, &label) in logits.data().chunks(c).zip(&batch.labels) {
            let max = row.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            loss += lse - row[label] as f64;
            let pred = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(pred == label);
        }
    }
    Ok((loss / split.len() as f64, correct as f64 / split.len() as f64))
}

fn check_labels(model: &ModelGraph, data: &TrainData) -> Result<()> {
    let classes = model.num_classes();
    let splits = std::iter::once(&data.train).chain(data.val.as_ref());
    for s in splits {
        if let Some(&bad) = s.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!(
                "label {bad} does not fit a model with {classes} outputs"
            )));
        }
    }
    Ok(())
}

/// One optimizer step on a batch; returns the batch loss.
fn train_step(
    model: &mut ModelGraph,
    adam: &mut AdamState,
    images: Tensor<f32>,
    labels: &[usize],
    lr: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let frozen = |n: &str| config.is_frozen(n);
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, frozen);
    let x = g.constant(images);
    let out = model.forward(&mut g, &bound, x, Mode::Train)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    let loss_value = g.value(loss).item()? as f64;
    g.backward(loss)?;
    let mut grads = Vec::new();
    for e in model.params.trainable() {
        if frozen(&e.name) {
            continue;
        }
        let v = bound.var(&e.name)?;
        let grad = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(e.tensor.shape()));
        if !grad.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {}", e.name)));
        }
        grads.push((e.name.clone(), grad));
    }
    adam.step(&mut model.params, &grads, lr, |n| !frozen(n))?;
    model.update_running_stats(&out.bn_stats, frozen)?;
    if model.params.entries().iter().any(|e| !e.tensor.all_finite()) {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(loss_value)
}

fn run_epoch(
    state: &mut Checkpoint,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<EpochMetrics> {
    let plateau = state.plateau.as_mut().expect("initialized");
    let adam = state.adam.as_mut().expect("initialized");
    let lr = plateau.current_lr;
    let epoch = state.epoch;
    let mut loss_sum = 0.0;
    for idx in batch_schedule(data.train.len(), config.batch_size, config.seed, epoch as u64) {
        let batch = data.train.batch(&idx)?;
        let loss = train_step(&mut state.model, adam, batch.images, &batch.labels, lr, config)?;
        loss_sum += loss * idx.len() as f64;
    }
    let (_, train_accuracy) = evaluate_split(&state.model, &data.train, config.batch_size)?;
    let val = data
        .val
        .as_ref()
        .map(|v| evaluate_split(&state.model, v, config.batch_size))
        .transpose()?;
    let m = EpochMetrics {
        epoch: epoch + 1,
        train_loss: loss_sum / data.train.len() as f64,
        train_accuracy,
        val_loss: val.map(|v| v.0),
        val_accuracy: val.map(|v| v.1),
        lr,
    };
    plateau.step(m.monitored());
    state.epoch += 1;
    state.history.push(m.clone());
    Ok(m)
}

/// Continues `start` (fresh or resumed) until `config.max_epochs` epochs
/// have been completed in total.
pub fn resume(start: Checkpoint, data: &TrainData, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_labels(&start.model, data)?;
    let mut state = start;
    state.train_config = Some(config.clone());
    state.plateau.get_or_insert_with(|| {
        PlateauState::new(config.lr0, config.plateau_factor, config.plateau_patience, config.min_delta)
    });
    state.adam.get_or_insert_with(AdamState::new);
    let mut best = state.clone();
    let mut best_metric: Option<EpochMetrics> = None;
    for m in &state.history {
        if best_metric.as_ref().map_or(true, |b| m.beats(b)) {
            best_metric = Some(m.clone());
        }
    }
    let mut aborted = None;
    while state.epoch < config.max_epochs {
        let mut next = state.clone();
        match run_epoch(&mut next, data, config) {
            Ok(m) => {
                log::info!(
                    "epoch {} loss {:.5} train acc {:.4} val acc {:?} lr {:e}",
                    m.epoch,
                    m.train_loss,
                    m.train_accuracy,
                    m.val_accuracy,
                    m.lr
                );
                state = next;
                if best_metric.as_ref().map_or(true, |b| m.beats(b)) {
                    best_metric = Some(m);
                    best = state.clone();
                }
            }
            Err(Error::Numeric(msg)) => {
                log::error!("numeric failure in epoch {}: {msg}", state.epoch + 1);
                aborted = Some(Error::Numeric(msg));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        best,
        log: state.history.clone(),
        last: state,
        aborted,
    })
}

pub fn train_model(
    model: ModelGraph,
    data: &TrainData,
    config: &TrainConfig,
    class_index: Option<ClassIndex>,
) -> Result<TrainOutcome> {
    let start = Checkpoint {
        class_index,
        ..Checkpoint::initial(model)
    };
    resume(start, data, config)
}

/// Re-heads `base` for `new_head_classes` outputs and trains it with
/// `freeze_prefixes` held fixed.
pub fn fine_tune(
    base: Checkpoint,
    target_tag: &str,
    new_head_classes: usize,
    freeze_prefixes: &[String],
    data: &TrainData,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if base.model.tag() != target_tag {
        return Err(Error::Config(format!(
            "checkpoint holds {}, target is {target_tag}",
            base.model.tag()
        )));
    }
    let mut model = base.model;
    model.reset_head(new_head_classes, config.seed)?;
    let config = TrainConfig {
        freeze_prefixes: freeze_prefixes.to_vec(),
        ..config.clone()
    };
    train_model(model, data, &config, base.class_index)
}

/// `epoch,split,loss,accuracy,lr` rows, one per split per epoch.
pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy,lr\n");
    for m in log {
        let _ = writeln!(out, "{},train,{},{},{}", m.epoch, m.train_loss, m.train_accuracy, m.lr);
        if let (Some(l), Some(a)) = (m.val_loss, m.val_accuracy) {
            let _ = writeln!(out, "{},val,{l},{a},{}", m.epoch, m.lr);
        }
    }
    out
}

pub fn write_metrics_csv(log: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_csv(log)).map_err(io_err(path))
}
