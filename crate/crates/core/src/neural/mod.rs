//! Neural classifiers: a word-level LSTM baseline and transformer
//! fine-tuning, sharing one training loop with F1-based early stopping.

mod finetune;
mod lstm;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::encoder::EncoderError;
use crate::metrics::{self, MetricsError};
use crate::nn::ParamStore;

pub use finetune::{finetune, FinetuneSpec, SequenceClassifier, TEST_ENCODER_ID};
pub use lstm::{train_lstm, LstmModel, LstmSpec, MAX_LSTM_VOCAB};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("training history is empty")]
    EmptyHistory,
    #[error("dev set is empty")]
    EmptyDev,
    #[error("training set is empty")]
    EmptyTrain,
    #[error("vocabulary holds {vocab} tokens but the model is sized for {spec}")]
    VocabMismatch { vocab: usize, spec: usize },
    #[error("cannot resolve encoder `{0}`")]
    EncoderUnresolvable(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("{found} distinct training labels exceed num_classes = {num_classes}")]
    TooManyClasses { found: usize, num_classes: usize },
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NeuralError + '_ {
    move |source| NeuralError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dev metric watched by early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitoredMetric {
    #[default]
    MacroF1,
    WeightedF1,
}

impl MonitoredMetric {
    pub fn score(self, gold: &[Label], pred: &[Label]) -> Result<f64, MetricsError> {
        match self {
            MonitoredMetric::MacroF1 => metrics::macro_f1(gold, pred),
            MonitoredMetric::WeightedF1 => metrics::weighted_f1(gold, pred),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub dev_metric: f64,
}

/// Append-only per-epoch log; epoch numbers start at 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_metrics(dev_metrics: &[f64]) -> Self {
        TrainingHistory {
            records: dev_metrics
                .iter()
                .map(|&m| EpochRecord {
                    train_loss: 0.0,
                    dev_metric: m,
                })
                .collect(),
        }
    }

    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Epoch (1-based) of the first strict maximum of the dev metric.
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in self.records.iter().enumerate() {
            if best.is_none_or(|(_, m)| r.dev_metric > m) {
                best = Some((i + 1, r.dev_metric));
            }
        }
        best.map(|(e, _)| e)
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.best_epoch().map(|e| self.records[e - 1].dev_metric)
    }

    /// `epoch<TAB>train_loss<TAB>dev_metric` lines under a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tdev_metric\n");
        for (i, r) in self.records.iter().enumerate() {
            out.push_str(&format!("{}\t{:.6}\t{:.6}\n", i + 1, r.train_loss, r.dev_metric));
        }
        out
    }
}

/// True iff the best dev metric so far is at least `patience` epochs older
/// than the latest epoch. Ties are not improvements.
pub fn should_stop(history: &TrainingHistory, patience: usize) -> Result<bool, NeuralError> {
    if patience == 0 {
        return Err(NeuralError::InvalidSpec("patience must be >= 1".into()));
    }
    let best = history.best_epoch().ok_or(NeuralError::EmptyHistory)?;
    Ok(history.len() - best >= patience)
}

/// Where a run writes `epoch_{k}/` checkpoints and its `best` marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointDir {
    pub root: PathBuf,
    pub run_id: String,
}

impl CheckpointDir {
    pub fn new(root: impl Into<PathBuf>, run_id: impl Into<String>) -> Self {
        CheckpointDir {
            root: root.into(),
            run_id: run_id.into(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.root.join(&self.run_id)
    }

    pub fn epoch_dir(&self, epoch: usize) -> PathBuf {
        self.run_dir().join(format!("epoch_{epoch}"))
    }

    pub fn best_marker(&self) -> PathBuf {
        self.run_dir().join("best")
    }

    /// Parses the `best` marker: `<epoch> <metric>`.
    pub fn read_best(&self) -> Result<(usize, f64), NeuralError> {
        let path = self.best_marker();
        let raw = fs::read_to_string(&path).map_err(io_err(&path))?;
        let bad = || NeuralError::BadCheckpoint {
            path: path.clone(),
            reason: format!("malformed best marker `{}`", raw.trim()),
        };
        let mut it = raw.split_whitespace();
        let epoch = it.next().and_then(|e| e.parse().ok()).ok_or_else(bad)?;
        let metric = it.next().and_then(|m| m.parse().ok()).ok_or_else(bad)?;
        Ok((epoch, metric))
    }
}

/// Options shared by both trainers.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoints: Option<CheckpointDir>,
    /// Per-class loss weights, indexed like the model's label list.
    pub class_weights: Option<crate::rebalance::ClassWeights>,
}

pub(crate) trait Checkpoint {
    /// Every trainable parameter store of the model.
    fn stores(&self) -> Vec<&ParamStore>;
    fn save(&self, dir: &Path) -> Result<(), NeuralError>;

    fn snapshot(&self) -> Result<Vec<Vec<(String, candle_core::Tensor)>>, NeuralError> {
        self.stores().iter().map(|s| Ok(s.snapshot()?)).collect()
    }

    fn restore(&self, snapshot: &[Vec<(String, candle_core::Tensor)>]) -> Result<(), NeuralError> {
        for (store, snap) in self.stores().iter().zip(snapshot) {
            store.restore(snap)?;
        }
        Ok(())
    }
}

/// Runs epochs until `should_stop` fires or `max_epochs` is reached, keeps
/// the best-dev parameters in memory, and restores them before returning.
pub(crate) fn early_stopping_loop<M: Checkpoint>(
    model: &M,
    max_epochs: usize,
    patience: usize,
    checkpoints: Option<&CheckpointDir>,
    mut epoch: impl FnMut(usize) -> Result<f64, NeuralError>,
    mut dev_metric: impl FnMut() -> Result<f64, NeuralError>,
) -> Result<TrainingHistory, NeuralError> {
    let mut history = TrainingHistory::new();
    let mut best = None;
    for k in 1..=max_epochs {
        let train_loss = epoch(k)?;
        let metric = dev_metric()?;
        let improved = history.best_metric().is_none_or(|b| metric > b);
        history.push(EpochRecord {
            train_loss,
            dev_metric: metric,
        });
        log::info!("epoch {k}: train loss {train_loss:.4}, dev {metric:.4}");
        if let Some(ck) = checkpoints {
            model.save(&ck.epoch_dir(k))?;
        }
        if improved {
            best = Some(model.snapshot()?);
            if let Some(ck) = checkpoints {
                let path = ck.best_marker();
                fs::write(&path, format!("{k} {metric:.6}\n")).map_err(io_err(&path))?;
            }
        }
        if should_stop(&history, patience)? {
            break;
        }
    }
    if let Some(snapshot) = best {
        model.restore(&snapshot)?;
    }
    Ok(history)
}

/// Sorted distinct labels of a training set, checked against the head size.
pub(crate) fn label_space(labels: &[Label], num_classes: usize) -> Result<Vec<Label>, NeuralError> {
    let mut space = labels.to_vec();
    space.sort_unstable();
    space.dedup();
    if space.is_empty() {
        return Err(NeuralError::EmptyTrain);
    }
    if space.len() > num_classes {
        return Err(NeuralError::TooManyClasses {
            found: space.len(),
            num_classes,
        });
    }
    Ok(space)
}

/// Argmax restricted to the first `space.len()` logits.
pub(crate) fn decode(probs: &[Vec<f64>], space: &[Label]) -> Vec<Label> {
    probs
        .iter()
        .map(|row| {
            let best = (0..space.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            space[best]
        })
        .collect()
}
