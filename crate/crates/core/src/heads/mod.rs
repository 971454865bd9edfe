//! Classical classifier heads over frozen sentence embeddings, tuned by
//! grid search with weighted-F1 over stratified cross-validation folds.
//!
//! All heads accept per-example weights, so [`ClassWeights`] work with every
//! kind. Linear and MLP heads standardize features internally.

mod ensemble;
mod lbfgs;
mod linear;
mod mlp;
mod tree;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Label;
use crate::encoder::EmbeddingMatrix;
use crate::metrics::{self, MetricsError};
use crate::rebalance::ClassWeights;

pub use lbfgs::minimize;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("training labels contain a single class")]
    SingleClassTraining,
    #[error("embedding dim {got} does not match the head's {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{rows} embedding rows but {labels} labels")]
    RowCountMismatch { rows: usize, labels: usize },
    #[error("{folds} folds but class {label} has only {count} examples")]
    FoldsExceedClassCount { folds: usize, label: Label, count: usize },
    #[error("fold count {0} is outside 5..=10")]
    FoldsOutOfRange(usize),
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("{kind}: unknown hyperparameter `{key}`")]
    UnknownHyperparam { kind: HeadKind, key: String },
    #[error("{kind}: hyperparameter `{key}` {reason}")]
    InvalidHyperparam { kind: HeadKind, key: String, reason: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("head blob: {0}")]
    BadBlob(String),
    #[error("head blob carries no training fingerprint")]
    MissingFingerprint,
}

/// Hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Scalar {
    fn as_f64(&self) -> Option<f64> {
        match *self {
            Scalar::Int(v) => Some(v as f64),
            Scalar::Float(v) => Some(v),
            _ => None,
        }
    }

    fn as_count(&self) -> Option<usize> {
        match *self {
            Scalar::Int(v) if v >= 0 => Some(v as usize),
            Scalar::Float(v) if v >= 0.0 && v.fract() == 0.0 => Some(v as usize),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(v) => write!(f, "{v}"),
            Scalar::Int(v) => write!(f, "{v}"),
            Scalar::Float(v) => write!(f, "{v}"),
            Scalar::Str(v) => write!(f, "{v}"),
        }
    }
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::Float(v)
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

pub type Hyperparams = BTreeMap<String, Scalar>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    LogisticRegression,
    DecisionTree,
    Svc,
    RandomForest,
    GradientBoostedTrees,
    Mlp,
}

impl HeadKind {
    pub const ALL: [HeadKind; 6] = [
        HeadKind::LogisticRegression,
        HeadKind::DecisionTree,
        HeadKind::Svc,
        HeadKind::RandomForest,
        HeadKind::GradientBoostedTrees,
        HeadKind::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::LogisticRegression => "logistic_regression",
            HeadKind::DecisionTree => "decision_tree",
            HeadKind::Svc => "svc",
            HeadKind::RandomForest => "random_forest",
            HeadKind::GradientBoostedTrees => "gradient_boosted_trees",
            HeadKind::Mlp => "mlp",
        }
    }

    /// Name used in results tables.
    pub fn display_name(self) -> &'static str {
        match self {
            HeadKind::LogisticRegression => "Logistic Regression",
            HeadKind::DecisionTree => "Decision Trees",
            HeadKind::Svc => "SVC",
            HeadKind::RandomForest => "Random Forest",
            HeadKind::GradientBoostedTrees => "XG-Boost",
            HeadKind::Mlp => "MLP",
        }
    }

    /// Recognized hyperparameters with their defaults.
    ///
    /// A `max_depth` of 0 means unlimited.
    pub fn defaults(self) -> Hyperparams {
        let pairs: &[(&str, Scalar)] = match self {
            HeadKind::LogisticRegression | HeadKind::Svc => {
                &[("c", Scalar::Float(1.0)), ("max_iter", Scalar::Int(200))]
            }
            HeadKind::DecisionTree => &[
                ("max_depth", Scalar::Int(0)),
                ("min_samples_leaf", Scalar::Int(1)),
                ("min_samples_split", Scalar::Int(2)),
            ],
            HeadKind::RandomForest => &[
                ("n_estimators", Scalar::Int(50)),
                ("max_depth", Scalar::Int(0)),
                ("min_samples_leaf", Scalar::Int(1)),
            ],
            HeadKind::GradientBoostedTrees => &[
                ("n_estimators", Scalar::Int(50)),
                ("learning_rate", Scalar::Float(0.1)),
                ("max_depth", Scalar::Int(3)),
                ("lambda", Scalar::Float(1.0)),
            ],
            HeadKind::Mlp => &[
                ("hidden_units", Scalar::Int(64)),
                ("alpha", Scalar::Float(1e-4)),
                ("learning_rate", Scalar::Float(1e-3)),
                ("epochs", Scalar::Int(200)),
                ("batch_size", Scalar::Int(32)),
            ],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    /// Small default search grid (at most 12 points).
    pub fn default_grid(self) -> BTreeMap<String, Vec<Scalar>> {
        let f = |v: &[f64]| v.iter().map(|&x| Scalar::Float(x)).collect::<Vec<_>>();
        let i = |v: &[i64]| v.iter().map(|&x| Scalar::Int(x)).collect::<Vec<_>>();
        let mut g = BTreeMap::new();
        match self {
            HeadKind::LogisticRegression | HeadKind::Svc => {
                g.insert("c".into(), f(&[0.01, 0.1, 1.0, 10.0]));
            }
            HeadKind::DecisionTree => {
                g.insert("max_depth".into(), i(&[4, 8, 16, 0]));
                g.insert("min_samples_leaf".into(), i(&[1, 5]));
            }
            HeadKind::RandomForest => {
                g.insert("n_estimators".into(), i(&[50, 100]));
                g.insert("max_depth".into(), i(&[8, 16, 0]));
            }
            HeadKind::GradientBoostedTrees => {
                g.insert("n_estimators".into(), i(&[50, 100]));
                g.insert("learning_rate".into(), f(&[0.1, 0.3]));
            }
            HeadKind::Mlp => {
                g.insert("hidden_units".into(), i(&[64, 128]));
                g.insert("alpha".into(), f(&[1e-4, 1e-2]));
            }
        }
        g
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim().to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| format!("unknown head kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub class_weights: Option<ClassWeights>,
}

impl HeadSpec {
    pub fn new(kind: HeadKind) -> Self {
        HeadSpec {
            kind,
            hyperparams: Hyperparams::new(),
            class_weights: None,
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Scalar>) -> Self {
        self.hyperparams.insert(key.to_string(), value.into());
        self
    }

    pub fn with_class_weights(mut self, weights: ClassWeights) -> Self {
        self.class_weights = Some(weights);
        self
    }

    /// Defaults overlaid with the explicit hyperparameters.
    pub fn resolved(&self) -> Result<Hyperparams, HeadError> {
        let mut out = self.kind.defaults();
        for (k, v) in &self.hyperparams {
            match out.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => {
                    return Err(HeadError::UnknownHyperparam {
                        kind: self.kind,
                        key: k.clone(),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        let hp = self.resolved()?;
        Params::new(self.kind, &hp).map(|_| ())
    }
}

/// Typed view over resolved hyperparameters.
struct Params<'a> {
    kind: HeadKind,
    hp: &'a Hyperparams,
}

impl<'a> Params<'a> {
    fn new(kind: HeadKind, hp: &'a Hyperparams) -> Result<Self, HeadError> {
        let p = Params { kind, hp };
        for key in hp.keys() {
            match key.as_str() {
                "c" | "learning_rate" => {
                    p.positive(key)?;
                }
                "alpha" | "lambda" => {
                    p.non_negative(key)?;
                }
                "max_depth" => {
                    p.count(key)?;
                }
                _ => {
                    p.positive_count(key)?;
                }
            }
        }
        Ok(p)
    }

    fn invalid(&self, key: &str, reason: &str) -> HeadError {
        HeadError::InvalidHyperparam {
            kind: self.kind,
            key: key.to_string(),
            reason: reason.to_string(),
        }
    }

    fn float(&self, key: &str) -> Result<f64, HeadError> {
        self.hp[key]
            .as_f64()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.invalid(key, "must be a finite number"))
    }

    fn positive(&self, key: &str) -> Result<f64, HeadError> {
        self.float(key)
            .and_then(|v| if v > 0.0 { Ok(v) } else { Err(self.invalid(key, "must be > 0")) })
    }

    fn non_negative(&self, key: &str) -> Result<f64, HeadError> {
        self.float(key)
            .and_then(|v| if v >= 0.0 { Ok(v) } else { Err(self.invalid(key, "must be >= 0")) })
    }

    fn count(&self, key: &str) -> Result<usize, HeadError> {
        self.hp[key]
            .as_count()
            .ok_or_else(|| self.invalid(key, "must be a non-negative integer"))
    }

    fn positive_count(&self, key: &str) -> Result<usize, HeadError> {
        self.count(key)
            .and_then(|v| if v > 0 { Ok(v) } else { Err(self.invalid(key, "must be >= 1")) })
    }

    fn depth(&self) -> Result<Option<usize>, HeadError> {
        self.count("max_depth").map(|d| (d > 0).then_some(d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Model {
    Linear(linear::LinearModel),
    Tree(tree::Tree),
    Forest(ensemble::Forest),
    Boosted(ensemble::Boosted),
    Mlp(mlp::Mlp),
}

impl Model {
    fn scores(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Model::Linear(m) => m.scores(x),
            Model::Tree(t) => {
                let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| t.leaf_value(&r.to_vec()).to_vec()).collect();
                let k = rows.first().map_or(0, Vec::len);
                Array2::from_shape_vec((rows.len(), k), rows.concat()).expect("uniform leaf width")
            }
            Model::Forest(f) => f.scores(x),
            Model::Boosted(b) => b.scores(x),
            Model::Mlp(m) => m.scores(x),
        }
    }
}

/// A fitted head. Immutable after [`fit_head`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedHead {
    pub spec: HeadSpec,
    model: Model,
    pub label_index: Vec<Label>,
    pub dim: usize,
    pub train_fingerprint: [u8; 32],
}

fn fingerprint(x: &EmbeddingMatrix, labels: &[Label], spec: &HeadSpec, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((x.rows() as u64).to_le_bytes());
    h.update((x.dim() as u64).to_le_bytes());
    for v in x.values().iter() {
        h.update(v.to_le_bytes());
    }
    for l in labels {
        h.update([l.index() as u8]);
    }
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

pub fn fit_head(
    embeddings: &EmbeddingMatrix,
    labels: &[Label],
    spec: &HeadSpec,
    seed: u64,
) -> Result<TrainedHead, HeadError> {
    if embeddings.rows() != labels.len() {
        return Err(HeadError::RowCountMismatch {
            rows: embeddings.rows(),
            labels: labels.len(),
        });
    }
    let mut label_index: Vec<Label> = labels.to_vec();
    label_index.sort_unstable();
    label_index.dedup();
    if label_index.len() < 2 {
        return Err(HeadError::SingleClassTraining);
    }
    let hp = spec.resolved()?;
    let p = Params::new(spec.kind, &hp)?;
    let y: Vec<usize> = labels
        .iter()
        .map(|l| label_index.binary_search(l).expect("label indexed"))
        .collect();
    let weight = match &spec.class_weights {
        Some(cw) => cw.per_example(labels),
        None => vec![1.0; labels.len()],
    };
    let k = label_index.len();
    let x = embeddings.values().view();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = match spec.kind {
        HeadKind::LogisticRegression => Model::Linear(linear::fit_logistic(
            x,
            &y,
            &weight,
            k,
            p.positive("c")?,
            p.positive_count("max_iter")?,
        )),
        HeadKind::Svc => Model::Linear(linear::fit_linear_svc(
            x,
            &y,
            &weight,
            k,
            p.positive("c")?,
            p.positive_count("max_iter")?,
        )),
        HeadKind::DecisionTree => {
            let params = tree::TreeParams {
                max_depth: p.depth()?,
                min_samples_split: p.positive_count("min_samples_split")?,
                min_samples_leaf: p.positive_count("min_samples_leaf")?,
                max_features: None,
            };
            Model::Tree(tree::fit_classifier(
                x,
                &y,
                &weight,
                k,
                (0..labels.len()).collect(),
                params,
                &mut rng,
            ))
        }
        HeadKind::RandomForest => {
            let params = tree::TreeParams {
                max_depth: p.depth()?,
                min_samples_leaf: p.positive_count("min_samples_leaf")?,
                max_features: Some(((x.ncols() as f64).sqrt().ceil() as usize).max(1)),
                ..tree::TreeParams::default()
            };
            Model::Forest(ensemble::fit_forest(
                x,
                &y,
                &weight,
                k,
                p.positive_count("n_estimators")?,
                params,
                &mut rng,
            ))
        }
        HeadKind::GradientBoostedTrees => {
            let params = tree::TreeParams {
                max_depth: p.depth()?,
                ..tree::TreeParams::default()
            };
            Model::Boosted(ensemble::fit_boosted(
                x,
                &y,
                &weight,
                k,
                p.positive_count("n_estimators")?,
                p.positive("learning_rate")?,
                p.non_negative("lambda")?,
                params,
                &mut rng,
            ))
        }
        HeadKind::Mlp => {
            let params = mlp::MlpParams {
                hidden: p.positive_count("hidden_units")?,
                alpha: p.non_negative("alpha")?,
                learning_rate: p.positive("learning_rate")?,
                epochs: p.positive_count("epochs")?,
                batch_size: p.positive_count("batch_size")?,
            };
            Model::Mlp(mlp::fit_mlp(x, &y, &weight, k, params, &mut rng))
        }
    };
    Ok(TrainedHead {
        spec: spec.clone(),
        model,
        label_index,
        dim: embeddings.dim(),
        train_fingerprint: fingerprint(embeddings, labels, spec, seed),
    })
}

pub fn predict_head(head: &TrainedHead, embeddings: &EmbeddingMatrix) -> Result<Vec<Label>, HeadError> {
    if embeddings.rows() == 0 {
        return Ok(Vec::new());
    }
    if embeddings.dim() != head.dim {
        return Err(HeadError::DimMismatch {
            expected: head.dim,
            got: embeddings.dim(),
        });
    }
    let scores = head.model.scores(embeddings.values().view());
    Ok(scores
        .rows()
        .into_iter()
        .map(|r| {
            // first maximum wins, so ties resolve to the lowest label
            let best = (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b });
            head.label_index[best]
        })
        .collect())
}

const BLOB_MAGIC: &[u8; 4] = b"CCHD";
const BLOB_VERSION: u32 = 1;

impl TrainedHead {
    /// `magic | version u32 | fingerprint [32] | payload length u64 | JSON`.
    pub fn to_blob(&self) -> Vec<u8> {
        let payload = serde_json::to_vec(self).expect("head serializes");
        let mut out = Vec::with_capacity(48 + payload.len());
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&self.train_fingerprint);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_blob(raw: &[u8]) -> Result<TrainedHead, HeadError> {
        let bad = |s: &str| HeadError::BadBlob(s.to_string());
        if raw.len() < 48 || &raw[..4] != BLOB_MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(raw[4..8].try_into().expect("4 bytes"));
        if version != BLOB_VERSION {
            return Err(HeadError::BadBlob(format!("unsupported version {version}")));
        }
        let fp: [u8; 32] = raw[8..40].try_into().expect("32 bytes");
        if fp == [0; 32] {
            return Err(HeadError::MissingFingerprint);
        }
        let len = u64::from_le_bytes(raw[40..48].try_into().expect("8 bytes")) as usize;
        if raw.len() - 48 != len {
            return Err(bad("payload length mismatch"));
        }
        let head: TrainedHead =
            serde_json::from_slice(&raw[48..]).map_err(|e| HeadError::BadBlob(e.to_string()))?;
        if head.train_fingerprint != fp {
            return Err(bad("header fingerprint differs from payload"));
        }
        Ok(head)
    }

    pub fn fingerprint_hex(&self) -> String {
        hex::encode(self.train_fingerprint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchSpec {
    pub grid: BTreeMap<String, Vec<Scalar>>,
    pub folds: usize,
    pub seed: u64,
}

impl GridSearchSpec {
    pub fn new(grid: BTreeMap<String, Vec<Scalar>>, folds: usize, seed: u64) -> Self {
        GridSearchSpec { grid, folds, seed }
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if !(5..=10).contains(&self.folds) {
            return Err(HeadError::FoldsOutOfRange(self.folds));
        }
        if self.grid.is_empty() || self.grid.values().any(Vec::is_empty) {
            return Err(HeadError::EmptyGrid);
        }
        Ok(())
    }
}

/// Cartesian product of the grid in odometer order: keys in map order, the
/// last key varying fastest.
pub fn grid_points(grid: &BTreeMap<String, Vec<Scalar>>) -> Vec<Hyperparams> {
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        return Vec::new();
    }
    let mut points = vec![Hyperparams::new()];
    for (key, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.insert(key.clone(), v.clone());
                    q
                })
            })
            .collect();
    }
    points
}

/// Assigns each row to a fold. Within each class the rows are shuffled and
/// dealt round-robin, continuing the deal across classes, so every fold holds
/// `floor` or `ceil` of `n_c / folds` examples of class `c`.
pub fn stratified_folds(labels: &[Label], folds: usize, seed: u64) -> Result<Vec<usize>, HeadError> {
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if let Some((&label, rows)) = by_class.iter().find(|(_, rows)| rows.len() < folds) {
        return Err(HeadError::FoldsExceedClassCount {
            folds,
            label,
            count: rows.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    let mut next = 0;
    for rows in by_class.values_mut() {
        rows.shuffle(&mut rng);
        for &i in rows.iter() {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPointScore {
    pub hyperparams: Hyperparams,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: Hyperparams,
    pub best_score: f64,
    pub points: Vec<GridPointScore>,
    /// Number of fit-and-score calls made.
    pub evaluations: usize,
}

impl GridSearchResult {
    pub fn best_fold_scores(&self) -> &[f64] {
        self.points
            .iter()
            .find(|p| p.hyperparams == self.best)
            .map_or(&[], |p| &p.fold_scores)
    }
}

/// Index of the highest mean; the earliest point wins ties.
pub fn select_best(means: &[f64]) -> Option<usize> {
    means
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &m)| match best {
            Some((_, b)) if m <= b => best,
            _ => Some((i, m)),
        })
        .map(|(i, _)| i)
}

/// Scores every grid point by mean weighted-F1 over stratified folds. Grid
/// values override `spec.hyperparams`; each fold fit uses `gs.seed`.
pub fn grid_search(
    embeddings: &EmbeddingMatrix,
    labels: &[Label],
    spec: &HeadSpec,
    gs: &GridSearchSpec,
) -> Result<GridSearchResult, HeadError> {
    gs.validate()?;
    if embeddings.rows() != labels.len() {
        return Err(HeadError::RowCountMismatch {
            rows: embeddings.rows(),
            labels: labels.len(),
        });
    }
    let assignment = stratified_folds(labels, gs.folds, gs.seed)?;
    let split: Vec<(Vec<usize>, Vec<usize>)> = (0..gs.folds)
        .map(|f| (0..labels.len()).partition(|&i| assignment[i] != f))
        .collect();
    let mut points = Vec::new();
    let mut evaluations = 0;
    for hp in grid_points(&gs.grid) {
        let mut point_spec = spec.clone();
        point_spec.hyperparams.extend(hp.clone());
        let mut fold_scores = Vec::with_capacity(gs.folds);
        for (train, test) in &split {
            let train_labels: Vec<Label> = train.iter().map(|&i| labels[i]).collect();
            let test_labels: Vec<Label> = test.iter().map(|&i| labels[i]).collect();
            let head = fit_head(&embeddings.select(train), &train_labels, &point_spec, gs.seed)?;
            let pred = predict_head(&head, &embeddings.select(test))?;
            fold_scores.push(metrics::weighted_f1(&test_labels, &pred)?);
            evaluations += 1;
        }
        let mean = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
        points.push(GridPointScore {
            hyperparams: hp,
            fold_scores,
            mean,
        });
    }
    let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
    let best_at = select_best(&means).ok_or(HeadError::EmptyGrid)?;
    Ok(GridSearchResult {
        best: points[best_at].hyperparams.clone(),
        best_score: points[best_at].mean,
        points,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn clusters(per: usize, labels: &[Label], spread: f64, seed: u64) -> (EmbeddingMatrix, Vec<Label>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = labels.len().max(2);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (c, &l) in labels.iter().enumerate() {
            for _ in 0..per {
                let mut row: Vec<f64> = (0..d).map(|_| rng.random_range(-spread..spread)).collect();
                row[c] += 3.0;
                rows.push(row);
                y.push(l);
            }
        }
        (EmbeddingMatrix::from_rows(&rows, d).unwrap(), y)
    }

    fn accuracy(a: &[Label], b: &[Label]) -> f64 {
        a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
    }

    #[test]
    fn every_kind_fits_separable_clusters() {
        let (x, y) = clusters(12, &[Misogyny, HopeSpeech, Xenophobia], 0.5, 1);
        for kind in HeadKind::ALL {
            let spec = if kind == HeadKind::Mlp {
                HeadSpec::new(kind).with("learning_rate", 0.01)
            } else {
                HeadSpec::new(kind)
            };
            let head = fit_head(&x, &y, &spec, 3).unwrap();
            let pred = predict_head(&head, &x).unwrap();
            assert_eq!(accuracy(&pred, &y), 1.0, "{kind}");
            assert!(pred.iter().all(|l| head.label_index.contains(l)));
        }
    }

    #[test]
    fn fitting_is_deterministic_under_seed() {
        let (x, y) = clusters(10, &[Misogyny, HopeSpeech], 1.5, 2);
        let (probe, _) = clusters(5, &[Misogyny, HopeSpeech], 3.0, 9);
        for kind in HeadKind::ALL {
            let a = fit_head(&x, &y, &HeadSpec::new(kind), 7).unwrap();
            let b = fit_head(&x, &y, &HeadSpec::new(kind), 7).unwrap();
            assert_eq!(predict_head(&a, &probe).unwrap(), predict_head(&b, &probe).unwrap(), "{kind}");
        }
    }

    #[test]
    fn mlp_scores_eight_clusters_held_out() {
        let (train, ty) = clusters(20, &Label::ACTIVE, 0.8, 3);
        let (test, gold) = clusters(10, &Label::ACTIVE, 0.8, 4);
        // nearest-centroid oracle reaches 1.0 on this construction
        let centroid_pred: Vec<Label> = test
            .values()
            .rows()
            .into_iter()
            .map(|r| {
                let c = (0..8).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
                Label::ACTIVE[c]
            })
            .collect();
        assert_eq!(accuracy(&centroid_pred, &gold), 1.0);
        let head = fit_head(&train, &ty, &HeadSpec::new(HeadKind::Mlp), 0).unwrap();
        let pred = predict_head(&head, &test).unwrap();
        assert!(metrics::macro_f1(&gold, &pred).unwrap() >= 0.9);
    }

    #[test]
    fn single_class_and_dim_errors() {
        let x = EmbeddingMatrix::from_rows(&[vec![0.0], vec![1.0]], 1).unwrap();
        assert!(matches!(
            fit_head(&x, &[Misogyny, Misogyny], &HeadSpec::new(HeadKind::Svc), 0),
            Err(HeadError::SingleClassTraining)
        ));
        let head = fit_head(&x, &[Misogyny, Misandry], &HeadSpec::new(HeadKind::Svc), 0).unwrap();
        let wide = EmbeddingMatrix::from_rows(&[vec![0.0, 1.0]], 2).unwrap();
        assert!(matches!(predict_head(&head, &wide), Err(HeadError::DimMismatch { .. })));
        assert!(predict_head(&head, &EmbeddingMatrix::empty(1)).unwrap().is_empty());
    }

    #[test]
    fn unknown_or_invalid_hyperparams_are_rejected() {
        assert!(matches!(
            HeadSpec::new(HeadKind::Svc).with("depth", 3i64).validate(),
            Err(HeadError::UnknownHyperparam { .. })
        ));
        assert!(matches!(
            HeadSpec::new(HeadKind::Svc).with("c", -1.0).validate(),
            Err(HeadError::InvalidHyperparam { .. })
        ));
    }

    #[test]
    fn memorizing_tree_reproduces_training_labels_and_matches_1nn() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<Label> = (0..60).map(|_| Label::ACTIVE[rng.random_range(0..8)]).collect();
        let x = EmbeddingMatrix::from_rows(&rows, 4).unwrap();
        let head = fit_head(&x, &y, &HeadSpec::new(HeadKind::DecisionTree), 0).unwrap();
        assert_eq!(predict_head(&head, &x).unwrap(), y);
        // brute-force nearest neighbour agrees at every training coordinate
        for (i, probe) in rows.iter().enumerate() {
            let nn = (0..rows.len())
                .min_by(|&a, &b| {
                    let d = |r: &Vec<f64>| r.iter().zip(probe).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
                    d(&rows[a]).total_cmp(&d(&rows[b]))
                })
                .unwrap();
            let single = EmbeddingMatrix::from_rows(&[probe.clone()], 4).unwrap();
            assert_eq!(predict_head(&head, &single).unwrap()[0], y[nn], "row {i}");
        }
    }

    #[test]
    fn class_weights_flip_minority_region_decisions() {
        // majority spread over [0, 1], minority over [0.5, 1]: the probe at
        // 0.9 sees ~4.5x more majority mass unweighted, ~0.5x once weighted
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..90 {
            rows.push(vec![i as f64 / 89.0]);
            y.push(NoneOfTheAbove);
        }
        for i in 0..10 {
            rows.push(vec![0.5 + i as f64 / 18.0]);
            y.push(Transphobic);
        }
        let x = EmbeddingMatrix::from_rows(&rows, 1).unwrap();
        let probe = EmbeddingMatrix::from_rows(&[vec![0.9]], 1).unwrap();
        let cw = ClassWeights::from_labels(&y).unwrap();
        let kinds = [
            (HeadKind::LogisticRegression, HeadSpec::new(HeadKind::LogisticRegression)),
            (HeadKind::Svc, HeadSpec::new(HeadKind::Svc)),
            (HeadKind::DecisionTree, HeadSpec::new(HeadKind::DecisionTree).with("max_depth", 1i64)),
            (
                HeadKind::GradientBoostedTrees,
                HeadSpec::new(HeadKind::GradientBoostedTrees).with("max_depth", 1i64),
            ),
        ];
        for (kind, spec) in kinds {
            let plain = fit_head(&x, &y, &spec, 0).unwrap();
            let weighted = fit_head(&x, &y, &spec.clone().with_class_weights(cw.clone()), 0).unwrap();
            assert_eq!(predict_head(&plain, &probe).unwrap(), vec![NoneOfTheAbove], "{kind}");
            assert_eq!(predict_head(&weighted, &probe).unwrap(), vec![Transphobic], "{kind}");
        }
    }

    #[test]
    fn blob_round_trip_and_fingerprint_guard() {
        let (x, y) = clusters(6, &[Misogyny, HopeSpeech], 0.5, 1);
        let head = fit_head(&x, &y, &HeadSpec::new(HeadKind::RandomForest), 1).unwrap();
        let blob = head.to_blob();
        assert_eq!(TrainedHead::from_blob(&blob).unwrap(), head);
        let mut zeroed = blob.clone();
        zeroed[8..40].fill(0);
        assert!(matches!(TrainedHead::from_blob(&zeroed), Err(HeadError::MissingFingerprint)));
        assert!(matches!(TrainedHead::from_blob(&blob[..20]), Err(HeadError::BadBlob(_))));
    }

    #[test]
    fn grid_points_enumerate_in_odometer_order() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), vec![Scalar::Int(1), Scalar::Int(2)]);
        g.insert("b".to_string(), vec![Scalar::Int(10), Scalar::Int(20), Scalar::Int(30)]);
        let pts = grid_points(&g);
        assert_eq!(pts.len(), 6);
        let flat: Vec<(String, String)> = pts.iter().map(|p| (p["a"].to_string(), p["b"].to_string())).collect();
        assert_eq!(flat[0], ("1".into(), "10".into()));
        assert_eq!(flat[1], ("1".into(), "20".into()));
        assert_eq!(flat[3], ("2".into(), "10".into()));
        for kind in HeadKind::ALL {
            let n = grid_points(&kind.default_grid()).len();
            assert!((1..=12).contains(&n), "{kind}: {n}");
        }
    }

    #[test]
    fn grid_search_counts_calls_and_handles_singletons() {
        let (x, y) = clusters(10, &[Misogyny, HopeSpeech, Misandry], 1.0, 3);
        let mut grid = BTreeMap::new();
        grid.insert("c".to_string(), vec![Scalar::Float(1.0)]);
        let gs = GridSearchSpec::new(grid.clone(), 5, 0);
        let r = grid_search(&x, &y, &HeadSpec::new(HeadKind::LogisticRegression), &gs).unwrap();
        assert_eq!(r.evaluations, 5);
        assert_eq!(r.best["c"], Scalar::Float(1.0));
        let mean = r.points[0].fold_scores.iter().sum::<f64>() / 5.0;
        assert!((r.best_score - mean).abs() < 1e-15);

        grid.insert("c".to_string(), vec![Scalar::Float(0.1), Scalar::Float(1.0), Scalar::Float(10.0)]);
        let gs = GridSearchSpec::new(grid, 6, 0);
        let r = grid_search(&x, &y, &HeadSpec::new(HeadKind::Svc), &gs).unwrap();
        assert_eq!(r.evaluations, 18);
    }

    #[test]
    fn grid_search_rejects_bad_specs() {
        let (x, y) = clusters(4, &[Misogyny, HopeSpeech], 1.0, 3);
        let spec = HeadSpec::new(HeadKind::Svc);
        let grid = HeadKind::Svc.default_grid();
        assert!(matches!(
            grid_search(&x, &y, &spec, &GridSearchSpec::new(grid.clone(), 5, 0)),
            Err(HeadError::FoldsExceedClassCount { count: 4, .. })
        ));
        assert!(matches!(
            grid_search(&x, &y, &spec, &GridSearchSpec::new(grid, 4, 0)),
            Err(HeadError::FoldsOutOfRange(4))
        ));
        assert!(matches!(
            grid_search(&x, &y, &spec, &GridSearchSpec::new(BTreeMap::new(), 5, 0)),
            Err(HeadError::EmptyGrid)
        ));
    }

    #[test]
    fn dominating_point_wins() {
        // a depth-1 stump cannot separate three classes; the full tree can
        let (x, y) = clusters(10, &[Misogyny, HopeSpeech, Misandry], 1.2, 8);
        let mut grid = BTreeMap::new();
        grid.insert("max_depth".to_string(), vec![Scalar::Int(1), Scalar::Int(0)]);
        let r = grid_search(
            &x,
            &y,
            &HeadSpec::new(HeadKind::DecisionTree),
            &GridSearchSpec::new(grid, 5, 1),
        )
        .unwrap();
        let (stump, full) = (&r.points[0], &r.points[1]);
        assert!(stump.fold_scores.iter().zip(&full.fold_scores).all(|(s, f)| f > s));
        assert_eq!(r.best["max_depth"], Scalar::Int(0));
    }

    proptest! {
        #[test]
        fn stratified_folds_balance_every_class(
            counts in proptest::collection::vec(5usize..40, 2..6),
            folds in 5usize..=10,
            seed in any::<u64>(),
        ) {
            prop_assume!(counts.iter().all(|&c| c >= folds));
            let labels: Vec<Label> = counts
                .iter()
                .enumerate()
                .flat_map(|(c, &n)| std::iter::repeat_n(Label::ACTIVE[c], n))
                .collect();
            let a = stratified_folds(&labels, folds, seed).unwrap();
            for (c, &n) in counts.iter().enumerate() {
                for f in 0..folds {
                    let in_fold = labels.iter().zip(&a).filter(|(l, &g)| **l == Label::ACTIVE[c] && g == f).count();
                    let ideal = n as f64 / folds as f64;
                    prop_assert!((in_fold as f64 - ideal).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn selection_is_scale_invariant(
            means in proptest::collection::vec(0.0f64..1.0, 1..12),
            exp in -8i32..8,
        ) {
            // powers of two scale exactly, so no ties are introduced by rounding
            let scale = 2f64.powi(exp);
            let scaled: Vec<f64> = means.iter().map(|m| m * scale).collect();
            prop_assert_eq!(select_best(&means), select_best(&scaled));
        }
    }
}
