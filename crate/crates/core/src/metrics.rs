//! Confusion-matrix evaluation: per-class precision/recall/F1, macro and
//! weighted F1, and results grids laid out by model family and dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, LanguageTag};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{gold} gold labels but {pred} predictions")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("label {0} is not in the evaluation label list")]
    UnknownLabel(Label),
    #[error("nothing to evaluate")]
    EmptyMatrix,
    #[error("malformed report record: {0}")]
    BadRecord(String),
}

/// Rows are gold labels, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: Vec<Label>,
    counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn get(&self, gold: Label, pred: Label) -> usize {
        let pos = |l| self.labels.iter().position(|&x| x == l);
        match (pos(gold), pos(pred)) {
            (Some(g), Some(p)) => self.counts[g][p],
            _ => 0,
        }
    }
}

pub fn confusion(gold: &[Label], pred: &[Label], labels: &[Label]) -> Result<ConfusionMatrix, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricsError::EmptyMatrix);
    }
    let k = labels.len();
    let mut slot = [usize::MAX; 9];
    for (i, l) in labels.iter().enumerate() {
        slot[l.index()] = i;
    }
    let lookup = |l: Label| match slot[l.index()] {
        usize::MAX => Err(MetricsError::UnknownLabel(l)),
        i => Ok(i),
    };
    let mut counts = vec![vec![0; k]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        counts[lookup(g)?][lookup(p)?] += 1;
    }
    Ok(ConfusionMatrix {
        labels: labels.to_vec(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Grouping used for the "Model Type" column of results grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultFamily {
    Ensemble,
    Rnn,
    Transformer,
}

impl ResultFamily {
    pub fn title(self) -> &'static str {
        match self {
            ResultFamily::Ensemble => "Ensemble Models",
            ResultFamily::Rnn => "RNN Models",
            ResultFamily::Transformer => "Transformer Models",
        }
    }

    fn key(self) -> &'static str {
        match self {
            ResultFamily::Ensemble => "ensemble",
            ResultFamily::Rnn => "rnn",
            ResultFamily::Transformer => "transformer",
        }
    }
}

impl FromStr for ResultFamily {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ensemble" => Ok(ResultFamily::Ensemble),
            "rnn" => Ok(ResultFamily::Rnn),
            "transformer" => Ok(ResultFamily::Transformer),
            other => Err(MetricsError::BadRecord(format!("unknown family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model: String,
    pub family: ResultFamily,
    pub dataset: LanguageTag,
    pub seed: u64,
}

impl Default for RunMeta {
    fn default() -> Self {
        RunMeta {
            model: "unnamed".into(),
            family: ResultFamily::Ensemble,
            dataset: LanguageTag::Synthetic,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<Label, ClassScores>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub run_meta: RunMeta,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores a confusion matrix. Zero denominators score 0; the macro average
/// runs over classes with gold support.
pub fn report(cm: &ConfusionMatrix) -> Result<EvalReport, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let k = cm.labels.len();
    let mut per_class = BTreeMap::new();
    for (i, &label) in cm.labels.iter().enumerate() {
        let tp = cm.counts[i][i];
        let support: usize = cm.counts[i].iter().sum();
        let predicted: usize = (0..k).map(|r| cm.counts[r][i]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.insert(
            label,
            ClassScores {
                precision,
                recall,
                f1,
                support,
            },
        );
    }
    let supported: Vec<&ClassScores> = per_class.values().filter(|s| s.support > 0).collect();
    let macro_f1 = supported.iter().map(|s| s.f1).sum::<f64>() / supported.len() as f64;
    let total: usize = supported.iter().map(|s| s.support).sum();
    let weighted_f1 = supported.iter().map(|s| s.support as f64 * s.f1).sum::<f64>() / total as f64;
    Ok(EvalReport {
        per_class,
        macro_f1,
        weighted_f1,
        run_meta: RunMeta::default(),
    })
}

/// Labels occurring in either vector, in taxonomy order.
pub fn observed_labels(gold: &[Label], pred: &[Label]) -> Vec<Label> {
    let mut seen = [false; 9];
    for l in gold.iter().chain(pred) {
        seen[l.index()] = true;
    }
    Label::ALL.into_iter().filter(|l| seen[l.index()]).collect()
}

/// Confusion matrix and report over the labels that occur in either vector.
pub fn evaluate(gold: &[Label], pred: &[Label]) -> Result<EvalReport, MetricsError> {
    report(&confusion(gold, pred, &observed_labels(gold, pred))?)
}

pub fn weighted_f1(gold: &[Label], pred: &[Label]) -> Result<f64, MetricsError> {
    evaluate(gold, pred).map(|r| r.weighted_f1)
}

pub fn macro_f1(gold: &[Label], pred: &[Label]) -> Result<f64, MetricsError> {
    evaluate(gold, pred).map(|r| r.macro_f1)
}

impl EvalReport {
    pub fn with_meta(mut self, meta: RunMeta) -> Self {
        self.run_meta = meta;
        self
    }

    /// Line-oriented `key=value` record; floats use shortest round-trip form.
    pub fn to_record(&self) -> String {
        let m = &self.run_meta;
        let mut out = String::new();
        let _ = writeln!(out, "model={}", m.model);
        let _ = writeln!(out, "family={}", m.family.key());
        let _ = writeln!(out, "dataset={}", m.dataset.as_str());
        let _ = writeln!(out, "seed={}", m.seed);
        let _ = writeln!(out, "macro_f1={}", self.macro_f1);
        let _ = writeln!(out, "weighted_f1={}", self.weighted_f1);
        for (label, s) in &self.per_class {
            let _ = writeln!(
                out,
                "class={}\tprecision={}\trecall={}\tf1={}\tsupport={}",
                label, s.precision, s.recall, s.f1, s.support
            );
        }
        out
    }

    pub fn from_record(raw: &str) -> Result<EvalReport, MetricsError> {
        let bad = |what: &str| MetricsError::BadRecord(what.to_string());
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut per_class = BTreeMap::new();
        for line in raw.lines().filter(|l| !l.trim().is_empty()) {
            if line.starts_with("class=") {
                let mut parts: BTreeMap<&str, &str> = BTreeMap::new();
                for kv in line.split('\t') {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad(line))?;
                    parts.insert(k, v);
                }
                let get = |k: &str| parts.get(k).copied().ok_or_else(|| bad(line));
                let num = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad(line));
                let label: Label = get("class")?.parse().map_err(|_| bad(line))?;
                per_class.insert(
                    label,
                    ClassScores {
                        precision: num("precision")?,
                        recall: num("recall")?,
                        f1: num("f1")?,
                        support: get("support")?.parse().map_err(|_| bad(line))?,
                    },
                );
            } else {
                let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
                fields.insert(k, v);
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(k));
        let num = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad(k));
        Ok(EvalReport {
            per_class,
            macro_f1: num("macro_f1")?,
            weighted_f1: num("weighted_f1")?,
            run_meta: RunMeta {
                model: get("model")?.to_string(),
                family: get("family")?.parse()?,
                dataset: get("dataset")?.parse().map_err(|e: String| bad(&e))?,
                seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            },
        })
    }
}

/// A rendered results table: aligned text plus comma-separated rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultsGrid {
    pub text: String,
    pub csv: String,
}

struct GridRow {
    family: ResultFamily,
    model: String,
    cells: BTreeMap<LanguageTag, (f64, f64)>,
}

fn title(tag: LanguageTag) -> &'static str {
    match tag {
        LanguageTag::Tamil => "Tamil",
        LanguageTag::Codemix => "Codemix",
        LanguageTag::Synthetic => "Synthetic",
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Lays reports out as one row per (family, model) and one `macro | weighted`
/// cell per dataset, with values rounded to two decimals. Tamil and Codemix
/// columns are always present; Synthetic appears when used.
pub fn results_grid(reports: &[EvalReport]) -> ResultsGrid {
    let mut rows: Vec<GridRow> = Vec::new();
    for r in reports {
        let m = &r.run_meta;
        let pos = rows.iter().position(|g| g.family == m.family && g.model == m.model);
        let row = match pos {
            Some(i) => &mut rows[i],
            None => {
                rows.push(GridRow {
                    family: m.family,
                    model: m.model.clone(),
                    cells: BTreeMap::new(),
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.cells.insert(m.dataset, (r.macro_f1, r.weighted_f1));
    }
    rows.sort_by_key(|g| g.family);

    let mut datasets = vec![LanguageTag::Tamil, LanguageTag::Codemix];
    if rows.iter().any(|g| g.cells.contains_key(&LanguageTag::Synthetic)) {
        datasets.push(LanguageTag::Synthetic);
    }

    let sub = "macro f1 | weighted f1";
    let cell = |g: &GridRow, d: LanguageTag| match g.cells.get(&d) {
        Some((m, w)) => format!("{m:.2} | {w:.2}"),
        None => "- | -".to_string(),
    };
    let family_w = rows
        .iter()
        .map(|g| g.family.title().len())
        .chain(["Model Type".len()])
        .max()
        .unwrap_or(0);
    let model_w = rows
        .iter()
        .map(|g| g.model.chars().count())
        .chain(["Classifier".len()])
        .max()
        .unwrap_or(0);
    let cell_w = sub.len();

    let mut text = String::new();
    let mut line = format!("{:<family_w$}  {:<model_w$}", "Model Type", "Classifier");
    for &d in &datasets {
        let _ = write!(line, "  {:<cell_w$}", title(d));
    }
    text.push_str(line.trim_end());
    text.push('\n');
    let mut line = format!("{:<family_w$}  {:<model_w$}", "", "");
    for _ in &datasets {
        let _ = write!(line, "  {sub:<cell_w$}");
    }
    text.push_str(line.trim_end());
    text.push('\n');
    let mut previous = None;
    for g in &rows {
        let fam = if previous == Some(g.family) { "" } else { g.family.title() };
        previous = Some(g.family);
        let pad = model_w - g.model.chars().count();
        let mut line = format!("{fam:<family_w$}  {}{}", g.model, " ".repeat(pad));
        for &d in &datasets {
            let _ = write!(line, "  {:<cell_w$}", cell(g, d));
        }
        text.push_str(line.trim_end());
        text.push('\n');
    }

    let mut csv = String::from("model_type,classifier");
    for &d in &datasets {
        let _ = write!(csv, ",{0}_macro_f1,{0}_weighted_f1", d.as_str());
    }
    csv.push('\n');
    for g in &rows {
        let _ = write!(csv, "{},{}", csv_field(g.family.title()), csv_field(&g.model));
        for &d in &datasets {
            match g.cells.get(&d) {
                Some((m, w)) => {
                    let _ = write!(csv, ",{m:.2},{w:.2}");
                }
                None => csv.push_str(",,"),
            }
        }
        csv.push('\n');
    }
    ResultsGrid { text, csv }
}
