//! Batch commands driven by a [`RunConfig`].
//!
//! Layout under `output_dir`:
//!
//! ```text
//! prepared/<prepare_hash12>/{train,dev,test}.tsv, distribution.txt, prepare.json
//! runs/<run_id>/manifest.json, timing.json, dev_predictions.tsv, ...
//! checkpoints/<run_id>/epoch_<k>/, best
//! reports/<run_id>_<split>.record, results_grid.txt, results_grid.csv
//! ```

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    apply_override, CleaningSection, DataSection, EncoderSection, HeadSection, ModelSection, RebalanceSection,
    RunConfig, HASHING_ENCODER_ID,
};

use crate::corpus::{self, Corpus, Label, LanguageTag, Split};
use crate::encoder::{self, EmbeddingMatrix, EncoderBackend, PretrainedBackend, Vocab};
use crate::heads::{self, GridSearchResult, HeadKind, TrainedHead};
use crate::metrics::{self, EvalReport, ResultFamily, RunMeta};
use crate::neural::{self, CheckpointDir, LstmModel, SequenceClassifier, TrainOptions, TrainingHistory};
use crate::preprocess::{self, CleaningConfig};
use crate::rebalance::{self, ClassWeights, Strategy};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: `{field}`: {message}", path.display())]
    Config { path: PathBuf, field: String, message: String },
    #[error("{}: {reason}", artifact.display())]
    Incompatible { artifact: PathBuf, reason: String },
    #[error("fingerprint mismatch: artifact expects {artifact_dim}-dim embeddings, configured encoder yields {encoder_dim}")]
    FingerprintMismatch { artifact_dim: usize, encoder_dim: usize },
    #[error("{context}: {source}")]
    Runtime {
        context: String,
        #[source]
        source: BoxError,
    },
}

impl CliError {
    pub fn config(path: &Path, field: &str, message: impl Into<String>) -> CliError {
        CliError::Config {
            path: path.to_path_buf(),
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// 2 for configuration and compatibility problems, 3 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime { .. } => 3,
            _ => 2,
        }
    }
}

fn ctx<E: Into<BoxError>>(context: impl Into<String>) -> impl FnOnce(E) -> CliError {
    let context = context.into();
    move |e| CliError::Runtime {
        context,
        source: e.into(),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(ctx(format!("creating {}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(ctx(format!("writing {}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(ctx(format!("encoding {}", path.display())))?;
    s.push('\n');
    write_file(path, s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let raw = fs::read_to_string(path).map_err(ctx(format!("reading {}", path.display())))?;
    serde_json::from_str(&raw).map_err(ctx(format!("parsing {}", path.display())))
}

/// Removes a directory this tool owns so reruns never see stale files.
fn reset_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(ctx(format!("clearing {}", dir.display())))?;
    }
    fs::create_dir_all(dir).map_err(ctx(format!("creating {}", dir.display())))
}

/// Keyed by the prepare hash so configs that clean differently can share an
/// output directory.
pub fn prepared_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    Ok(cfg.output_dir().join("prepared").join(&cfg.prepare_hash()?[..12]))
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir().join("runs").join(cfg.run_id())
}

fn language(cfg: &RunConfig) -> LanguageTag {
    cfg.language().expect("validated config has a language")
}

/// Cleans one text. A text that cleans to nothing keeps its
/// whitespace-normalized form so every row survives.
fn clean_text(text: &str, cleaning: &CleaningConfig) -> String {
    let cleaned = preprocess::clean(text, cleaning);
    if cleaned.is_empty() {
        preprocess::normalize_whitespace(text)
    } else {
        cleaned
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PrepareRecord {
    prepare_hash: String,
    splits: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    pub dir: PathBuf,
    /// Cleaned splits, in train, dev, test order.
    pub splits: Vec<(Split, Corpus)>,
    pub distribution: corpus::DistributionStats,
}

/// Loads each configured split, cleans it for the model family and writes
/// `<prepared_dir>/<split>.tsv` plus a training-split distribution summary.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareSummary, CliError> {
    let cleaning = cfg.cleaning_config()?;
    let lang = language(cfg);
    let dir = prepared_dir(cfg)?;
    let mut splits = Vec::new();
    for (split, path) in [
        (Split::Train, &cfg.data.train),
        (Split::Dev, &cfg.data.dev),
        (Split::Test, &cfg.data.test),
    ] {
        let Some(path) = path else { continue };
        let path = cfg.resolve(path);
        let raw = corpus::load_tsv(&path, split, lang).map_err(ctx(format!("loading {}", path.display())))?;
        let cleaned = raw.map_texts(|t| clean_text(t, &cleaning));
        let out = dir.join(format!("{}.tsv", split.as_str()));
        fs::create_dir_all(&dir).map_err(ctx(format!("creating {}", dir.display())))?;
        corpus::write_tsv(&cleaned, &out).map_err(ctx(format!("writing {}", out.display())))?;
        splits.push((split, cleaned));
    }
    let distribution = corpus::label_distribution(&splits[0].1).map_err(ctx("training split"))?;
    write_file(&dir.join("distribution.txt"), distribution.render())?;
    let record = PrepareRecord {
        prepare_hash: cfg.prepare_hash()?,
        splits: splits.iter().map(|(s, _)| s.as_str().to_string()).collect(),
    };
    write_json(&dir.join("prepare.json"), &record)?;
    Ok(PrepareSummary {
        dir,
        splits,
        distribution,
    })
}

/// Loads a prepared split, refusing data prepared under another config.
pub fn load_prepared(cfg: &RunConfig, split: Split) -> Result<Corpus, CliError> {
    let dir = prepared_dir(cfg)?;
    let record_path = dir.join("prepare.json");
    if !record_path.is_file() {
        return Err(cfg_err(cfg, "prepared", format!("{} not found; run `prepare` first", record_path.display())));
    }
    let record: PrepareRecord = read_json(&record_path)?;
    if record.prepare_hash != cfg.prepare_hash()? {
        return Err(CliError::Incompatible {
            artifact: dir,
            reason: "prepared data came from different data or cleaning settings; rerun `prepare`".into(),
        });
    }
    let path = dir.join(format!("{}.tsv", split.as_str()));
    if !path.is_file() {
        return Err(cfg_err(cfg, &format!("data.{}", split.as_str()), "split was not configured when preparing"));
    }
    corpus::load_tsv(&path, split, language(cfg)).map_err(ctx(format!("loading {}", path.display())))
}

fn cfg_err(cfg: &RunConfig, field: &str, message: impl Into<String>) -> CliError {
    CliError::config(cfg.source(), field, message)
}

/// Embedding backend named by the `[encoder]` section.
pub fn open_backend(cfg: &RunConfig) -> Result<Box<dyn EncoderBackend>, CliError> {
    let e = &cfg.encoder;
    if e.id == HASHING_ENCODER_ID {
        return Ok(Box::new(encoder::test_backend(e.dim, e.seed)));
    }
    let backend = PretrainedBackend::load(&cfg.encoder_location(), e.pooling, e.max_len).map_err(ctx("opening encoder"))?;
    Ok(Box::new(backend))
}

fn embed(cfg: &RunConfig, texts: &[String], backend: &dyn EncoderBackend) -> Result<EmbeddingMatrix, CliError> {
    match &cfg.encoder.cache {
        Some(dir) => encoder::encode_cached(texts, backend, &cfg.resolve(dir))
            .map(|(m, _)| m)
            .map_err(ctx("encoding texts")),
        None => encoder::encode(texts, backend).map_err(ctx("encoding texts")),
    }
}

/// What a run directory holds, and enough to check it against a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub kind: String,
    pub model: String,
    pub family: ResultFamily,
    pub seed: u64,
    pub config_hash: String,
    pub compat_hash: String,
    pub encoder_id: Option<String>,
    pub encoder_dim: Option<usize>,
    pub artifacts: Vec<String>,
    pub dev_macro_f1: f64,
    pub dev_weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Timing {
    load_seconds: f64,
    train_seconds: f64,
    total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    /// Dev predictions in dev-split order.
    pub dev_predictions: Vec<Label>,
    pub dev_report: EvalReport,
    pub history: Option<TrainingHistory>,
    pub grid: Option<GridSearchResult>,
}

fn model_name(section: &ModelSection) -> String {
    match section {
        ModelSection::Head(h) => h.kind.display_name().to_string(),
        ModelSection::Lstm(_) => "LSTM".to_string(),
        ModelSection::Finetune(f) => {
            let id = f.encoder_id.trim_end_matches('/');
            id.rsplit('/').next().unwrap_or(id).to_string()
        }
    }
}

fn result_family(section: &ModelSection) -> ResultFamily {
    match section {
        ModelSection::Head(_) => ResultFamily::Ensemble,
        ModelSection::Lstm(_) => ResultFamily::Rnn,
        ModelSection::Finetune(_) => ResultFamily::Transformer,
    }
}

fn run_meta(cfg: &RunConfig, section: &ModelSection) -> RunMeta {
    RunMeta {
        model: model_name(section),
        family: result_family(section),
        dataset: language(cfg),
        seed: cfg.seed,
    }
}

fn predictions_tsv(corpus: &Corpus, predicted: &[Label]) -> String {
    let mut out = String::new();
    for (e, p) in corpus.examples().iter().zip(predicted) {
        let _ = writeln!(out, "{}\t{}\t{}", e.text, e.label, p);
    }
    out
}

/// Trains the configured model on prepared data and writes its run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let started = Instant::now();
    let section = cfg.model_section()?;
    let train = load_prepared(cfg, Split::Train)?;
    let dev = load_prepared(cfg, Split::Dev)?;
    let plan = cfg.rebalance_plan()?;
    let train = rebalance::resample_rows(&train, &plan).map_err(ctx("rebalancing training rows"))?;
    let run_id = cfg.run_id();
    let dir = run_dir(cfg);
    reset_dir(&dir)?;
    let loaded = started.elapsed().as_secs_f64();

    let mut artifacts = vec!["manifest.json".to_string(), "dev_predictions.tsv".to_string()];
    let mut history = None;
    let mut grid = None;
    let mut encoder_id = None;
    let mut encoder_dim = None;

    let dev_texts = dev.texts();
    let dev_predictions = match section {
        ModelSection::Head(h) => {
            let backend = open_backend(cfg)?;
            let mut emb = embed(cfg, &train.texts(), backend.as_ref())?;
            let mut labels = train.labels();
            if plan.strategy == Strategy::Smote {
                let out = rebalance::smote(&emb, &labels, &plan).map_err(ctx("smote"))?;
                emb = out.embeddings;
                labels = out.labels;
            }
            let mut spec = h.head_spec();
            if plan.strategy == Strategy::ClassWeights {
                spec = spec.with_class_weights(ClassWeights::from_labels(&labels).map_err(ctx("class weights"))?);
            }
            let result = heads::grid_search(&emb, &labels, &spec, &h.grid_spec(cfg.seed)).map_err(ctx("grid search"))?;
            spec.hyperparams.extend(result.best.clone());
            let head = heads::fit_head(&emb, &labels, &spec, cfg.seed).map_err(ctx("fitting head"))?;
            write_file(&dir.join("head.bin"), head.to_blob())?;
            write_json(&dir.join("grid_search.json"), &result)?;
            artifacts.extend(["head.bin".into(), "grid_search.json".into()]);
            encoder_id = Some(backend.id());
            encoder_dim = Some(backend.dim());
            grid = Some(result);
            let dev_emb = embed(cfg, &dev_texts, backend.as_ref())?;
            heads::predict_head(&head, &dev_emb).map_err(ctx("predicting dev"))?
        }
        ModelSection::Lstm(spec) => {
            let vocab = encoder::build_vocab(&train, spec.vocab_size).map_err(ctx("building vocabulary"))?;
            let opts = train_options(cfg, &train, &run_id)?;
            let (model, hist) =
                neural::train_lstm(&train, &vocab, spec, &dev, cfg.seed, &opts).map_err(ctx("training LSTM"))?;
            model.save(&dir.join("model")).map_err(ctx("saving model"))?;
            vocab.save(&dir.join("vocab.txt")).map_err(ctx("saving vocabulary"))?;
            write_file(&dir.join("history.tsv"), hist.to_tsv())?;
            artifacts.extend(["model".into(), "vocab.txt".into(), "history.tsv".into()]);
            history = Some(hist);
            model.predict(&dev_texts, &vocab).map_err(ctx("predicting dev"))?
        }
        ModelSection::Finetune(_) => {
            let spec = cfg.finetune_spec().expect("finetune section");
            let opts = train_options(cfg, &train, &run_id)?;
            let (model, hist) = neural::finetune(&train, &dev, &spec, &opts).map_err(ctx("fine-tuning"))?;
            model.save(&dir.join("model")).map_err(ctx("saving model"))?;
            write_file(&dir.join("history.tsv"), hist.to_tsv())?;
            artifacts.extend(["model".into(), "history.tsv".into()]);
            history = Some(hist);
            model.predict(&dev_texts).map_err(ctx("predicting dev"))?
        }
    };
    let trained = started.elapsed().as_secs_f64();

    let dev_report = metrics::evaluate(&dev.labels(), &dev_predictions)
        .map_err(ctx("scoring dev"))?
        .with_meta(run_meta(cfg, &section));
    write_file(&dir.join("dev_predictions.tsv"), predictions_tsv(&dev, &dev_predictions))?;
    artifacts.sort();
    let manifest = RunManifest {
        run_id,
        kind: section.kind().to_string(),
        model: model_name(&section),
        family: result_family(&section),
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        compat_hash: cfg.compat_hash()?,
        encoder_id,
        encoder_dim,
        artifacts,
        dev_macro_f1: dev_report.macro_f1,
        dev_weighted_f1: dev_report.weighted_f1,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    let total = started.elapsed().as_secs_f64();
    write_json(
        &dir.join("timing.json"),
        &Timing {
            load_seconds: loaded,
            train_seconds: trained - loaded,
            total_seconds: total,
        },
    )?;
    log::info!(
        "{}: dev macro-F1 {:.4}, weighted-F1 {:.4}",
        manifest.run_id,
        manifest.dev_macro_f1,
        manifest.dev_weighted_f1
    );
    Ok(TrainSummary {
        run_dir: dir,
        manifest,
        dev_predictions,
        dev_report,
        history,
        grid,
    })
}

fn train_options(cfg: &RunConfig, train: &Corpus, run_id: &str) -> Result<TrainOptions, CliError> {
    let checkpoints = CheckpointDir::new(cfg.output_dir().join("checkpoints"), run_id);
    reset_dir(&checkpoints.run_dir())?;
    let class_weights = match cfg.rebalance.strategy {
        Strategy::ClassWeights => Some(rebalance::class_weights(train).map_err(ctx("class weights"))?),
        _ => None,
    };
    Ok(TrainOptions {
        checkpoints: Some(checkpoints),
        class_weights,
    })
}

/// A trained model loaded from a run directory.
pub enum LoadedModel {
    Head {
        head: TrainedHead,
        backend: Box<dyn EncoderBackend>,
    },
    Lstm {
        model: LstmModel,
        vocab: Vocab,
    },
    Finetuned(SequenceClassifier),
}

impl LoadedModel {
    pub fn predict(&self, cfg: &RunConfig, texts: &[String]) -> Result<Vec<Label>, CliError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        match self {
            LoadedModel::Head { head, backend } => {
                let emb = embed(cfg, texts, backend.as_ref())?;
                heads::predict_head(head, &emb).map_err(ctx("predicting"))
            }
            LoadedModel::Lstm { model, vocab } => model.predict(texts, vocab).map_err(ctx("predicting")),
            LoadedModel::Finetuned(m) => m.predict(texts).map_err(ctx("predicting")),
        }
    }
}

/// Opens a run directory after checking it against the config.
pub fn load_artifact(cfg: &RunConfig, artifact: &Path) -> Result<(RunManifest, LoadedModel), CliError> {
    let manifest: RunManifest = read_json(&artifact.join("manifest.json"))?;
    let section = cfg.model_section()?;
    if manifest.kind != section.kind() {
        return Err(CliError::Incompatible {
            artifact: artifact.to_path_buf(),
            reason: format!("artifact holds a {} model but the config has [{}]", manifest.kind, section.kind()),
        });
    }
    if manifest.compat_hash != cfg.compat_hash()? {
        return Err(CliError::Incompatible {
            artifact: artifact.to_path_buf(),
            reason: "trained under different cleaning, encoder or model settings".into(),
        });
    }
    let model = match section {
        ModelSection::Head(_) => {
            let path = artifact.join("head.bin");
            let blob = fs::read(&path).map_err(ctx(format!("reading {}", path.display())))?;
            let head = TrainedHead::from_blob(&blob).map_err(ctx(format!("loading {}", path.display())))?;
            let backend = open_backend(cfg)?;
            if head.dim != backend.dim() {
                return Err(CliError::FingerprintMismatch {
                    artifact_dim: head.dim,
                    encoder_dim: backend.dim(),
                });
            }
            LoadedModel::Head { head, backend }
        }
        ModelSection::Lstm(_) => LoadedModel::Lstm {
            model: LstmModel::load(&artifact.join("model")).map_err(ctx("loading LSTM"))?,
            vocab: Vocab::load(&artifact.join("vocab.txt")).map_err(ctx("loading vocabulary"))?,
        },
        ModelSection::Finetune(_) => LoadedModel::Finetuned(
            SequenceClassifier::load(&artifact.join("model")).map_err(ctx("loading fine-tuned model"))?,
        ),
    };
    Ok((manifest, model))
}

#[derive(Debug, Clone)]
pub struct EvaluateSummary {
    pub report: EvalReport,
    pub record_path: PathBuf,
    pub grid: metrics::ResultsGrid,
}

/// Scores an artifact on a prepared split, stores the report and regenerates
/// the results grid from every stored report.
pub fn cmd_evaluate(cfg: &RunConfig, artifact: &Path, split: Split) -> Result<EvaluateSummary, CliError> {
    let (manifest, model) = load_artifact(cfg, artifact)?;
    let data = load_prepared(cfg, split)?;
    let predicted = model.predict(cfg, &data.texts())?;
    let section = cfg.model_section()?;
    let report = metrics::evaluate(&data.labels(), &predicted)
        .map_err(ctx("scoring"))?
        .with_meta(RunMeta {
            seed: manifest.seed,
            ..run_meta(cfg, &section)
        });
    let reports_dir = cfg.output_dir().join("reports");
    let record_path = reports_dir.join(format!("{}_{}.record", manifest.run_id, split.as_str()));
    write_file(&record_path, report.to_record())?;
    let grid = regenerate_grid(&reports_dir)?;
    Ok(EvaluateSummary {
        report,
        record_path,
        grid,
    })
}

/// Rebuilds `results_grid.{txt,csv}` from the `.record` files in `dir`.
pub fn regenerate_grid(dir: &Path) -> Result<metrics::ResultsGrid, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(ctx(format!("listing {}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "record"))
        .collect();
    paths.sort();
    let mut reports = Vec::with_capacity(paths.len());
    for p in &paths {
        let raw = fs::read_to_string(p).map_err(ctx(format!("reading {}", p.display())))?;
        reports.push(EvalReport::from_record(&raw).map_err(ctx(format!("parsing {}", p.display())))?);
    }
    let grid = metrics::results_grid(&reports);
    write_file(&dir.join("results_grid.txt"), &grid.text)?;
    write_file(&dir.join("results_grid.csv"), &grid.csv)?;
    Ok(grid)
}

/// Labels the first tab-separated field of every input line and writes
/// `text<TAB>label` rows in input order. Texts are cleaned as in `prepare`
/// before prediction; the output keeps them as given.
pub fn cmd_predict(cfg: &RunConfig, artifact: &Path, input: &Path, output: &Path) -> Result<usize, CliError> {
    let (_, model) = load_artifact(cfg, artifact)?;
    let raw = fs::read_to_string(input).map_err(ctx(format!("reading {}", input.display())))?;
    let originals: Vec<&str> = raw
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .map(|l| l.split('\t').next().unwrap_or(""))
        .collect();
    let cleaning = cfg.cleaning_config()?;
    let texts: Vec<String> = originals.iter().map(|t| clean_text(t, &cleaning)).collect();
    let predicted = model.predict(cfg, &texts)?;
    let mut out = String::with_capacity(raw.len() + 16 * originals.len());
    for (t, p) in originals.iter().zip(&predicted) {
        let _ = writeln!(out, "{t}\t{p}");
    }
    write_file(output, out)?;
    Ok(originals.len())
}

/// Class-share profile for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Tamil,
    Codemix,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tamil" => Ok(Profile::Tamil),
            "codemix" => Ok(Profile::Codemix),
            other => Err(format!("unknown profile `{other}` (expected tamil or codemix)")),
        }
    }
}

/// Writes a seeded synthetic corpus as stratified 80/10/10
/// `train.tsv`, `dev.tsv` and `test.tsv` under `out`.
pub fn cmd_synthesize(out: &Path, n: usize, profile: Profile, vocab_size: usize, seed: u64) -> Result<(), CliError> {
    let shares = match profile {
        Profile::Tamil => corpus::normalized_shares(&corpus::TAMIL_CLASS_SHARES),
        Profile::Codemix => corpus::normalized_shares(&corpus::CODEMIX_CLASS_SHARES),
    };
    let all = corpus::synthesize_corpus(n, &shares, vocab_size, seed).map_err(ctx("synthesizing"))?;
    let (train, rest) = all.stratified_split(0.2, seed);
    let (dev, test) = rest.stratified_split(0.5, seed.wrapping_add(1));
    fs::create_dir_all(out).map_err(ctx(format!("creating {}", out.display())))?;
    for (name, c) in [("train", train), ("dev", dev), ("test", test)] {
        let path = out.join(format!("{name}.tsv"));
        corpus::write_tsv(&c, &path).map_err(ctx(format!("writing {}", path.display())))?;
    }
    Ok(())
}

/// Model kinds the `[head]` section accepts, for help text.
pub fn head_kinds() -> Vec<&'static str> {
    HeadKind::ALL.iter().map(|k| k.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn setup(extra: &str, overrides: &[&str]) -> (TempDir, RunConfig) {
        let dir = TempDir::new().unwrap();
        cmd_synthesize(&dir.path().join("data"), 240, Profile::Tamil, 30, 5).unwrap();
        let raw = format!(
            r#"
            seed = 1
            output_dir = "out"
            [data]
            train = "data/train.tsv"
            dev = "data/dev.tsv"
            test = "data/test.tsv"
            language = "synthetic"
            {extra}
            "#
        );
        fs::write(dir.path().join("run.toml"), raw).unwrap();
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        let cfg = RunConfig::load(&dir.path().join("run.toml"), &o).unwrap();
        (dir, cfg)
    }

    // Rare classes have fewer rows than folds until rebalanced.
    const HEAD: &str =
        "[rebalance]\nstrategy = \"over_under\"\n[head]\nkind = \"logistic_regression\"\ngrid = { c = [1.0] }\n";

    #[test]
    fn prepare_without_cleaning_normalizes_whitespace_only() {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("t.tsv"), "  a   b\tMisandry\nc\u{3000}d!\tMisogyny\n").unwrap();
        let raw = format!("output_dir = \"o\"\n[data]\ntrain = \"t.tsv\"\ndev = \"t.tsv\"\nlanguage = \"tamil\"\n{HEAD}");
        let cfg = RunConfig::parse(&raw, Path::new("x.toml"), dir.path(), &[]).unwrap();
        cmd_prepare(&cfg).unwrap();
        let train = prepared_dir(&cfg).unwrap().join("train.tsv");
        assert!(train.starts_with(dir.path().join("o/prepared")));
        let out = fs::read_to_string(&train).unwrap();
        assert_eq!(out, "a b\tMisandry\nc d!\tMisogyny\n");
        let before = fs::read(&train).unwrap();
        cmd_prepare(&cfg).unwrap();
        assert_eq!(fs::read(&train).unwrap(), before);
    }

    #[test]
    fn train_requires_prepared_data() {
        let (_d, cfg) = setup(HEAD, &[]);
        assert!(matches!(cmd_train(&cfg), Err(CliError::Config { ref field, .. }) if field == "prepared"));
    }

    #[test]
    fn head_run_trains_evaluates_and_predicts() {
        let (dir, cfg) = setup(HEAD, &[]);
        let prep = cmd_prepare(&cfg).unwrap();
        assert_eq!(prep.splits.len(), 3);
        let s = cmd_train(&cfg).unwrap();
        assert_eq!(s.grid.as_ref().unwrap().best_fold_scores().len(), 5);
        assert!(s.run_dir.join("head.bin").is_file());
        let first = fs::read(s.run_dir.join("manifest.json")).unwrap();
        let again = cmd_train(&cfg).unwrap();
        assert_eq!(fs::read(again.run_dir.join("manifest.json")).unwrap(), first);

        let e1 = cmd_evaluate(&cfg, &s.run_dir, Split::Test).unwrap();
        let e2 = cmd_evaluate(&cfg, &s.run_dir, Split::Test).unwrap();
        assert_eq!(e1.report, e2.report);
        assert!(e1.grid.text.contains("Logistic Regression"));

        let input = dir.path().join("in.txt");
        let train = load_prepared(&cfg, Split::Train).unwrap();
        fs::write(&input, train.texts().join("\n")).unwrap();
        let output = dir.path().join("pred.tsv");
        assert_eq!(cmd_predict(&cfg, &s.run_dir, &input, &output).unwrap(), train.len());
        assert_eq!(fs::read_to_string(&output).unwrap().lines().count(), train.len());

        fs::write(&input, "").unwrap();
        assert_eq!(cmd_predict(&cfg, &s.run_dir, &input, &output).unwrap(), 0);
        assert_eq!(fs::read_to_string(&output).unwrap(), "");
    }

    #[test]
    fn mismatched_configs_are_rejected() {
        let (dir, cfg) = setup(HEAD, &[]);
        cmd_prepare(&cfg).unwrap();
        let s = cmd_train(&cfg).unwrap();
        let other = RunConfig::load(&dir.path().join("run.toml"), &["encoder.dim=32".into()]).unwrap();
        assert!(matches!(cmd_evaluate(&other, &s.run_dir, Split::Dev), Err(CliError::Incompatible { .. })));
        let cleaned = RunConfig::load(&dir.path().join("run.toml"), &["cleaning.families.ensemble=true".into()]).unwrap();
        // data prepared under other cleaning lives elsewhere and is not picked up
        assert!(matches!(cmd_train(&cleaned), Err(CliError::Config { ref field, .. }) if field == "prepared"));
    }

    #[test]
    fn head_dim_conflict_is_a_fingerprint_mismatch() {
        let (_d, cfg) = setup(HEAD, &[]);
        cmd_prepare(&cfg).unwrap();
        let s = cmd_train(&cfg).unwrap();
        let blob = fs::read(s.run_dir.join("head.bin")).unwrap();
        let mut head = TrainedHead::from_blob(&blob).unwrap();
        head.dim = 7;
        fs::write(s.run_dir.join("head.bin"), head.to_blob()).unwrap();
        assert!(matches!(
            cmd_evaluate(&cfg, &s.run_dir, Split::Dev),
            Err(CliError::FingerprintMismatch { artifact_dim: 7, encoder_dim: 64 })
        ));
    }

    #[test]
    fn lstm_run_writes_history_and_best_marker() {
        let lstm = "[lstm]\nvocab_size = 500\nembed_dim = 8\nhidden_dim = 8\nmax_len = 8\nmax_epochs = 2\nbatch_size = 64\n";
        let (_d, cfg) = setup(lstm, &[]);
        cmd_prepare(&cfg).unwrap();
        let s = cmd_train(&cfg).unwrap();
        let hist = fs::read_to_string(s.run_dir.join("history.tsv")).unwrap();
        assert!(hist.lines().count() >= 2);
        let ck = CheckpointDir::new(cfg.output_dir().join("checkpoints"), cfg.run_id());
        assert!(ck.read_best().is_ok());
        let e = cmd_evaluate(&cfg, &s.run_dir, Split::Dev).unwrap();
        assert_eq!(e.report.macro_f1, s.dev_report.macro_f1);
    }

    #[test]
    fn exit_codes_split_config_from_runtime() {
        assert_eq!(CliError::config(Path::new("a"), "b", "c").exit_code(), 2);
        let rt = CliError::Runtime {
            context: "x".into(),
            source: "boom".into(),
        };
        assert_eq!(rt.exit_code(), 3);
    }
}
