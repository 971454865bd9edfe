//! Run configuration: one TOML file per run, with `--set section.key=value`
//! overrides applied before deserializing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::corpus::{Label, LanguageTag};
use crate::encoder::Pooling;
use crate::heads::{GridSearchSpec, HeadKind, HeadSpec, Hyperparams, Scalar};
use crate::neural::{FinetuneSpec, LstmSpec, TEST_ENCODER_ID};
use crate::preprocess::{self, CleaningConfig, ModelFamily};
use crate::rebalance::{RebalancePlan, Strategy};

/// Encoder id of the deterministic hashing backend.
pub const HASHING_ENCODER_ID: &str = "test:hashing";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub language: Option<LanguageTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningSection {
    pub strip_urls: bool,
    pub strip_punctuation: bool,
    pub remove_stopwords: bool,
    pub replace_emojis: bool,
    /// Shipped list when unset.
    pub stopwords_file: Option<PathBuf>,
    /// Shipped map when unset.
    pub emoji_map_file: Option<PathBuf>,
    /// Per-family switch; families left out use their default.
    pub families: BTreeMap<ModelFamily, bool>,
}

impl Default for CleaningSection {
    fn default() -> Self {
        CleaningSection {
            strip_urls: true,
            strip_punctuation: true,
            remove_stopwords: true,
            replace_emojis: true,
            stopwords_file: None,
            emoji_map_file: None,
            families: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RebalanceSection {
    pub strategy: Strategy,
    pub smote_k: usize,
    /// Class shares keyed by label name; uniform when unset.
    pub target: Option<BTreeMap<String, f64>>,
}

impl Default for RebalanceSection {
    fn default() -> Self {
        RebalanceSection {
            strategy: Strategy::None,
            smote_k: 5,
            target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    /// `test:hashing`, a hub id, or a local model directory.
    pub id: String,
    pub pooling: Pooling,
    /// Embedding cache directory; caching is off when unset.
    pub cache: Option<PathBuf>,
    /// Hashing backend only.
    pub dim: usize,
    /// Hashing backend only.
    pub seed: u64,
    pub max_len: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            id: HASHING_ENCODER_ID.into(),
            pooling: Pooling::Cls,
            cache: None,
            dim: 64,
            seed: 0,
            max_len: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    pub kind: HeadKind,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    /// The kind's default grid when unset.
    #[serde(default)]
    pub grid: Option<BTreeMap<String, Vec<Scalar>>>,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

fn default_folds() -> usize {
    5
}

impl HeadSection {
    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            kind: self.kind,
            hyperparams: self.hyperparams.clone(),
            class_weights: None,
        }
    }

    pub fn grid_spec(&self, seed: u64) -> GridSearchSpec {
        let grid = self.grid.clone().unwrap_or_else(|| self.kind.default_grid());
        GridSearchSpec::new(grid, self.folds, seed)
    }
}

/// The single model section of a config.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSection<'a> {
    Head(&'a HeadSection),
    Lstm(&'a LstmSpec),
    Finetune(&'a FinetuneSpec),
}

impl ModelSection<'_> {
    pub fn family(&self) -> ModelFamily {
        match self {
            ModelSection::Head(_) => ModelFamily::Ensemble,
            ModelSection::Lstm(_) => ModelFamily::Lstm,
            ModelSection::Finetune(f) => ModelFamily::for_encoder(&f.encoder_id),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelSection::Head(_) => "head",
            ModelSection::Lstm(_) => "lstm",
            ModelSection::Finetune(_) => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub cleaning: CleaningSection,
    #[serde(default)]
    pub rebalance: RebalanceSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub head: Option<HeadSection>,
    #[serde(default)]
    pub lstm: Option<LstmSpec>,
    #[serde(default)]
    pub finetune: Option<FinetuneSpec>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    base_dir: PathBuf,
    /// Where the config came from, for error messages.
    #[serde(skip)]
    source: PathBuf,
}

/// Sets `dotted.key = value` in a TOML table. The value is read as a TOML
/// literal when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override `{assignment}` is not of the form section.key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override key `{key}` has an empty segment"));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut at = table;
    for p in parents {
        let entry = at
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        at = entry
            .as_table_mut()
            .ok_or_else(|| format!("override `{key}`: `{p}` is not a section"))?;
    }
    at.insert(last.to_string(), value);
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    /// Reads, overrides and validates a config file.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
        let raw = fs::read_to_string(path).map_err(|e| CliError::config(path, "<file>", e.to_string()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::parse(&raw, path, &base, overrides)
    }

    /// Parses config text; `source` only labels errors.
    pub fn parse(raw: &str, source: &Path, base_dir: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
        let mut table: toml::Table = raw
            .parse()
            .map_err(|e: toml::de::Error| CliError::config(source, "<syntax>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o).map_err(|m| CliError::config(source, "--set", m))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(source, "<schema>", e.message().to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.source = source.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    fn err(&self, field: &str, message: impl Into<String>) -> CliError {
        CliError::config(&self.source, field, message)
    }

    /// Joins relative paths onto the config's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let model = self.model_section()?;
        if self.output_dir.is_none() {
            return Err(self.err("output_dir", "missing"));
        }
        if self.language().is_none() {
            return Err(self.err("data.language", "missing"));
        }
        for (field, path, required) in [
            ("data.train", &self.data.train, true),
            ("data.dev", &self.data.dev, true),
            ("data.test", &self.data.test, false),
            ("cleaning.stopwords_file", &self.cleaning.stopwords_file, false),
            ("cleaning.emoji_map_file", &self.cleaning.emoji_map_file, false),
        ] {
            match path {
                Some(p) if !self.resolve(p).is_file() => {
                    return Err(self.err(field, format!("{} does not exist", self.resolve(p).display())))
                }
                None if required => return Err(self.err(field, "missing")),
                _ => {}
            }
        }
        if let Some(id) = &self.run_id {
            let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !ok || id.starts_with('.') {
                return Err(self.err("run_id", "use letters, digits, `-`, `_` or `.`"));
            }
        }
        self.cleaning_config()?;
        self.rebalance_plan()?
            .validate()
            .map_err(|e| self.err("rebalance", e.to_string()))?;
        if self.rebalance.strategy == Strategy::Smote && !matches!(model, ModelSection::Head(_)) {
            return Err(self.err(
                "rebalance.strategy",
                "smote works in embedding space and applies to [head] runs only",
            ));
        }
        match model {
            ModelSection::Head(h) => {
                h.head_spec().validate().map_err(|e| self.err("head", e.to_string()))?;
                h.grid_spec(self.seed)
                    .validate()
                    .map_err(|e| self.err("head.grid", e.to_string()))?;
                if self.encoder.id == HASHING_ENCODER_ID && self.encoder.dim < 2 {
                    return Err(self.err("encoder.dim", "must be at least 2"));
                }
                if self.encoder.max_len == 0 {
                    return Err(self.err("encoder.max_len", "must be positive"));
                }
            }
            ModelSection::Lstm(s) => s.validate().map_err(|e| self.err("lstm", e.to_string()))?,
            ModelSection::Finetune(_) => self
                .finetune_spec()
                .expect("model section is finetune")
                .validate()
                .map_err(|e| self.err("finetune", e.to_string()))?,
        }
        Ok(())
    }

    pub fn model_section(&self) -> Result<ModelSection<'_>, CliError> {
        let present: Vec<ModelSection> = [
            self.head.as_ref().map(ModelSection::Head),
            self.lstm.as_ref().map(ModelSection::Lstm),
            self.finetune.as_ref().map(ModelSection::Finetune),
        ]
        .into_iter()
        .flatten()
        .collect();
        match present.as_slice() {
            [one] => Ok(one.clone()),
            [] => Err(self.err("head|lstm|finetune", "exactly one model section is required, found none")),
            many => Err(self.err(
                "head|lstm|finetune",
                format!(
                    "exactly one model section is required, found {}",
                    many.iter().map(ModelSection::kind).collect::<Vec<_>>().join(", ")
                ),
            )),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(self.output_dir.as_deref().unwrap_or(Path::new(".")))
    }

    pub fn language(&self) -> Option<LanguageTag> {
        self.data.language
    }

    /// Whether the configured model family gets the cleaning steps.
    pub fn cleans(&self) -> Result<bool, CliError> {
        let family = self.model_section()?.family();
        Ok(self
            .cleaning
            .families
            .get(&family)
            .copied()
            .unwrap_or_else(|| family.cleans_by_default()))
    }

    /// The cleaning actually applied: the configured steps when the model
    /// family cleans, otherwise whitespace normalization only.
    pub fn cleaning_config(&self) -> Result<CleaningConfig, CliError> {
        if !self.cleans()? {
            return Ok(CleaningConfig::disabled());
        }
        let c = &self.cleaning;
        let stopwords = match &c.stopwords_file {
            Some(p) => preprocess::load_stopwords(&self.resolve(p))
                .map_err(|e| self.err("cleaning.stopwords_file", e.to_string()))?,
            None => preprocess::parse_stopwords(preprocess::DEFAULT_STOPWORDS),
        };
        let emoji_map = match &c.emoji_map_file {
            Some(p) => preprocess::load_emoji_map(&self.resolve(p))
                .map_err(|e| self.err("cleaning.emoji_map_file", e.to_string()))?,
            None => preprocess::parse_emoji_map(preprocess::DEFAULT_EMOJI_MAP, "<default>")
                .map_err(|e| self.err("cleaning", e.to_string()))?,
        };
        let cfg = CleaningConfig {
            strip_urls: c.strip_urls,
            strip_punctuation: c.strip_punctuation,
            remove_stopwords: c.remove_stopwords,
            replace_emojis: c.replace_emojis,
            stopwords,
            emoji_map,
        };
        cfg.validate().map_err(|e| self.err("cleaning", e.to_string()))?;
        Ok(cfg)
    }

    pub fn rebalance_plan(&self) -> Result<RebalancePlan, CliError> {
        let r = &self.rebalance;
        let target = match &r.target {
            None => None,
            Some(map) => Some(
                map.iter()
                    .map(|(k, &v)| {
                        k.parse::<Label>()
                            .map(|l| (l, v))
                            .map_err(|e| self.err("rebalance.target", e.to_string()))
                    })
                    .collect::<Result<BTreeMap<_, _>, _>>()?,
            ),
        };
        Ok(RebalancePlan {
            strategy: r.strategy,
            target,
            seed: self.seed,
            smote_k: r.smote_k,
        })
    }

    /// The fine-tuning spec with the run seed applied and a relative model
    /// directory resolved.
    pub fn finetune_spec(&self) -> Option<FinetuneSpec> {
        let mut spec = self.finetune.clone()?;
        spec.seed = self.seed;
        if spec.encoder_id != TEST_ENCODER_ID {
            let local = self.resolve(Path::new(&spec.encoder_id));
            if local.join("config.json").is_file() {
                spec.encoder_id = local.to_string_lossy().into_owned();
            }
        }
        Some(spec)
    }

    /// Encoder id or local directory for the embedding heads.
    pub fn encoder_location(&self) -> String {
        if self.encoder.id == HASHING_ENCODER_ID {
            return self.encoder.id.clone();
        }
        let local = self.resolve(Path::new(&self.encoder.id));
        if local.join("config.json").is_file() {
            local.to_string_lossy().into_owned()
        } else {
            self.encoder.id.clone()
        }
    }

    /// Digest of the whole effective config, paths as written.
    pub fn config_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Digest of what prepared data depends on.
    pub fn prepare_hash(&self) -> Result<String, CliError> {
        let cleaning = self.cleaning_config()?;
        let v = serde_json::json!({ "data": self.data, "cleaning": cleaning });
        Ok(sha256_hex(v.to_string().as_bytes()))
    }

    /// Digest of what inference depends on: cleaning, encoder and model.
    /// Artifacts are only used under configs with an equal digest.
    pub fn compat_hash(&self) -> Result<String, CliError> {
        let cleaning = self.cleaning_config()?;
        let model = match self.model_section()? {
            ModelSection::Head(h) => serde_json::json!({ "head": h, "encoder": self.encoder }),
            ModelSection::Lstm(s) => serde_json::json!({ "lstm": s }),
            ModelSection::Finetune(_) => {
                let mut f = self.finetune.clone().expect("finetune section");
                f.seed = 0;
                serde_json::json!({ "finetune": f })
            }
        };
        let v = serde_json::json!({ "cleaning": cleaning, "model": model, "language": self.data.language });
        Ok(sha256_hex(v.to_string().as_bytes()))
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("run-{}", &self.config_hash()[..12]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn fixture() -> TempDir {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("train.tsv"), "a b\tMisandry\n").unwrap();
        fs::write(dir.path().join("dev.tsv"), "c d\tMisogyny\n").unwrap();
        dir
    }

    const BASE: &str = r#"
        output_dir = "out"
        [data]
        train = "train.tsv"
        dev = "dev.tsv"
        language = "tamil"
        [head]
        kind = "logistic_regression"
    "#;

    fn parse(dir: &TempDir, raw: &str, overrides: &[&str]) -> Result<RunConfig, CliError> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::parse(raw, Path::new("run.toml"), dir.path(), &o)
    }

    fn field_of(e: CliError) -> String {
        match e {
            CliError::Config { field, .. } => field,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let dir = fixture();
        let cfg = parse(&dir, BASE, &[]).unwrap();
        assert_eq!(cfg.encoder.id, HASHING_ENCODER_ID);
        assert_eq!(cfg.head.as_ref().unwrap().folds, 5);
        assert!(!cfg.cleans().unwrap(), "ensemble heads keep raw text by default");
        assert_eq!(cfg.output_dir(), dir.path().join("out"));
    }

    #[test]
    fn missing_dataset_names_the_field() {
        let dir = fixture();
        let raw = BASE.replace("dev = \"dev.tsv\"", "");
        assert_eq!(field_of(parse(&dir, &raw, &[]).unwrap_err()), "data.dev");
        let raw = BASE.replace("dev.tsv", "absent.tsv");
        assert_eq!(field_of(parse(&dir, &raw, &[]).unwrap_err()), "data.dev");
    }

    #[test]
    fn exactly_one_model_section() {
        let dir = fixture();
        let none = BASE.replace("[head]\n        kind = \"logistic_regression\"", "");
        assert_eq!(field_of(parse(&dir, &none, &[]).unwrap_err()), "head|lstm|finetune");
        let two = format!("{BASE}\n[lstm]\nhidden_dim = 8\n");
        assert_eq!(field_of(parse(&dir, &two, &[]).unwrap_err()), "head|lstm|finetune");
    }

    #[test]
    fn overrides_apply_typed_values_and_create_sections() {
        let dir = fixture();
        let cfg = parse(
            &dir,
            BASE,
            &["seed=7", "encoder.dim=16", "head.folds=6", "cleaning.families.ensemble=true", "run_id=abc"],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.encoder.dim, 16);
        assert_eq!(cfg.head.unwrap().folds, 6);
        assert_eq!(cfg.run_id.as_deref(), Some("abc"));
        let cfg = parse(&dir, BASE, &["cleaning.families.ensemble=true"]).unwrap();
        assert!(cfg.cleans().unwrap());
    }

    #[test]
    fn bad_override_and_unknown_keys_are_config_errors() {
        let dir = fixture();
        assert_eq!(field_of(parse(&dir, BASE, &["novalue"]).unwrap_err()), "--set");
        assert_eq!(field_of(parse(&dir, BASE, &["output_dir.x=1"]).unwrap_err()), "--set");
        assert_eq!(field_of(parse(&dir, BASE, &["head.bogus=1"]).unwrap_err()), "<schema>");
    }

    #[test]
    fn smote_is_rejected_outside_heads() {
        let dir = fixture();
        let raw = BASE.replace("[head]\n        kind = \"logistic_regression\"", "[lstm]\nhidden_dim = 8");
        let e = parse(&dir, &raw, &["rebalance.strategy=smote"]).unwrap_err();
        assert_eq!(field_of(e), "rebalance.strategy");
    }

    #[test]
    fn target_labels_parse_by_name() {
        let dir = fixture();
        let cfg = parse(
            &dir,
            BASE,
            &["rebalance.strategy=over_under", "rebalance.target={ Misandry = 0.5, \"hope speech\" = 0.5 }"],
        )
        .unwrap();
        let plan = cfg.rebalance_plan().unwrap();
        assert_eq!(plan.target.unwrap().len(), 2);
        let e = parse(&dir, BASE, &["rebalance.strategy=over_under", "rebalance.target={ nope = 1.0 }"]).unwrap_err();
        assert_eq!(field_of(e), "rebalance.target");
    }

    #[test]
    fn hashes_track_the_right_sections() {
        let dir = fixture();
        let a = parse(&dir, BASE, &[]).unwrap();
        let b = parse(&dir, BASE, &["seed=3", "rebalance.strategy=oversample"]).unwrap();
        let c = parse(&dir, BASE, &["encoder.dim=32"]).unwrap();
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.compat_hash().unwrap(), b.compat_hash().unwrap());
        assert_ne!(a.compat_hash().unwrap(), c.compat_hash().unwrap());
        assert_eq!(a.prepare_hash().unwrap(), c.prepare_hash().unwrap());
        assert!(a.run_id().starts_with("run-"));
    }
}
