//! Labeled comment corpora: the nine-label taxonomy, TSV loading and writing,
//! class distributions and a seeded synthetic-corpus generator.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apportion::largest_remainder;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed row at line {0}: expected `text<TAB>label` with non-empty text")]
    MalformedRow(usize),
    #[error("unknown label {token:?} at line {line}")]
    UnknownLabel { line: usize, token: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("class fractions must cover active labels and sum to 1 (got sum {sum})")]
    BadFractions { sum: f64 },
    #[error("{n} examples cannot host {classes} nonzero classes")]
    TooSmall { n: usize, classes: usize },
    #[error("example {0} contains a tab or newline and cannot be written as TSV")]
    UnencodableText(usize),
}

/// One of the nine shared-task labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    HopeSpeech,
    Homophobia,
    Misandry,
    CounterSpeech,
    Misogyny,
    Xenophobia,
    Transphobic,
    NotTamil,
    NoneOfTheAbove,
}

impl Label {
    pub const ALL: [Label; 9] = [
        Label::HopeSpeech,
        Label::Homophobia,
        Label::Misandry,
        Label::CounterSpeech,
        Label::Misogyny,
        Label::Xenophobia,
        Label::Transphobic,
        Label::NotTamil,
        Label::NoneOfTheAbove,
    ];

    /// The eight evaluated labels. `Not-Tamil` never occurs in dev or test data.
    pub const ACTIVE: [Label; 8] = [
        Label::HopeSpeech,
        Label::Homophobia,
        Label::Misandry,
        Label::CounterSpeech,
        Label::Misogyny,
        Label::Xenophobia,
        Label::Transphobic,
        Label::NoneOfTheAbove,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::HopeSpeech => "Hope-Speech",
            Label::Homophobia => "Homophobia",
            Label::Misandry => "Misandry",
            Label::CounterSpeech => "Counter-speech",
            Label::Misogyny => "Misogyny",
            Label::Xenophobia => "Xenophobia",
            Label::Transphobic => "Transphobic",
            Label::NotTamil => "Not-Tamil",
            Label::NoneOfTheAbove => "None-of-the-above",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Label::ALL.get(index).copied()
    }

    pub fn is_active(self) -> bool {
        self != Label::NotTamil
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unrecognised label {0:?}")]
pub struct ParseLabelError(pub String);

impl FromStr for Label {
    type Err = ParseLabelError;

    /// Case-insensitive; space, hyphen and underscore are interchangeable.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .chars()
            .map(|c| match c {
                ' ' | '_' => '-',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        let label = match key.as_str() {
            "hope-speech" => Label::HopeSpeech,
            "homophobia" => Label::Homophobia,
            "misandry" => Label::Misandry,
            "counter-speech" => Label::CounterSpeech,
            "misogyny" => Label::Misogyny,
            "xenophobia" => Label::Xenophobia,
            "transphobic" => Label::Transphobic,
            "not-tamil" => Label::NotTamil,
            "none-of-the-above" | "none-of-these" => Label::NoneOfTheAbove,
            _ => return Err(ParseLabelError(s.to_string())),
        };
        Ok(label)
    }
}

impl Serialize for LabelName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.0.as_str())
    }
}

impl<'de> Deserialize<'de> for LabelName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map(LabelName).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter that writes a [`Label`] by its display name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelName(pub Label);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageTag {
    Tamil,
    Codemix,
    Synthetic,
}

impl LanguageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            LanguageTag::Tamil => "tamil",
            LanguageTag::Codemix => "codemix",
            LanguageTag::Synthetic => "synthetic",
        }
    }
}

impl FromStr for LanguageTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tamil" => Ok(LanguageTag::Tamil),
            "codemix" | "code-mix" | "codemixed" => Ok(LanguageTag::Codemix),
            "synthetic" => Ok(LanguageTag::Synthetic),
            other => Err(format!("unknown language tag {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: usize,
    pub text: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    examples: Vec<Example>,
    split: Split,
    language: LanguageTag,
}

impl Corpus {
    /// Builds a corpus from `(text, label)` pairs, numbering examples in order.
    pub fn from_pairs<I, S>(pairs: I, split: Split, language: LanguageTag) -> Self
    where
        I: IntoIterator<Item = (S, Label)>,
        S: Into<String>,
    {
        let examples = pairs
            .into_iter()
            .enumerate()
            .map(|(id, (text, label))| Example {
                id,
                text: text.into(),
                label,
            })
            .collect();
        Corpus {
            examples,
            split,
            language,
        }
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn language(&self) -> LanguageTag {
        self.language
    }

    pub fn texts(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.text.clone()).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Per-class example counts (classes with zero examples omitted).
    pub fn class_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.examples {
            *counts.entry(e.label).or_insert(0) += 1;
        }
        counts
    }

    /// Drops `Not-Tamil` rows, which are excluded from training and evaluation.
    pub fn active_only(&self) -> Corpus {
        Corpus::from_pairs(
            self.examples
                .iter()
                .filter(|e| e.label.is_active())
                .map(|e| (e.text.clone(), e.label)),
            self.split,
            self.language,
        )
    }

    /// Rewrites every text through `f`, keeping labels and order.
    pub fn map_texts(&self, mut f: impl FnMut(&str) -> String) -> Corpus {
        Corpus::from_pairs(
            self.examples.iter().map(|e| (f(&e.text), e.label)),
            self.split,
            self.language,
        )
    }

    /// Stratified two-way partition; each class contributes
    /// `round(n_c * holdout_fraction)` examples to the second corpus.
    pub fn stratified_split(&self, holdout_fraction: f64, seed: u64) -> (Corpus, Corpus) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.examples.iter().enumerate() {
            by_class.entry(e.label).or_default().push(i);
        }
        let mut holdout = vec![false; self.examples.len()];
        for idx in by_class.values_mut() {
            idx.shuffle(&mut rng);
            let take = (idx.len() as f64 * holdout_fraction).round() as usize;
            for &i in idx.iter().take(take) {
                holdout[i] = true;
            }
        }
        let pick = |want: bool| {
            Corpus::from_pairs(
                self.examples
                    .iter()
                    .zip(&holdout)
                    .filter(|(_, &h)| h == want)
                    .map(|(e, _)| (e.text.clone(), e.label)),
                self.split,
                self.language,
            )
        };
        (pick(false), pick(true))
    }
}

/// What the loader noticed but tolerated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadDiagnostics {
    /// Line number of a skipped header row, if row 1 did not carry a label.
    pub header_line: Option<usize>,
    /// Rows with more than two tab-separated fields.
    pub extra_column_rows: usize,
}

/// Loads a UTF-8 `text<TAB>label` file.
pub fn load_tsv(path: &Path, split: Split, language: LanguageTag) -> Result<Corpus, CorpusError> {
    load_tsv_with_diagnostics(path, split, language).map(|(c, _)| c)
}

pub fn load_tsv_with_diagnostics(
    path: &Path,
    split: Split,
    language: LanguageTag,
) -> Result<(Corpus, LoadDiagnostics), CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (corpus, diag) = parse_tsv(&raw, split, language)?;
    if let Some(line) = diag.header_line {
        log::warn!("{}: treating line {line} as a header row", path.display());
    }
    if diag.extra_column_rows > 0 {
        log::warn!(
            "{}: ignored extra columns on {} rows",
            path.display(),
            diag.extra_column_rows
        );
    }
    Ok((corpus, diag))
}

pub fn parse_tsv(
    raw: &str,
    split: Split,
    language: LanguageTag,
) -> Result<(Corpus, LoadDiagnostics), CorpusError> {
    let mut diag = LoadDiagnostics::default();
    let mut pairs = Vec::new();
    let mut seen_row = false;
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let first_row = !seen_row;
        seen_row = true;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(CorpusError::MalformedRow(line_no));
        }
        let label = match fields[1].parse::<Label>() {
            Ok(label) => label,
            Err(_) if first_row => {
                diag.header_line = Some(line_no);
                continue;
            }
            Err(_) => {
                return Err(CorpusError::UnknownLabel {
                    line: line_no,
                    token: fields[1].to_string(),
                })
            }
        };
        if fields[0].trim().is_empty() {
            return Err(CorpusError::MalformedRow(line_no));
        }
        if fields.len() > 2 {
            diag.extra_column_rows += 1;
        }
        pairs.push((fields[0].to_string(), label));
    }
    Ok((Corpus::from_pairs(pairs, split, language), diag))
}

pub fn write_tsv(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for e in corpus.examples() {
        if e.text.contains(['\t', '\n', '\r']) {
            return Err(CorpusError::UnencodableText(e.id));
        }
        writeln!(out, "{}\t{}", e.text, e.label).map_err(io_err)?;
    }
    fs::write(path, out).map_err(io_err)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionStats {
    /// Counts for all nine labels, zeros included.
    pub counts: BTreeMap<Label, usize>,
    pub fractions: BTreeMap<Label, f64>,
}

impl DistributionStats {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Plain-text summary, one `label<TAB>count<TAB>fraction` line per label.
    pub fn render(&self) -> String {
        let mut out = format!("total\t{}\n", self.total());
        for label in Label::ALL {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\n",
                label, self.counts[&label], self.fractions[&label]
            ));
        }
        out
    }
}

pub fn label_distribution(corpus: &Corpus) -> Result<DistributionStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let observed = corpus.class_counts();
    let total = corpus.len() as f64;
    let counts: BTreeMap<Label, usize> = Label::ALL
        .iter()
        .map(|&l| (l, observed.get(&l).copied().unwrap_or(0)))
        .collect();
    let fractions = counts.iter().map(|(&l, &c)| (l, c as f64 / total)).collect();
    Ok(DistributionStats { counts, fractions })
}

/// Published class shares of the Tamil data, over the eight active labels.
pub const TAMIL_CLASS_SHARES: [(Label, f64); 8] = [
    (Label::HopeSpeech, 0.0351),
    (Label::Homophobia, 0.0146),
    (Label::Misandry, 0.1934),
    (Label::CounterSpeech, 0.0662),
    (Label::Misogyny, 0.0562),
    (Label::Xenophobia, 0.0425),
    (Label::Transphobic, 0.0020),
    (Label::NoneOfTheAbove, 0.59),
];

/// Published class shares of the Tamil-English code-mixed data. These sum to
/// 0.9976 as printed; use [`normalized_shares`] before sampling.
pub const CODEMIX_CLASS_SHARES: [(Label, f64); 8] = [
    (Label::HopeSpeech, 0.0361),
    (Label::Homophobia, 0.0291),
    (Label::Misandry, 0.144),
    (Label::CounterSpeech, 0.0571),
    (Label::Misogyny, 0.0342),
    (Label::Xenophobia, 0.0497),
    (Label::Transphobic, 0.0274),
    (Label::NoneOfTheAbove, 0.62),
];

/// Rescales shares to sum to exactly 1.
pub fn normalized_shares(shares: &[(Label, f64)]) -> BTreeMap<Label, f64> {
    let sum: f64 = shares.iter().map(|(_, f)| f).sum();
    shares.iter().map(|&(l, f)| (l, f / sum)).collect()
}

const TAMIL_CONSONANTS: [char; 18] = [
    'க', 'ங', 'ச', 'ஞ', 'ட', 'ண', 'த', 'ந', 'ப', 'ம', 'ய', 'ர', 'ல', 'வ', 'ழ', 'ள', 'ற', 'ன',
];

/// Token `j` of the pool for class `class`. Pools of different classes never
/// share a token because the leading syllable encodes the class.
fn pool_token(class: usize, j: usize) -> String {
    let mut token = String::new();
    token.push(TAMIL_CONSONANTS[class % TAMIL_CONSONANTS.len()]);
    token.push('ா');
    let mut rest = j;
    loop {
        token.push(TAMIL_CONSONANTS[rest % TAMIL_CONSONANTS.len()]);
        rest /= TAMIL_CONSONANTS.len();
        if rest == 0 {
            break;
        }
    }
    token
}

/// Generates a seeded corpus whose class counts are the largest-remainder
/// rounding of `n * fractions` and whose classes draw words from disjoint
/// pools of `vocab_size` tokens each.
pub fn synthesize_corpus(
    n: usize,
    fractions: &BTreeMap<Label, f64>,
    vocab_size: usize,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    let sum: f64 = fractions.values().sum();
    let invalid = fractions
        .iter()
        .any(|(l, &f)| !f.is_finite() || f < 0.0 || (!l.is_active() && f > 0.0));
    if invalid || (sum - 1.0).abs() > 1e-6 {
        return Err(CorpusError::BadFractions { sum });
    }
    let nonzero = fractions.values().filter(|&&f| f > 0.0).count();
    if n < nonzero.max(1) {
        return Err(CorpusError::TooSmall { n, classes: nonzero });
    }
    let vocab_size = vocab_size.max(1);
    let labels: Vec<Label> = fractions.keys().copied().collect();
    let shares: Vec<f64> = fractions.values().copied().collect();
    let counts = largest_remainder(n, &shares);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<Label> = labels
        .iter()
        .zip(&counts)
        .flat_map(|(&l, &c)| std::iter::repeat_n(l, c))
        .collect();
    order.shuffle(&mut rng);

    let pools: BTreeMap<Label, Vec<String>> = labels
        .iter()
        .map(|&l| (l, (0..vocab_size).map(|j| pool_token(l.index(), j)).collect()))
        .collect();
    let pairs = order.into_iter().map(|label| {
        let len = rng.random_range(3..=8);
        let pool = &pools[&label];
        let words: Vec<&str> = (0..len)
            .map(|_| pool.choose(&mut rng).expect("pool is non-empty").as_str())
            .collect();
        (words.join(" "), label)
    });
    Ok(Corpus::from_pairs(pairs.collect::<Vec<_>>(), Split::Train, LanguageTag::Synthetic))
}
