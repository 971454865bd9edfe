//! Sentence embeddings for the ensemble path and integer token sequences for
//! the LSTM path.

pub mod bert;
mod cache;
mod pretrained;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;

pub use cache::{encode_cached, read_embedding_file, write_embedding_file, EMBEDDING_MAGIC};
pub use bert::{BertConfig, BertModel, Pooling, TextTokenizer};
pub use pretrained::{load_encoder, resolve_model_dir, PretrainedBackend, HUB_CACHE_ENV};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend declared dimension {expected} but produced {got}")]
    EmbeddingDimMismatch { expected: usize, got: usize },
    #[error("backend returned {got} embeddings for {expected} texts")]
    RowCountMismatch { expected: usize, got: usize },
    #[error("nothing to encode")]
    EmptyInput,
    #[error("embedding row {0} has a non-finite entry")]
    NonFinite(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("embedding file {path}: {reason}")]
    BadEmbeddingFile { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// An N x d matrix of finite sentence embeddings, row-aligned with labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    values: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self, EncoderError> {
        if let Some(row) = values
            .rows()
            .into_iter()
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(EncoderError::NonFinite(row));
        }
        Ok(EmbeddingMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>], dim: usize) -> Result<Self, EncoderError> {
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(EncoderError::EmbeddingDimMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), dim), flat).expect("shape checked");
        EmbeddingMatrix::new(values)
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingMatrix {
            values: Array2::zeros((0, dim)),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Rows picked by index, in the given order.
    pub fn select(&self, rows: &[usize]) -> EmbeddingMatrix {
        EmbeddingMatrix {
            values: self.values.select(ndarray::Axis(0), rows),
        }
    }
}

/// A sentence encoder. Implementations run in inference mode and must be
/// deterministic for a fixed input.
pub trait EncoderBackend: Send + Sync {
    /// Stable identifier, recorded in artifacts and cache keys.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EncoderError>;
}

/// Encodes `texts` into one embedding row each.
pub fn encode(texts: &[String], backend: &dyn EncoderBackend) -> Result<EmbeddingMatrix, EncoderError> {
    if texts.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    let dim = backend.dim();
    let rows = backend.embed_batch(texts)?;
    if rows.len() != texts.len() {
        return Err(EncoderError::RowCountMismatch {
            expected: texts.len(),
            got: rows.len(),
        });
    }
    let mut values = Array2::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(EncoderError::EmbeddingDimMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        for (j, &v) in row.iter().enumerate() {
            values[[i, j]] = f64::from(v);
        }
    }
    EmbeddingMatrix::new(values)
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Desk-scale stand-in for a pretrained encoder: the embedding of a text is
/// the mean of pseudo-random per-token vectors seeded by `hash(token, seed)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashingBackend {
    dim: usize,
    seed: u64,
}

impl HashingBackend {
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes(), self.seed));
        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

/// Builds the hashing test backend. Dimensions below 2 are raised to 2.
pub fn test_backend(dim: usize, seed: u64) -> HashingBackend {
    HashingBackend { dim: dim.max(2), seed }
}

impl EncoderBackend for HashingBackend {
    fn id(&self) -> String {
        format!("test:hashing/dim={}/seed={}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EncoderError> {
        Ok(texts
            .iter()
            .map(|text| {
                let mut sum = vec![0.0f64; self.dim];
                let mut n = 0usize;
                for token in text.split_whitespace() {
                    for (s, v) in sum.iter_mut().zip(self.token_vector(token)) {
                        *s += v;
                    }
                    n += 1;
                }
                let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
                sum.into_iter().map(|s| (s * scale) as f32).collect()
            })
            .collect())
    }
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const FIRST_TOKEN_ID: u32 = 2;

/// Frequency-ranked word vocabulary. Id 0 pads, id 1 is unknown; the token at
/// rank r (0-based) gets id r + 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_size: usize,
}

pub const DEFAULT_VOCAB_SIZE: usize = 64_000;

impl Vocab {
    fn from_tokens(tokens: Vec<String>, max_size: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + FIRST_TOKEN_ID))
            .collect();
        Vocab {
            tokens,
            index,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    /// Size of an embedding table covering every id including the reserved two.
    pub fn id_space(&self) -> usize {
        self.tokens.len() + FIRST_TOKEN_ID as usize
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        id.checked_sub(FIRST_TOKEN_ID)
            .and_then(|i| self.tokens.get(i as usize))
            .map(String::as_str)
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let mut body = format!("# max_size={}\n", self.max_size);
        for t in &self.tokens {
            body.push_str(t);
            body.push('\n');
        }
        fs::write(path, body).map_err(|source| EncoderError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Vocab, EncoderError> {
        let raw = fs::read_to_string(path).map_err(|source| EncoderError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = raw.lines();
        let max_size = lines
            .next()
            .and_then(|h| h.strip_prefix("# max_size="))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| EncoderError::BadEmbeddingFile {
                path: path.to_path_buf(),
                reason: "missing `# max_size=` header".into(),
            })?;
        Ok(Vocab::from_tokens(lines.map(str::to_string).collect(), max_size))
    }
}

/// Whitespace-tokenizes the corpus and keeps the `max_size` most frequent
/// tokens, ties broken lexicographically.
pub fn build_vocab(corpus: &Corpus, max_size: usize) -> Result<Vocab, EncoderError> {
    if corpus.is_empty() {
        return Err(EncoderError::EmptyCorpus);
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for e in corpus.examples() {
        for tok in e.text.split_whitespace() {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = ranked
        .into_iter()
        .take(max_size)
        .map(|(t, _)| t.to_string())
        .collect();
    Ok(Vocab::from_tokens(tokens, max_size))
}

/// Token ids for `text`, truncated and right-padded with [`PAD_ID`] to
/// exactly `max_len`.
pub fn tokenize_to_ids(text: &str, vocab: &Vocab, max_len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = text
        .split_whitespace()
        .take(max_len)
        .map(|t| vocab.id(t))
        .collect();
    ids.resize(max_len, PAD_ID);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_corpus, Label, LanguageTag, Split};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn corpus_of(texts: &[&str]) -> Corpus {
        Corpus::from_pairs(
            texts.iter().map(|t| (t.to_string(), Label::Misandry)),
            Split::Train,
            LanguageTag::Synthetic,
        )
    }

    #[test]
    fn identical_texts_embed_identically() {
        let b = test_backend(16, 3);
        let texts: Vec<String> = ["x y", "a", "b", "c", "d", "x y"].iter().map(|s| s.to_string()).collect();
        let m = encode(&texts, &b).unwrap();
        assert_eq!(m.values().row(0), m.values().row(5));
        assert_eq!(m.dim(), 16);
    }

    #[test]
    fn hashing_backend_is_a_bag_of_tokens_mean() {
        let b = test_backend(8, 1);
        let m = encode(&["a b".into(), "b a".into(), "x".into(), "x x".into()], &b).unwrap();
        assert_eq!(m.values().row(0), m.values().row(1));
        assert_eq!(m.values().row(2), m.values().row(3));
        let x: Vec<f64> = b.token_vector("x").iter().map(|&v| f64::from(v as f32)).collect();
        assert_eq!(m.values().row(2).to_vec(), x);
        // hand oracle: the mean of the two token vectors
        let (a, bb) = (b.token_vector("a"), b.token_vector("b"));
        for j in 0..8 {
            assert!((m.values()[[0, j]] - (a[j] + bb[j]) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn disjoint_pools_have_separated_centroids() {
        let f = BTreeMap::from([(Label::Misandry, 0.5), (Label::Misogyny, 0.5)]);
        let c = synthesize_corpus(200, &f, 10, 5).unwrap();
        let m = encode(&c.texts(), &test_backend(32, 0)).unwrap();
        let centroid = |l: Label| {
            let rows: Vec<usize> = c.labels().iter().enumerate().filter(|(_, &x)| x == l).map(|(i, _)| i).collect();
            m.select(&rows).values().mean_axis(ndarray::Axis(0)).unwrap()
        };
        let gap = (&centroid(Label::Misandry) - &centroid(Label::Misogyny)).mapv(|v| v * v).sum().sqrt();
        assert!(gap > 0.1, "centroid gap {gap}");
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(encode(&[], &test_backend(4, 0)), Err(EncoderError::EmptyInput)));
    }

    struct Liar;
    impl EncoderBackend for Liar {
        fn id(&self) -> String {
            "liar".into()
        }
        fn dim(&self) -> usize {
            4
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EncoderError> {
            Ok(texts.iter().map(|_| vec![0.0; 3]).collect())
        }
    }

    #[test]
    fn dimension_violations_are_caught() {
        assert!(matches!(
            encode(&["a".into()], &Liar),
            Err(EncoderError::EmbeddingDimMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn vocab_frequency_ranking_and_truncation() {
        let v = build_vocab(&corpus_of(&["a a a b", "b c"]), 2).unwrap();
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.id("c"), UNK_ID);
        let v = build_vocab(&corpus_of(&["a a a b", "b c"]), 10).unwrap();
        assert_eq!(v.len(), 3);
        let v = build_vocab(&corpus_of(&["b a b a"]), 1).unwrap();
        assert_eq!(v.token(2), Some("a"));
        assert!(matches!(build_vocab(&corpus_of(&[]), 5), Err(EncoderError::EmptyCorpus)));
    }

    #[test]
    fn token_id_sequences() {
        let v = build_vocab(&corpus_of(&["t"]), 5).unwrap();
        assert_eq!(tokenize_to_ids("", &v, 4), vec![0, 0, 0, 0]);
        assert_eq!(tokenize_to_ids("t", &v, 3), vec![2, 0, 0]);
        assert_eq!(tokenize_to_ids("zz qq", &v, 2), vec![1, 1]);
        assert_eq!(tokenize_to_ids("t t t t", &v, 2), vec![2, 2]);
    }

    #[test]
    fn vocab_save_load() {
        let v = build_vocab(&corpus_of(&["x y y z"]), 64_000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    proptest! {
        #[test]
        fn vocab_ids_are_dense_and_sequences_fixed_length(texts in prop::collection::vec("[a-e ]{1,20}", 1..20), max in 1usize..8, max_len in 1usize..12) {
            let texts: Vec<&str> = texts.iter().map(String::as_str).collect();
            let v = build_vocab(&corpus_of(&texts), max).unwrap();
            prop_assert!(v.len() <= max);
            let mut ids: Vec<u32> = v.tokens.iter().map(|t| v.id(t)).collect();
            ids.sort();
            prop_assert_eq!(ids, (2..2 + v.len() as u32).collect::<Vec<_>>());
            for t in &texts {
                prop_assert_eq!(tokenize_to_ids(t, &v, max_len).len(), max_len);
            }
        }

        #[test]
        fn hashing_embeddings_are_finite(texts in prop::collection::vec("\\PC{0,30}", 1..10), dim in 2usize..40) {
            let m = encode(&texts, &test_backend(dim, 7)).unwrap();
            prop_assert!(m.values().iter().all(|v| v.is_finite()));
        }
    }
}
