//! Frozen transformer sentence encoders loaded from local model directories.
//! Hub identifiers resolve only against a local cache; nothing is downloaded.

use std::env;
use std::path::{Path, PathBuf};

use candle_core::DType;

use super::bert::{pool, BertModel, Pooling, TextTokenizer};
use super::{EncoderBackend, EncoderError};

/// Directory searched for hub identifiers such as `bert-base-multilingual-cased`.
pub const HUB_CACHE_ENV: &str = "COMMENTCLF_HUB_CACHE";

fn is_model_dir(p: &Path) -> bool {
    p.join("config.json").is_file()
}

/// Resolves a local path or a hub id. Hub ids are looked up in
/// `$COMMENTCLF_HUB_CACHE/<id>` and in the `models--org--name/snapshots/*`
/// layout of a Hugging Face cache.
pub fn resolve_model_dir(id_or_path: &str) -> Result<PathBuf, EncoderError> {
    let direct = Path::new(id_or_path);
    if is_model_dir(direct) {
        return Ok(direct.to_path_buf());
    }
    let unavailable = |why: String| EncoderError::BackendUnavailable(format!("`{id_or_path}`: {why}"));
    let cache = env::var_os(HUB_CACHE_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| unavailable(format!("not a model directory and {HUB_CACHE_ENV} is unset")))?;
    let flat = cache.join(id_or_path);
    if is_model_dir(&flat) {
        return Ok(flat);
    }
    let snapshots = cache
        .join(format!("models--{}", id_or_path.replace('/', "--")))
        .join("snapshots");
    if let Ok(entries) = std::fs::read_dir(&snapshots) {
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_model_dir(p)).collect();
        dirs.sort();
        if let Some(d) = dirs.pop() {
            return Ok(d);
        }
    }
    Err(unavailable(format!("not found under {}", cache.display())))
}

/// Loads encoder weights and tokenizer from a resolved directory.
pub fn load_encoder(dir: &Path, dtype: DType) -> Result<(BertModel, TextTokenizer), EncoderError> {
    let model = BertModel::from_dir(dir, dtype)?;
    let tokenizer = TextTokenizer::load(dir, model.config().pad_token_id)?;
    Ok((model, tokenizer))
}

/// Pooled final hidden states of a frozen encoder.
pub struct PretrainedBackend {
    id: String,
    model: BertModel,
    tokenizer: TextTokenizer,
    pooling: Pooling,
    max_len: usize,
}

impl PretrainedBackend {
    pub fn new(id: String, model: BertModel, tokenizer: TextTokenizer, pooling: Pooling, max_len: usize) -> Self {
        PretrainedBackend {
            id,
            model,
            tokenizer,
            pooling,
            max_len,
        }
    }

    pub fn load(id_or_path: &str, pooling: Pooling, max_len: usize) -> Result<Self, EncoderError> {
        let dir = resolve_model_dir(id_or_path)?;
        let (model, tokenizer) = load_encoder(&dir, DType::F32)?;
        Ok(PretrainedBackend::new(id_or_path.to_string(), model, tokenizer, pooling, max_len))
    }
}

impl EncoderBackend for PretrainedBackend {
    fn id(&self) -> String {
        format!("{}/pool={:?}/max_len={}", self.id, self.pooling, self.max_len).to_lowercase()
    }

    fn dim(&self) -> usize {
        self.model.hidden_size()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EncoderError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(16) {
            let (ids, lens) = self.tokenizer.encode_batch(chunk, self.max_len)?;
            let pooled = self
                .model
                .forward(&ids, &lens)
                .and_then(|h| pool(&h, &lens, self.pooling))
                .and_then(|p| p.to_dtype(DType::F32)?.to_vec2::<f32>())
                .map_err(|e| EncoderError::BackendUnavailable(e.to_string()))?;
            out.extend(pooled);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_ids_report_backend_unavailable() {
        let err = resolve_model_dir("surely/not-a-local-model").unwrap_err();
        assert!(matches!(err, EncoderError::BackendUnavailable(_)));
    }
}
