//! BERT-family transformer encoder over a [`ParamStore`], reading Hugging
//! Face `config.json` + `model.safetensors` layouts (BERT, mBERT, MuRIL,
//! XLM-R). ALBERT-style shared-layer models are not supported.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderError, Vocab, PAD_ID};
use crate::nn::{self, ParamStore};

fn default_max_positions() -> usize {
    512
}

fn default_type_vocab() -> usize {
    2
}

fn default_eps() -> f64 {
    1e-12
}

fn default_model_type() -> String {
    "bert".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BertConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    #[serde(default = "default_max_positions")]
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_model_type")]
    pub model_type: String,
    #[serde(default)]
    pub pad_token_id: u32,
}

impl BertConfig {
    /// Small random-weight configuration for tests and desk runs.
    pub fn tiny(vocab_size: usize) -> Self {
        BertConfig {
            vocab_size,
            hidden_size: 32,
            num_hidden_layers: 2,
            num_attention_heads: 4,
            intermediate_size: 64,
            max_position_embeddings: 128,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            model_type: "bert".into(),
            pad_token_id: PAD_ID,
        }
    }

    fn check(&self) -> Result<(), EncoderError> {
        match self.model_type.as_str() {
            "bert" | "roberta" | "xlm-roberta" => {}
            other => {
                return Err(EncoderError::BackendUnavailable(format!(
                    "model_type `{other}` is not a supported BERT-family architecture"
                )))
            }
        }
        if self.hidden_size == 0
            || self.num_attention_heads == 0
            || self.hidden_size % self.num_attention_heads != 0
        {
            return Err(EncoderError::BackendUnavailable(
                "hidden_size must be a positive multiple of num_attention_heads".into(),
            ));
        }
        Ok(())
    }

    /// RoBERTa-style models number positions from `pad_token_id + 1`.
    fn position_offset(&self) -> usize {
        if self.model_type.contains("roberta") {
            self.pad_token_id as usize + 1
        } else {
            0
        }
    }
}

pub struct BertModel {
    config: BertConfig,
    params: ParamStore,
}

fn tensor_err(e: candle_core::Error) -> EncoderError {
    EncoderError::BackendUnavailable(e.to_string())
}

impl BertModel {
    /// Randomly initialized encoder (uniform weights with std 0.02).
    pub fn random(config: BertConfig, seed: u64, dtype: DType) -> Result<Self, EncoderError> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new(dtype);
        let bound = 0.02 * 3f64.sqrt();
        let h = config.hidden_size;
        let mut build = || -> candle_core::Result<()> {
            p.uniform("embeddings.word_embeddings.weight", &[config.vocab_size, h], bound, &mut rng)?;
            p.uniform(
                "embeddings.position_embeddings.weight",
                &[config.max_position_embeddings, h],
                bound,
                &mut rng,
            )?;
            p.uniform(
                "embeddings.token_type_embeddings.weight",
                &[config.type_vocab_size, h],
                bound,
                &mut rng,
            )?;
            p.constant("embeddings.LayerNorm.weight", &[h], 1.0)?;
            p.constant("embeddings.LayerNorm.bias", &[h], 0.0)?;
            for l in 0..config.num_hidden_layers {
                let pre = format!("encoder.layer.{l}");
                for (name, out, inp) in [
                    ("attention.self.query", h, h),
                    ("attention.self.key", h, h),
                    ("attention.self.value", h, h),
                    ("attention.output.dense", h, h),
                    ("intermediate.dense", config.intermediate_size, h),
                    ("output.dense", h, config.intermediate_size),
                ] {
                    p.uniform(&format!("{pre}.{name}.weight"), &[out, inp], bound, &mut rng)?;
                    p.constant(&format!("{pre}.{name}.bias"), &[out], 0.0)?;
                }
                for ln in ["attention.output.LayerNorm", "output.LayerNorm"] {
                    p.constant(&format!("{pre}.{ln}.weight"), &[h], 1.0)?;
                    p.constant(&format!("{pre}.{ln}.bias"), &[h], 0.0)?;
                }
            }
            Ok(())
        };
        build().map_err(tensor_err)?;
        Ok(BertModel { config, params: p })
    }

    /// Loads `config.json` and `model.safetensors` from a model directory.
    /// Weight names may carry a `bert.` / `roberta.` prefix.
    pub fn from_dir(dir: &Path, dtype: DType) -> Result<Self, EncoderError> {
        let cfg_path = dir.join("config.json");
        let raw = fs::read_to_string(&cfg_path).map_err(|source| EncoderError::Io {
            path: cfg_path.clone(),
            source,
        })?;
        let config: BertConfig = serde_json::from_str(&raw)
            .map_err(|e| EncoderError::BackendUnavailable(format!("{}: {e}", cfg_path.display())))?;
        let weights = dir.join("model.safetensors");
        if !weights.exists() {
            return Err(EncoderError::BackendUnavailable(format!(
                "{} not found (only safetensors weights are read)",
                weights.display()
            )));
        }
        let data = candle_core::safetensors::load(&weights, &Device::Cpu).map_err(tensor_err)?;
        let model = BertModel::random(config, 0, dtype)?;
        model.load_weights(&data)?;
        Ok(model)
    }

    pub fn load_weights(&self, data: &HashMap<String, Tensor>) -> Result<(), EncoderError> {
        let probe = "embeddings.word_embeddings.weight";
        let prefix = ["", "bert.", "roberta.", "model."]
            .into_iter()
            .find(|p| data.contains_key(&format!("{p}{probe}")))
            .ok_or_else(|| EncoderError::BackendUnavailable(format!("weights lack `{probe}`")))?;
        self.params.load_map(data, prefix).map_err(tensor_err)
    }

    pub fn config(&self) -> &BertConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    /// Final hidden states (B x T x H) for right-padded `ids`, where `lengths`
    /// gives the unpadded length of each row.
    pub fn forward(&self, ids: &[Vec<u32>], lengths: &[usize]) -> candle_core::Result<Tensor> {
        let p = &self.params;
        let dtype = p.dtype();
        let (b, t) = (ids.len(), ids.first().map_or(0, Vec::len));
        let h = self.config.hidden_size;
        let heads = self.config.num_attention_heads;
        let hd = h / heads;
        let eps = self.config.layer_norm_eps;
        if t + self.config.position_offset() > self.config.max_position_embeddings {
            candle_core::bail!("sequence length {t} exceeds the position table");
        }
        let flat: Vec<u32> = ids.iter().flatten().copied().collect();
        let idx = Tensor::from_vec(flat, b * t, &Device::Cpu)?;
        let words = p.get("embeddings.word_embeddings.weight")?.index_select(&idx, 0)?.reshape((b, t, h))?;
        let positions = p
            .get("embeddings.position_embeddings.weight")?
            .narrow(0, self.config.position_offset(), t)?;
        let types = p.get("embeddings.token_type_embeddings.weight")?.narrow(0, 0, 1)?;
        let mut x = words.broadcast_add(&positions)?.broadcast_add(&types)?;
        x = nn::layer_norm(
            &x,
            p.get("embeddings.LayerNorm.weight")?,
            p.get("embeddings.LayerNorm.bias")?,
            eps,
        )?;

        let bias: Vec<f64> = lengths
            .iter()
            .flat_map(|&len| (0..t).map(move |j| if j < len { 0.0 } else { -1e9 }))
            .collect();
        let mask = Tensor::from_vec(bias, (b, 1, 1, t), &Device::Cpu)?.to_dtype(dtype)?;
        let scale = 1.0 / (hd as f64).sqrt();
        for l in 0..self.config.num_hidden_layers {
            let w = |n: &str| p.get(&format!("encoder.layer.{l}.{n}"));
            let split = |y: Tensor| y.reshape((b, t, heads, hd))?.transpose(1, 2)?.contiguous();
            let q = split(nn::linear(&x, w("attention.self.query.weight")?, Some(w("attention.self.query.bias")?))?)?;
            let k = split(nn::linear(&x, w("attention.self.key.weight")?, Some(w("attention.self.key.bias")?))?)?;
            let v = split(nn::linear(&x, w("attention.self.value.weight")?, Some(w("attention.self.value.bias")?))?)?;
            let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(&mask)?;
            let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
            let ctx = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, h))?;
            let attn = nn::linear(
                &ctx,
                w("attention.output.dense.weight")?,
                Some(w("attention.output.dense.bias")?),
            )?;
            x = nn::layer_norm(
                &(attn + &x)?,
                w("attention.output.LayerNorm.weight")?,
                w("attention.output.LayerNorm.bias")?,
                eps,
            )?;
            let inter = nn::linear(&x, w("intermediate.dense.weight")?, Some(w("intermediate.dense.bias")?))?.gelu_erf()?;
            let out = nn::linear(&inter, w("output.dense.weight")?, Some(w("output.dense.bias")?))?;
            x = nn::layer_norm(
                &(out + &x)?,
                w("output.LayerNorm.weight")?,
                w("output.LayerNorm.bias")?,
                eps,
            )?;
        }
        Ok(x)
    }
}

/// Sentence pooling over final hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            other => Err(format!("unknown pooling `{other}` (expected cls or mean)")),
        }
    }
}

/// (B x T x H) hidden states to (B x H).
pub fn pool(hidden: &Tensor, lengths: &[usize], pooling: Pooling) -> candle_core::Result<Tensor> {
    match pooling {
        Pooling::Cls => hidden.narrow(1, 0, 1)?.squeeze(1),
        Pooling::Mean => {
            let t = hidden.dim(1)?;
            let m: Vec<f64> = lengths
                .iter()
                .flat_map(|&len| (0..t).map(move |j| if j < len { 1.0 / len.max(1) as f64 } else { 0.0 }))
                .collect();
            let m = Tensor::from_vec(m, (lengths.len(), t, 1), &Device::Cpu)?.to_dtype(hidden.dtype())?;
            hidden.broadcast_mul(&m)?.sum(1)
        }
    }
}

/// Subword or word tokenizer feeding a [`BertModel`].
pub enum TextTokenizer {
    /// Whitespace words through a [`Vocab`]; `[CLS]` and `[SEP]` take the two
    /// ids after the vocabulary's id space.
    Word(Vocab),
    Hf { tokenizer: Box<tokenizers::Tokenizer>, pad_id: u32 },
}

impl TextTokenizer {
    pub fn from_file(path: &Path, pad_id: u32) -> Result<Self, EncoderError> {
        let tokenizer = tokenizers::Tokenizer::from_file(path)
            .map_err(|e| EncoderError::BackendUnavailable(format!("{}: {e}", path.display())))?;
        Ok(TextTokenizer::Hf {
            tokenizer: Box::new(tokenizer),
            pad_id,
        })
    }

    /// Embedding rows needed by a word tokenizer.
    pub fn word_id_space(vocab: &Vocab) -> usize {
        vocab.id_space() + 2
    }

    pub fn pad_id(&self) -> u32 {
        match self {
            TextTokenizer::Word(_) => PAD_ID,
            TextTokenizer::Hf { pad_id, .. } => *pad_id,
        }
    }

    /// Ids with special tokens, truncated to `max_len` (the final special
    /// token is kept).
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<u32>, EncoderError> {
        let max_len = max_len.max(2);
        let mut ids = match self {
            TextTokenizer::Word(vocab) => {
                let cls = vocab.id_space() as u32;
                let mut ids = vec![cls];
                ids.extend(text.split_whitespace().map(|w| vocab.id(w)));
                ids.push(cls + 1);
                ids
            }
            TextTokenizer::Hf { tokenizer, .. } => tokenizer
                .encode(text, true)
                .map_err(|e| EncoderError::BackendUnavailable(e.to_string()))?
                .get_ids()
                .to_vec(),
        };
        if ids.len() > max_len {
            let last = *ids.last().expect("non-empty");
            ids.truncate(max_len - 1);
            ids.push(last);
        }
        Ok(ids)
    }

    /// Right-padded batch plus unpadded lengths.
    pub fn encode_batch(&self, texts: &[String], max_len: usize) -> Result<(Vec<Vec<u32>>, Vec<usize>), EncoderError> {
        let mut rows = texts
            .iter()
            .map(|t| self.encode(t, max_len))
            .collect::<Result<Vec<_>, _>>()?;
        let lengths: Vec<usize> = rows.iter().map(Vec::len).collect();
        let t = lengths.iter().copied().max().unwrap_or(1);
        for r in &mut rows {
            r.resize(t, self.pad_id());
        }
        Ok((rows, lengths))
    }

    /// Writes the tokenizer next to a checkpoint (`vocab.txt` or
    /// `tokenizer.json`).
    pub fn save(&self, dir: &Path) -> Result<(), EncoderError> {
        match self {
            TextTokenizer::Word(vocab) => vocab.save(&dir.join("vocab.txt")),
            TextTokenizer::Hf { tokenizer, .. } => tokenizer
                .save(dir.join("tokenizer.json"), false)
                .map_err(|e| EncoderError::BackendUnavailable(e.to_string())),
        }
    }

    pub fn load(dir: &Path, pad_id: u32) -> Result<Self, EncoderError> {
        let hf = dir.join("tokenizer.json");
        if hf.exists() {
            return TextTokenizer::from_file(&hf, pad_id);
        }
        Ok(TextTokenizer::Word(Vocab::load(&dir.join("vocab.txt"))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Label, LanguageTag, Split};
    use crate::encoder::build_vocab;

    fn vocab() -> Vocab {
        let c = Corpus::from_pairs(
            [("a b c".to_string(), Label::Misogyny), ("b c d".to_string(), Label::HopeSpeech)],
            Split::Train,
            LanguageTag::Synthetic,
        );
        build_vocab(&c, 100).unwrap()
    }

    #[test]
    fn forward_shapes_and_padding_invariance() {
        let v = vocab();
        let tok = TextTokenizer::Word(v.clone());
        let model = BertModel::random(BertConfig::tiny(TextTokenizer::word_id_space(&v)), 1, DType::F64).unwrap();
        let (ids, lens) = tok.encode_batch(&["a b".into(), "a b c d a".into()], 16).unwrap();
        assert_eq!(lens, vec![4, 7]);
        let hidden = model.forward(&ids, &lens).unwrap();
        assert_eq!(hidden.dims(), &[2, 7, 32]);
        let (solo, solo_len) = tok.encode_batch(&["a b".into()], 16).unwrap();
        let alone = model.forward(&solo, &solo_len).unwrap();
        let cls_batched: Vec<f64> = pool(&hidden, &lens, Pooling::Cls).unwrap().to_vec2().unwrap()[0].clone();
        let cls_alone: Vec<f64> = pool(&alone, &solo_len, Pooling::Cls).unwrap().to_vec2().unwrap()[0].clone();
        for (a, b) in cls_batched.iter().zip(&cls_alone) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn truncation_keeps_the_closing_token() {
        let v = vocab();
        let tok = TextTokenizer::Word(v.clone());
        let ids = tok.encode("a b c d a b c d", 4).unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], v.id_space() as u32);
        assert_eq!(ids[3], v.id_space() as u32 + 1);
    }

    #[test]
    fn weights_round_trip_through_a_model_dir_with_prefix() {
        let v = vocab();
        let config = BertConfig::tiny(TextTokenizer::word_id_space(&v));
        let model = BertModel::random(config.clone(), 7, DType::F32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let map: HashMap<String, Tensor> = model
            .params()
            .names()
            .map(|n| (format!("bert.{n}"), model.params().get(n).unwrap().clone()))
            .collect();
        candle_core::safetensors::save(&map, dir.path().join("model.safetensors")).unwrap();
        fs::write(dir.path().join("config.json"), serde_json::to_string(&config).unwrap()).unwrap();
        let loaded = BertModel::from_dir(dir.path(), DType::F32).unwrap();
        let (ids, lens) = TextTokenizer::Word(v).encode_batch(&["a c".into()], 8).unwrap();
        let a: Vec<f32> = model.forward(&ids, &lens).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = loaded.forward(&ids, &lens).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn albert_configs_are_refused() {
        let mut config = BertConfig::tiny(10);
        config.model_type = "albert".into();
        assert!(matches!(
            BertModel::random(config, 0, DType::F32),
            Err(EncoderError::BackendUnavailable(_))
        ));
    }
}
