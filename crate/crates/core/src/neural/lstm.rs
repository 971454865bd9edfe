//! Word-level LSTM classifier: embedding, spatial dropout, stacked LSTM with a
//! single bias per gate block, linear output, softmax.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    decode, early_stopping_loop, io_err, label_space, Checkpoint, MonitoredMetric, NeuralError, TrainOptions,
    TrainingHistory,
};
use crate::corpus::{Corpus, Label};
use crate::encoder::{tokenize_to_ids, Vocab, PAD_ID};
use crate::nn::{self, ParamStore};

pub const MAX_LSTM_VOCAB: usize = 64_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmSpec {
    /// Word slots; the embedding table adds two rows for padding and unknown.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub spatial_dropout: f64,
    pub lstm_layers: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub monitored_metric: MonitoredMetric,
}

impl Default for LstmSpec {
    fn default() -> Self {
        LstmSpec {
            vocab_size: MAX_LSTM_VOCAB,
            embed_dim: 100,
            spatial_dropout: 0.2,
            lstm_layers: 1,
            hidden_dim: 64,
            num_classes: 8,
            max_len: 64,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 20,
            patience: 3,
            monitored_metric: MonitoredMetric::MacroF1,
        }
    }
}

impl LstmSpec {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::InvalidSpec(m.to_string()));
        if self.vocab_size == 0 || self.vocab_size > MAX_LSTM_VOCAB {
            return bad("vocab_size must be in 1..=64000");
        }
        if [self.embed_dim, self.lstm_layers, self.hidden_dim, self.num_classes, self.max_len].contains(&0) {
            return bad("dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.spatial_dropout) {
            return bad("spatial_dropout must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("learning_rate, batch_size, max_epochs and patience must be positive");
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn num_params(&self) -> usize {
        let (e, h, c) = (self.embed_dim, self.hidden_dim, self.num_classes);
        let lstm: usize = (0..self.lstm_layers)
            .map(|l| {
                let input = if l == 0 { e } else { h };
                4 * (h * (input + h) + h)
            })
            .sum();
        (self.vocab_size + 2) * e + lstm + (h * c + c)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    spec: LstmSpec,
    labels: Vec<String>,
    f64_weights: bool,
}

pub struct LstmModel {
    spec: LstmSpec,
    labels: Vec<Label>,
    params: ParamStore,
}

impl LstmModel {
    /// Randomly initialized model predicting over `labels`.
    pub fn new(spec: LstmSpec, labels: Vec<Label>, seed: u64, dtype: DType) -> Result<Self, NeuralError> {
        spec.validate()?;
        if labels.len() > spec.num_classes || labels.is_empty() {
            return Err(NeuralError::TooManyClasses {
                found: labels.len(),
                num_classes: spec.num_classes,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new(dtype);
        let (e, h, c) = (spec.embed_dim, spec.hidden_dim, spec.num_classes);
        p.uniform("embedding.weight", &[spec.vocab_size + 2, e], 0.05, &mut rng)?;
        let k = 1.0 / (h as f64).sqrt();
        for l in 0..spec.lstm_layers {
            let input = if l == 0 { e } else { h };
            p.uniform(&format!("lstm.{l}.weight_ih"), &[4 * h, input], k, &mut rng)?;
            p.uniform(&format!("lstm.{l}.weight_hh"), &[4 * h, h], k, &mut rng)?;
            p.uniform(&format!("lstm.{l}.bias"), &[4 * h], k, &mut rng)?;
        }
        p.uniform("classifier.weight", &[c, h], k, &mut rng)?;
        p.uniform("classifier.bias", &[c], k, &mut rng)?;
        Ok(LstmModel { spec, labels, params: p })
    }

    pub fn spec(&self) -> &LstmSpec {
        &self.spec
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Token ids for each text, padded to `max_len`.
    pub fn encode_texts(&self, texts: &[String], vocab: &Vocab) -> Vec<Vec<u32>> {
        texts.iter().map(|t| tokenize_to_ids(t, vocab, self.spec.max_len)).collect()
    }

    /// Logits (B x num_classes). With `dropout_rng` set, spatial dropout is
    /// applied as in training.
    pub fn logits(&self, ids: &[Vec<u32>], dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Tensor, NeuralError> {
        let dtype = self.params.dtype();
        let b = ids.len();
        let lengths: Vec<usize> = ids
            .iter()
            .map(|row| row.iter().take(self.spec.max_len).take_while(|&&t| t != PAD_ID).count())
            .collect();
        let t_max = lengths.iter().copied().max().unwrap_or(0).max(1);
        let mut flat = Vec::with_capacity(b * t_max);
        for row in ids {
            for t in 0..t_max {
                let id = row.get(t).copied().unwrap_or(PAD_ID);
                if id as usize >= self.spec.vocab_size + 2 {
                    return Err(NeuralError::VocabMismatch {
                        vocab: id as usize,
                        spec: self.spec.vocab_size,
                    });
                }
                flat.push(id);
            }
        }
        let idx = Tensor::from_vec(flat, b * t_max, &Device::Cpu)?;
        let e = self.spec.embed_dim;
        let mut x = self
            .params
            .get("embedding.weight")?
            .index_select(&idx, 0)?
            .reshape((b, t_max, e))?;
        if let Some(rng) = dropout_rng {
            if self.spec.spatial_dropout > 0.0 {
                // one mask per sequence and channel, shared across time steps
                let mask = nn::dropout_mask(&[b, 1, e], self.spec.spatial_dropout, dtype, rng)?;
                x = x.broadcast_mul(&mask)?;
            }
        }
        let step_mask: Vec<Tensor> = (0..t_max)
            .map(|t| {
                let m: Vec<f64> = lengths.iter().map(|&len| if t < len { 1.0 } else { 0.0 }).collect();
                Tensor::from_vec(m, (b, 1), &Device::Cpu)?.to_dtype(dtype)
            })
            .collect::<Result<_, _>>()?;
        let h_dim = self.spec.hidden_dim;
        let mut h = Tensor::zeros((b, h_dim), dtype, &Device::Cpu)?;
        for l in 0..self.spec.lstm_layers {
            let w_ih = self.params.get(&format!("lstm.{l}.weight_ih"))?;
            let w_hh = self.params.get(&format!("lstm.{l}.weight_hh"))?;
            let bias = self.params.get(&format!("lstm.{l}.bias"))?;
            let proj = nn::linear(&x, w_ih, Some(bias))?;
            let w_hh_t = w_hh.t()?;
            h = Tensor::zeros((b, h_dim), dtype, &Device::Cpu)?;
            let mut c = Tensor::zeros((b, h_dim), dtype, &Device::Cpu)?;
            let mut outputs = Vec::with_capacity(t_max);
            for (t, m) in step_mask.iter().enumerate() {
                let gates = (proj.narrow(1, t, 1)?.squeeze(1)? + h.matmul(&w_hh_t)?)?;
                let i = nn::sigmoid(&gates.narrow(1, 0, h_dim)?)?;
                let f = nn::sigmoid(&gates.narrow(1, h_dim, h_dim)?)?;
                let g = gates.narrow(1, 2 * h_dim, h_dim)?.tanh()?;
                let o = nn::sigmoid(&gates.narrow(1, 3 * h_dim, h_dim)?)?;
                let c_new = ((f * &c)? + (i * g)?)?;
                let h_new = (o * c_new.tanh()?)?;
                // padded steps carry the previous state through unchanged
                let keep = m.affine(-1.0, 1.0)?;
                c = (c_new.broadcast_mul(m)? + c.broadcast_mul(&keep)?)?;
                h = (h_new.broadcast_mul(m)? + h.broadcast_mul(&keep)?)?;
                outputs.push(h.clone());
            }
            x = Tensor::stack(&outputs, 1)?;
        }
        Ok(nn::linear(
            &h,
            self.params.get("classifier.weight")?,
            Some(self.params.get("classifier.bias")?),
        )?)
    }

    /// Row-wise class probabilities (B x num_classes).
    pub fn probabilities(&self, ids: &[Vec<u32>]) -> Result<Vec<Vec<f64>>, NeuralError> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(256) {
            out.extend(nn::softmax_rows(&self.logits(chunk, None)?)?);
        }
        Ok(out)
    }

    pub fn predict_ids(&self, ids: &[Vec<u32>]) -> Result<Vec<Label>, NeuralError> {
        Ok(decode(&self.probabilities(ids)?, &self.labels))
    }

    pub fn predict(&self, texts: &[String], vocab: &Vocab) -> Result<Vec<Label>, NeuralError> {
        self.predict_ids(&self.encode_texts(texts, vocab))
    }

    /// Cross-entropy of a batch without dropout; `targets` index the label list.
    pub fn loss(&self, ids: &[Vec<u32>], targets: &[usize], weights: Option<&[f64]>) -> Result<Tensor, NeuralError> {
        Ok(nn::cross_entropy(&self.logits(ids, None)?, targets, weights)?)
    }

    pub fn target_index(&self, label: Label) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    pub fn load(dir: &Path) -> Result<LstmModel, NeuralError> {
        let meta_path = dir.join("model.json");
        let raw = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: ModelMeta = serde_json::from_str(&raw).map_err(|e| NeuralError::BadCheckpoint {
            path: meta_path.clone(),
            reason: e.to_string(),
        })?;
        let labels = meta
            .labels
            .iter()
            .map(|l| l.parse())
            .collect::<Result<Vec<Label>, _>>()
            .map_err(|e| NeuralError::BadCheckpoint {
                path: meta_path.clone(),
                reason: e.to_string(),
            })?;
        let dtype = if meta.f64_weights { DType::F64 } else { DType::F32 };
        let model = LstmModel::new(meta.spec, labels, 0, dtype)?;
        model.params.load(&dir.join("model.safetensors"))?;
        Ok(model)
    }
}

impl Checkpoint for LstmModel {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.params]
    }

    fn save(&self, dir: &Path) -> Result<(), NeuralError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = ModelMeta {
            spec: self.spec.clone(),
            labels: self.labels.iter().map(|l| l.as_str().to_string()).collect(),
            f64_weights: self.params.dtype() == DType::F64,
        };
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(io_err(&path))?;
        self.params.save(&dir.join("model.safetensors"))?;
        Ok(())
    }
}

impl LstmModel {
    pub fn save(&self, dir: &Path) -> Result<(), NeuralError> {
        Checkpoint::save(self, dir)
    }
}

/// Trains with Adam and cross-entropy, stopping early on the dev metric, and
/// returns the best-dev model.
pub fn train_lstm(
    train: &Corpus,
    vocab: &Vocab,
    spec: &LstmSpec,
    dev: &Corpus,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(LstmModel, TrainingHistory), NeuralError> {
    spec.validate()?;
    if vocab.len() > spec.vocab_size {
        return Err(NeuralError::VocabMismatch {
            vocab: vocab.len(),
            spec: spec.vocab_size,
        });
    }
    if dev.is_empty() {
        return Err(NeuralError::EmptyDev);
    }
    let train_labels = train.labels();
    let labels = label_space(&train_labels, spec.num_classes)?;
    let model = LstmModel::new(spec.clone(), labels, seed, DType::F32)?;
    let ids = model.encode_texts(&train.texts(), vocab);
    let targets: Vec<usize> = train_labels
        .iter()
        .map(|&l| model.target_index(l).expect("label in space"))
        .collect();
    let weights: Option<Vec<f64>> = opts.class_weights.as_ref().map(|cw| cw.per_example(&train_labels));
    let dev_ids = model.encode_texts(&dev.texts(), vocab);
    let dev_gold = dev.labels();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1575);
    let mut opt = nn::adam(&model.params, spec.learning_rate)?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let history = early_stopping_loop(
        &model,
        spec.max_epochs,
        spec.patience,
        opts.checkpoints.as_ref(),
        |_| {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(spec.batch_size) {
                let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| ids[i].clone()).collect();
                let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
                let w: Option<Vec<f64>> = weights.as_ref().map(|w| chunk.iter().map(|&i| w[i]).collect());
                let logits = model.logits(&batch, Some(&mut rng))?;
                let loss = nn::cross_entropy(&logits, &t, w.as_deref())?;
                opt.backward_step(&loss)?;
                total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            }
            Ok(total / ids.len() as f64)
        },
        || {
            let pred = model.predict_ids(&dev_ids)?;
            Ok(spec.monitored_metric.score(&dev_gold, &pred)?)
        },
    )?;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_corpus, LanguageTag, Split, TAMIL_CLASS_SHARES};
    use crate::corpus::normalized_shares;
    use crate::encoder::build_vocab;

    fn small_spec() -> LstmSpec {
        LstmSpec {
            vocab_size: 500,
            embed_dim: 16,
            hidden_dim: 12,
            max_len: 12,
            ..LstmSpec::default()
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let spec = LstmSpec {
            vocab_size: 1000,
            ..LstmSpec::default()
        };
        let expected = 1002 * 100 + 4 * (64 * (100 + 64) + 64) + (64 * 8 + 8);
        assert_eq!(spec.num_params(), expected);
        let m = LstmModel::new(spec, Label::ACTIVE.to_vec(), 0, DType::F32).unwrap();
        assert_eq!(m.num_params(), expected);
    }

    #[test]
    fn probabilities_are_normalized_rows() {
        let spec = small_spec();
        let m = LstmModel::new(spec.clone(), Label::ACTIVE.to_vec(), 1, DType::F32).unwrap();
        let ids: Vec<Vec<u32>> = (0..5)
            .map(|i| {
                let mut r: Vec<u32> = (0..i + 1).map(|t| 2 + (t * 7 % 400) as u32).collect();
                r.resize(spec.max_len, PAD_ID);
                r
            })
            .collect();
        let p = m.probabilities(&ids).unwrap();
        assert_eq!(p.len(), 5);
        for row in p {
            assert_eq!(row.len(), 8);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn padding_does_not_change_predictions() {
        let m = LstmModel::new(small_spec(), Label::ACTIVE.to_vec(), 2, DType::F64).unwrap();
        let short = vec![vec![5, 9, 3]];
        let mut padded = vec![5, 9, 3];
        padded.resize(12, PAD_ID);
        // batching with a longer row forces extra padded time steps
        let long = vec![padded, vec![4; 12]];
        let a = m.probabilities(&short).unwrap();
        let b = m.probabilities(&long).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let m = LstmModel::new(small_spec(), Label::ACTIVE.to_vec(), 2, DType::F32).unwrap();
        assert!(matches!(m.probabilities(&[vec![9999]]), Err(NeuralError::VocabMismatch { .. })));
    }

    #[test]
    fn trains_and_checkpoints_on_synthetic_data() {
        let shares = normalized_shares(&TAMIL_CLASS_SHARES);
        let corpus = synthesize_corpus(300, &shares, 20, 5).unwrap();
        let (train, dev) = corpus.stratified_split(0.25, 1);
        let dev = dev.with_split(Split::Dev);
        assert_eq!(dev.language(), LanguageTag::Synthetic);
        let vocab = build_vocab(&train, 500).unwrap();
        let spec = LstmSpec {
            max_epochs: 3,
            ..small_spec()
        };
        let dir = tempfile::tempdir().unwrap();
        let ck = super::super::CheckpointDir::new(dir.path(), "run");
        let opts = TrainOptions {
            checkpoints: Some(ck.clone()),
            class_weights: None,
        };
        let (model, history) = train_lstm(&train, &vocab, &spec, &dev, 3, &opts).unwrap();
        assert!(!history.is_empty() && history.len() <= 3);
        let (best, metric) = ck.read_best().unwrap();
        assert_eq!(Some(best), history.best_epoch());
        assert!((metric - history.best_metric().unwrap()).abs() < 1e-6);
        // the returned model is the best-dev one
        let pred = model.predict(&dev.texts(), &vocab).unwrap();
        let score = crate::metrics::macro_f1(&dev.labels(), &pred).unwrap();
        assert!((score - history.best_metric().unwrap()).abs() < 1e-9);
        let reloaded = LstmModel::load(&ck.epoch_dir(1)).unwrap();
        assert_eq!(reloaded.labels(), model.labels());
        assert!(matches!(
            train_lstm(&train, &vocab, &spec, &Corpus::from_pairs(Vec::<(String, Label)>::new(), Split::Dev, LanguageTag::Synthetic), 3, &TrainOptions::default()),
            Err(NeuralError::EmptyDev)
        ));
    }
}
