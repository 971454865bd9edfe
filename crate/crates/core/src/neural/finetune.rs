//! Sequence classification by end-to-end fine-tuning of a BERT-family
//! encoder: `[CLS]` state, dropout, linear layer.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{decode, early_stopping_loop, io_err, label_space, Checkpoint, MonitoredMetric, NeuralError, TrainOptions, TrainingHistory};
use crate::corpus::{Corpus, Label};
use crate::encoder::{build_vocab, load_encoder, resolve_model_dir, BertConfig, BertModel, Pooling, TextTokenizer};
use crate::nn::{self, ParamStore};

/// Encoder id selecting a small random-weight encoder whose word vocabulary
/// is built from the training corpus.
pub const TEST_ENCODER_ID: &str = "test:tiny-bert";

const TEST_ENCODER_VOCAB: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSpec {
    /// Hub id, local model directory, or [`TEST_ENCODER_ID`].
    pub encoder_id: String,
    pub num_classes: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub monitored_metric: MonitoredMetric,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        FinetuneSpec {
            encoder_id: TEST_ENCODER_ID.into(),
            num_classes: 8,
            max_epochs: 10,
            patience: 3,
            monitored_metric: MonitoredMetric::MacroF1,
            learning_rate: 2e-5,
            batch_size: 16,
            seed: 0,
            max_len: 128,
            dropout: 0.1,
        }
    }
}

impl FinetuneSpec {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::InvalidSpec(m.to_string()));
        if self.encoder_id.trim().is_empty() {
            return bad("encoder_id is empty");
        }
        if self.num_classes == 0 || self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return bad("num_classes, max_epochs, patience and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) || self.max_len < 2 {
            return bad("dropout must be in [0, 1) and max_len >= 2");
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    spec: FinetuneSpec,
    labels: Vec<String>,
}

pub struct SequenceClassifier {
    spec: FinetuneSpec,
    labels: Vec<Label>,
    encoder: BertModel,
    tokenizer: TextTokenizer,
    head: ParamStore,
}

impl SequenceClassifier {
    fn new(
        spec: FinetuneSpec,
        labels: Vec<Label>,
        encoder: BertModel,
        tokenizer: TextTokenizer,
    ) -> Result<Self, NeuralError> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc1a5);
        let mut head = ParamStore::new(encoder.params().dtype());
        let h = encoder.hidden_size();
        let k = 1.0 / (h as f64).sqrt();
        head.uniform("classifier.weight", &[spec.num_classes, h], k, &mut rng)?;
        head.constant("classifier.bias", &[spec.num_classes], 0.0)?;
        Ok(SequenceClassifier {
            spec,
            labels,
            encoder,
            tokenizer,
            head,
        })
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn spec(&self) -> &FinetuneSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &BertModel {
        &self.encoder
    }

    fn logits_for(&self, ids: &[Vec<u32>], lengths: &[usize], dropout: Option<&mut ChaCha8Rng>) -> Result<Tensor, NeuralError> {
        let hidden = self.encoder.forward(ids, lengths)?;
        let mut pooled = crate::encoder::bert::pool(&hidden, lengths, Pooling::Cls)?;
        if let Some(rng) = dropout {
            if self.spec.dropout > 0.0 {
                let mask = nn::dropout_mask(pooled.dims(), self.spec.dropout, pooled.dtype(), rng)?;
                pooled = pooled.mul(&mask)?;
            }
        }
        Ok(nn::linear(
            &pooled,
            self.head.get("classifier.weight")?,
            Some(self.head.get("classifier.bias")?),
        )?)
    }

    /// Logits (B x num_classes) without dropout.
    pub fn logits(&self, texts: &[String]) -> Result<Tensor, NeuralError> {
        let (ids, lens) = self.tokenizer.encode_batch(texts, self.spec.max_len)?;
        self.logits_for(&ids, &lens, None)
    }

    pub fn predict(&self, texts: &[String]) -> Result<Vec<Label>, NeuralError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(32) {
            out.extend(decode(&nn::softmax_rows(&self.logits(chunk)?)?, &self.labels));
        }
        Ok(out)
    }

    pub fn load(dir: &Path) -> Result<SequenceClassifier, NeuralError> {
        let meta_path = dir.join("head.json");
        let raw = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let bad = |reason: String| NeuralError::BadCheckpoint {
            path: meta_path.clone(),
            reason,
        };
        let meta: HeadMeta = serde_json::from_str(&raw).map_err(|e| bad(e.to_string()))?;
        let labels = meta
            .labels
            .iter()
            .map(|l| l.parse())
            .collect::<Result<Vec<Label>, _>>()
            .map_err(|e| bad(e.to_string()))?;
        let (encoder, tokenizer) = load_encoder(dir, DType::F32)?;
        let model = SequenceClassifier::new(meta.spec, labels, encoder, tokenizer)?;
        model.head.load(&dir.join("classifier.safetensors"))?;
        Ok(model)
    }
}

impl Checkpoint for SequenceClassifier {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![self.encoder.params(), &self.head]
    }

    /// The directory doubles as an encoder directory: `config.json`,
    /// `model.safetensors` and the tokenizer sit beside the classifier files.
    fn save(&self, dir: &Path) -> Result<(), NeuralError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let cfg = dir.join("config.json");
        fs::write(&cfg, serde_json::to_string_pretty(self.encoder.config()).expect("config serializes"))
            .map_err(io_err(&cfg))?;
        self.encoder.params().save(&dir.join("model.safetensors"))?;
        self.head.save(&dir.join("classifier.safetensors"))?;
        self.tokenizer.save(dir)?;
        let meta = HeadMeta {
            spec: self.spec.clone(),
            labels: self.labels.iter().map(|l| l.as_str().to_string()).collect(),
        };
        let path = dir.join("head.json");
        fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(io_err(&path))?;
        Ok(())
    }
}

impl SequenceClassifier {
    pub fn save(&self, dir: &Path) -> Result<(), NeuralError> {
        Checkpoint::save(self, dir)
    }
}

fn open_encoder(spec: &FinetuneSpec, train: &Corpus) -> Result<(BertModel, TextTokenizer), NeuralError> {
    if spec.encoder_id == TEST_ENCODER_ID {
        let vocab = build_vocab(train, TEST_ENCODER_VOCAB)?;
        let mut config = BertConfig::tiny(TextTokenizer::word_id_space(&vocab));
        config.max_position_embeddings = config.max_position_embeddings.max(spec.max_len);
        let model = BertModel::random(config, spec.seed, DType::F32)?;
        return Ok((model, TextTokenizer::Word(vocab)));
    }
    let dir = resolve_model_dir(&spec.encoder_id).map_err(|e| NeuralError::EncoderUnresolvable(e.to_string()))?;
    Ok(load_encoder(&dir, DType::F32)?)
}

/// Fine-tunes encoder and head with Adam, stopping early on the dev metric;
/// returns the best-dev model and the full history.
pub fn finetune(
    train: &Corpus,
    dev: &Corpus,
    spec: &FinetuneSpec,
    opts: &TrainOptions,
) -> Result<(SequenceClassifier, TrainingHistory), NeuralError> {
    spec.validate()?;
    if dev.is_empty() {
        return Err(NeuralError::EmptyDev);
    }
    let train_labels = train.labels();
    let labels = label_space(&train_labels, spec.num_classes)?;
    let (encoder, tokenizer) = open_encoder(spec, train)?;
    let model = SequenceClassifier::new(spec.clone(), labels, encoder, tokenizer)?;
    let encoded: Vec<Vec<u32>> = train
        .texts()
        .iter()
        .map(|t| model.tokenizer.encode(t, spec.max_len))
        .collect::<Result<_, _>>()?;
    let targets: Vec<usize> = train_labels
        .iter()
        .map(|l| model.labels.iter().position(|m| m == l).expect("label in space"))
        .collect();
    let weights: Option<Vec<f64>> = opts.class_weights.as_ref().map(|cw| cw.per_example(&train_labels));
    let dev_texts = dev.texts();
    let dev_gold = dev.labels();
    let pad = model.tokenizer.pad_id();

    let mut vars = model.encoder.params().vars();
    vars.extend(model.head.vars());
    let mut opt = candle_nn::AdamW::new(
        vars,
        candle_nn::ParamsAdamW {
            lr: spec.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xf1e7);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let history = early_stopping_loop(
        &model,
        spec.max_epochs,
        spec.patience,
        opts.checkpoints.as_ref(),
        |_| {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(spec.batch_size) {
                let lengths: Vec<usize> = chunk.iter().map(|&i| encoded[i].len()).collect();
                let t = lengths.iter().copied().max().unwrap_or(1);
                let ids: Vec<Vec<u32>> = chunk
                    .iter()
                    .map(|&i| {
                        let mut r = encoded[i].clone();
                        r.resize(t, pad);
                        r
                    })
                    .collect();
                let y: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
                let w: Option<Vec<f64>> = weights.as_ref().map(|w| chunk.iter().map(|&i| w[i]).collect());
                let logits = model.logits_for(&ids, &lengths, Some(&mut rng))?;
                let loss = nn::cross_entropy(&logits, &y, w.as_deref())?;
                opt.backward_step(&loss)?;
                total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            }
            Ok(total / encoded.len().max(1) as f64)
        },
        || {
            let pred = model.predict(&dev_texts)?;
            Ok(spec.monitored_metric.score(&dev_gold, &pred)?)
        },
    )?;
    Ok((model, history))
}
