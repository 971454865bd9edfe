//! Small tensor toolkit shared by the LSTM and the transformer encoder:
//! a named parameter store with seeded initialization, and a few layers.
//!
//! Parameters are drawn from a ChaCha stream rather than the device RNG so
//! that a run is reproducible from its seed alone.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Result, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Named trainable tensors, iterated in name order.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?)?;
        self.vars.insert(name.to_string(), var);
        Ok(())
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::from_vec(data, shape, &self.device)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let t = (Tensor::ones(shape, DType::F64, &self.device)? * value)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(Var::as_tensor)
            .ok_or_else(|| candle_core::Error::Msg(format!("missing parameter `{name}`")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in snapshot {
            match self.vars.get(name) {
                Some(v) => v.set(t)?,
                None => candle_core::bail!("snapshot has unknown parameter `{name}`"),
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)
    }

    /// Overwrites every parameter from a safetensors file. Missing names and
    /// shape changes are errors; extra tensors in the file are ignored.
    pub fn load(&self, path: &Path) -> Result<()> {
        let data = candle_core::safetensors::load(path, &self.device)?;
        self.load_map(&data, "")
    }

    /// Like [`ParamStore::load`] from an in-memory map, with every parameter
    /// looked up as `prefix + name`.
    pub fn load_map(&self, data: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = data
                .get(&key)
                .ok_or_else(|| candle_core::Error::Msg(format!("weights lack `{key}`")))?;
            if t.dims() != var.dims() {
                candle_core::bail!("`{key}` has shape {:?}, expected {:?}", t.dims(), var.dims());
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// `x W^T + b` over the last dimension, for inputs of any rank.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(&w.t()?)?;
    match b {
        Some(b) => y.broadcast_add(b),
        None => Ok(y),
    }
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    centered
        .broadcast_div(&(var + eps)?.sqrt()?)?
        .broadcast_mul(gamma)?
        .broadcast_add(beta)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Inverted-dropout mask with `keep / (1 - p)` entries, drawn from `rng`.
pub fn dropout_mask(shape: &[usize], p: f64, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let scale = 1.0 / (1.0 - p);
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect();
    Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)
}

/// Mean cross-entropy of `logits` (B x C) against class indices, optionally
/// weighted per example (normalized by the weight sum).
pub fn cross_entropy(logits: &Tensor, targets: &[usize], weights: Option<&[f64]>) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx: Vec<u32> = targets.iter().map(|&t| t as u32).collect();
    let idx = Tensor::from_vec(idx, (targets.len(), 1), logits.device())?;
    let picked = logp.gather(&idx, 1)?.squeeze(1)?;
    match weights {
        None => picked.mean_all()?.neg(),
        Some(w) => {
            let total: f64 = w.iter().sum();
            let w = Tensor::from_vec(w.to_vec(), w.len(), logits.device())?.to_dtype(logits.dtype())?;
            (picked.mul(&w)?.sum_all()? / total)?.neg()
        }
    }
}

/// Row-wise softmax probabilities as `f64`.
pub fn softmax_rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    candle_nn::ops::softmax(logits, D::Minus1)?
        .to_dtype(DType::F64)?
        .to_vec2()
}

/// Adam without weight decay, over the store's parameters.
pub fn adam(params: &ParamStore, lr: f64) -> Result<candle_nn::AdamW> {
    use candle_nn::Optimizer;
    candle_nn::AdamW::new(
        params.vars(),
        candle_nn::ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )
}
