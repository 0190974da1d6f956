//! `PANC` checkpoints.
//!
//! Layout: magic `PANC`, version `u32`, line count `u32`, then that many
//! `u32`-length-prefixed UTF-8 `key=value` lines, then named `f64` blobs (name
//! length `u32`, name bytes, element count `u64`, little-endian values) up to
//! the end of the file. Model parameters are stored under their own names;
//! optimizer moments under `opt.m.` and `opt.v.` prefixes.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::model::PaNet;
use super::train::{Optimizer, OptimizerKind, TrainConfig, Trainer};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::field_store::{IntensityThresholds, ThresholdSource};
use crate::objectives::{Curriculum, LossConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PANC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A bare model, or a model with everything needed to resume training.
#[derive(Clone, Debug)]
pub enum Checkpoint {
    Model(PaNet),
    Training(Box<Trainer>),
}

impl Checkpoint {
    pub fn model(&self) -> &PaNet {
        match self {
            Checkpoint::Model(m) => m,
            Checkpoint::Training(t) => &t.model,
        }
    }

    pub fn into_model(self) -> PaNet {
        match self {
            Checkpoint::Model(m) => m,
            Checkpoint::Training(t) => t.model,
        }
    }
}

fn model_pairs(model: &PaNet) -> IndexMap<String, String> {
    let mut m = model.config.to_pairs();
    m.insert("threshold_weak".into(), model.thresholds.weak.to_string());
    m.insert("threshold_strong".into(), model.thresholds.strong.to_string());
    m.insert(
        "threshold_source".into(),
        match model.thresholds.source {
            ThresholdSource::Fixed => "fixed",
            ThresholdSource::CdfPercentile => "cdf",
        }
        .into(),
    );
    m.insert("threshold_fallback".into(), model.thresholds.fallback.to_string());
    m
}

fn train_pairs(t: &Trainer, m: &mut IndexMap<String, String>) {
    let c = &t.config;
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("epoch", t.epoch.to_string());
    put("epochs", c.epochs.to_string());
    put("batch_size", c.batch_size.to_string());
    put("lr", c.lr.to_string());
    put("momentum", c.momentum.to_string());
    put("clip_norm", c.clip_norm.to_string());
    put("optimizer", c.optimizer.to_string());
    put("teacher_forcing", c.teacher_forcing.to_string());
    put("shuffle", c.shuffle.to_string());
    put("auto_r_ref", c.auto_r_ref.to_string());
    put("train_seed", c.seed.to_string());
    put("epsilon", c.loss.epsilon.to_string());
    put("beta", c.loss.beta.to_string());
    put("gamma", c.loss.gamma.to_string());
    put("eta_final", c.loss.curriculum.eta_final.to_string());
    put("alpha_w", c.loss.curriculum.alpha_w.to_string());
    put("r_ref", c.loss.curriculum.r_ref.to_string());
    put("ramp_fraction", c.loss.curriculum.ramp_fraction.to_string());
    put("opt_steps", t.optimizer.steps.to_string());
    put("opt_beta2", t.optimizer.beta2.to_string());
    put("opt_eps", t.optimizer.eps.to_string());
    let seed: String = t.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    put("rng_seed", seed);
    put("rng_stream", t.rng.get_stream().to_string());
    put("rng_word_pos", t.rng.get_word_pos().to_string());
}

fn put_blob(buf: &mut Vec<u8>, name: &str, values: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(model: &PaNet, trainer: Option<&Trainer>) -> Vec<u8> {
    let mut pairs = model_pairs(model);
    if let Some(t) = trainer {
        train_pairs(t, &mut pairs);
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for (k, v) in &pairs {
        let line = format!("{k}={v}");
        buf.extend_from_slice(&(line.len() as u32).to_le_bytes());
        buf.extend_from_slice(line.as_bytes());
    }
    for (name, t) in model.params.iter() {
        put_blob(&mut buf, name, t.data());
    }
    if let Some(t) = trainer {
        let names: Vec<&str> = model.params.names().collect();
        for (name, m) in names.iter().zip(&t.optimizer.first) {
            put_blob(&mut buf, &format!("opt.m.{name}"), m);
        }
        for (name, v) in names.iter().zip(&t.optimizer.second) {
            put_blob(&mut buf, &format!("opt.v.{name}"), v);
        }
    }
    buf
}

pub fn encode_model(model: &PaNet) -> Vec<u8> {
    encode(model, None)
}

pub fn encode_trainer(trainer: &Trainer) -> Vec<u8> {
    encode(&trainer.model, Some(trainer))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos as u64 + n as u64,
            actual: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn get<'p>(pairs: &'p IndexMap<String, String>, key: &str) -> Result<&'p str> {
    pairs
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))
}

fn parse<T: std::str::FromStr>(pairs: &IndexMap<String, String>, key: &str) -> Result<T> {
    let v = get(pairs, key)?;
    v.parse().map_err(|_| Error::Format(format!("{key}: cannot parse {v:?}")))
}

fn thresholds(pairs: &IndexMap<String, String>) -> Result<IntensityThresholds> {
    let source = match get(pairs, "threshold_source")? {
        "fixed" => ThresholdSource::Fixed,
        "cdf" => ThresholdSource::CdfPercentile,
        s => return Err(Error::Format(format!("unknown threshold source {s:?}"))),
    };
    let t = IntensityThresholds {
        weak: parse(pairs, "threshold_weak")?,
        strong: parse(pairs, "threshold_strong")?,
        source,
        fallback: parse(pairs, "threshold_fallback")?,
    };
    t.validate()?;
    Ok(t)
}

fn train_config(pairs: &IndexMap<String, String>) -> Result<TrainConfig> {
    let c = TrainConfig {
        epochs: parse(pairs, "epochs")?,
        batch_size: parse(pairs, "batch_size")?,
        lr: parse(pairs, "lr")?,
        momentum: parse(pairs, "momentum")?,
        clip_norm: parse(pairs, "clip_norm")?,
        optimizer: get(pairs, "optimizer")?.parse()?,
        loss: LossConfig {
            epsilon: parse(pairs, "epsilon")?,
            beta: parse(pairs, "beta")?,
            gamma: parse(pairs, "gamma")?,
            curriculum: Curriculum {
                eta_final: parse(pairs, "eta_final")?,
                alpha_w: parse(pairs, "alpha_w")?,
                r_ref: parse(pairs, "r_ref")?,
                ramp_fraction: parse(pairs, "ramp_fraction")?,
            },
        },
        teacher_forcing: parse(pairs, "teacher_forcing")?,
        shuffle: parse(pairs, "shuffle")?,
        auto_r_ref: parse(pairs, "auto_r_ref")?,
        seed: parse(pairs, "train_seed")?,
    };
    c.validate()?;
    Ok(c)
}

fn rng(pairs: &IndexMap<String, String>) -> Result<ChaCha8Rng> {
    let hex = get(pairs, "rng_seed")?;
    if hex.len() != 64 {
        return Err(Error::Format("rng_seed must be 64 hex digits".into()));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::Format("rng_seed is not hexadecimal".into()))?;
    }
    let mut r = ChaCha8Rng::from_seed(seed);
    r.set_stream(parse(pairs, "rng_stream")?);
    r.set_word_pos(parse(pairs, "rng_word_pos")?);
    Ok(r)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::MagicMismatch { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let lines = r.u32()?;
    let mut pairs = IndexMap::new();
    for _ in 0..lines {
        let n = r.u32()? as usize;
        let line = r.utf8(n)?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line without '=': {line:?}")))?;
        pairs.insert(k.to_string(), v.to_string());
    }
    let mut blobs: IndexMap<String, Vec<f64>> = IndexMap::new();
    while !r.done() {
        let n = r.u32()? as usize;
        let name = r.utf8(n)?.to_string();
        let count = r.u64()?;
        let len = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::DimensionOverflow(format!("blob {name} with {count} values")))?;
        let data = r.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if blobs.insert(name.clone(), data).is_some() {
            return Err(Error::Format(format!("duplicate blob {name}")));
        }
    }

    // shapes come from a fresh model built with the stored configuration
    let config = ModelConfig::from_pairs(&pairs)?;
    let mut model = PaNet::new(config, thresholds(&pairs)?)?;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for (i, name) in names.iter().enumerate() {
        let data = blobs
            .shift_remove(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks parameter {name}")))?;
        let slot = model.params.value_at_mut(i);
        if data.len() != slot.len() {
            return Err(Error::ConfigMismatch(format!(
                "parameter {name} holds {} values, the configuration implies {}",
                data.len(),
                slot.len()
            )));
        }
        *slot = Tensor::new(slot.shape().to_vec(), data);
    }
    if !pairs.contains_key("epoch") {
        if let Some(extra) = blobs.keys().next() {
            return Err(Error::ConfigMismatch(format!("unexpected blob {extra}")));
        }
        return Ok(Checkpoint::Model(model));
    }

    let config = train_config(&pairs)?;
    let kind: OptimizerKind = config.optimizer;
    let sizes: Vec<usize> = model.params.values().map(|t| t.len()).collect();
    let mut opt = Optimizer::new(kind, config.lr, config.momentum, &sizes);
    opt.steps = parse(&pairs, "opt_steps")?;
    opt.beta2 = parse(&pairs, "opt_beta2")?;
    opt.eps = parse(&pairs, "opt_eps")?;
    for (prefix, slots) in [("opt.m.", &mut opt.first), ("opt.v.", &mut opt.second)] {
        for (name, slot) in names.iter().zip(slots.iter_mut()) {
            let key = format!("{prefix}{name}");
            let data = blobs
                .shift_remove(&key)
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks optimizer state {key}")))?;
            if data.len() != slot.len() {
                return Err(Error::ConfigMismatch(format!("optimizer state {key} has the wrong length")));
            }
            *slot = data;
        }
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::ConfigMismatch(format!("unexpected blob {extra}")));
    }
    let mut trainer = Trainer::new(model, config)?;
    trainer.optimizer = opt;
    trainer.rng = rng(&pairs)?;
    trainer.epoch = parse(&pairs, "epoch")?;
    Ok(Checkpoint::Training(Box::new(trainer)))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &PaNet) -> Result<()> {
    Ok(fs::write(path, encode_model(model))?)
}

pub fn save_training(path: impl AsRef<Path>, trainer: &Trainer) -> Result<()> {
    Ok(fs::write(path, encode_trainer(trainer))?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads parameters into `model`, which must have been built with the same
/// configuration as the checkpoint.
pub fn load_into(path: impl AsRef<Path>, model: &mut PaNet) -> Result<()> {
    let loaded = load_checkpoint(path)?.into_model();
    if loaded.config != model.config {
        let ours = model.config.to_pairs();
        let diff: Vec<String> = loaded
            .config
            .to_pairs()
            .into_iter()
            .filter(|(k, v)| ours.get(k) != Some(v))
            .map(|(k, v)| format!("{k}: checkpoint {v}, model {}", ours[&k]))
            .collect();
        return Err(Error::ConfigMismatch(diff.join("; ")));
    }
    *model = loaded;
    Ok(())
}
