//! `key=value` run settings shared by every subcommand.

use std::path::Path;
use std::str::FromStr;

use crate::engine::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};

/// Shape and statistics of generated data, plus threshold percentiles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataSettings {
    pub sequences: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tail_exponent: f64,
    pub p_weak: f64,
    pub p_strong: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            sequences: 8,
            frames: 12,
            height: 32,
            width: 32,
            tail_exponent: 1.5,
            p_weak: 0.75,
            p_strong: 0.95,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

/// `HxW`, e.g. `32x32`.
pub fn parse_grid(v: &str) -> Result<(usize, usize)> {
    let (h, w) = v
        .trim()
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::config(format!("grid must look like HxW, got {v:?}")))?;
    Ok((num("grid", h)?, num("grid", w)?))
}

impl Settings {
    /// Applies one setting; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if self.model.set(key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "momentum" => t.momentum = num(key, value)?,
            "clip_norm" => t.clip_norm = num(key, value)?,
            "optimizer" => t.optimizer = value.trim().parse()?,
            "teacher_forcing" => t.teacher_forcing = num(key, value)?,
            "shuffle" => t.shuffle = num(key, value)?,
            "epsilon" => t.loss.epsilon = num(key, value)?,
            "beta" => t.loss.beta = num(key, value)?,
            "gamma" => t.loss.gamma = num(key, value)?,
            "eta_final" => t.loss.curriculum.eta_final = num(key, value)?,
            "alpha_w" => t.loss.curriculum.alpha_w = num(key, value)?,
            "r_ref" => {
                t.loss.curriculum.r_ref = num(key, value)?;
                t.auto_r_ref = false;
            }
            "ramp_fraction" => t.loss.curriculum.ramp_fraction = num(key, value)?,
            "sequences" => d.sequences = num(key, value)?,
            "frames" => d.frames = num(key, value)?,
            "grid" => (d.height, d.width) = parse_grid(value)?,
            "tail_exponent" => d.tail_exponent = num(key, value)?,
            "p_weak" => d.p_weak = num(key, value)?,
            "p_strong" => d.p_strong = num(key, value)?,
            _ => return Err(Error::config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` text: one pair per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            self.set(k, v).map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override must be key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.sequences == 0 || d.frames == 0 || d.height == 0 || d.width == 0 {
            return Err(Error::config("data dimensions must be positive"));
        }
        crate::tokenizer::token_grid(d.height, d.width, self.model.patch)?;
        Ok(())
    }
}
