//! Model hyperparameters and their `key=value` form.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::dacla::AttentionConfig;
use crate::error::{Error, Result};
use crate::field_store::ForecastConfig;
use crate::pa_moe::KTriple;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positional {
    /// Learned `1 -> d` map of the solar angle at each patch centre.
    Solar,
    /// Fixed interleaved sinusoids indexed by token position.
    Sinusoidal,
}

impl fmt::Display for Positional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Positional::Solar => "solar",
            Positional::Sinusoidal => "sinusoidal",
        })
    }
}

impl FromStr for Positional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solar" => Ok(Positional::Solar),
            "sinusoidal" => Ok(Positional::Sinusoidal),
            _ => Err(Error::config(format!("unknown positional encoding {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch: usize,
    /// Input variables per cell, precipitation first.
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub k: KTriple,
    pub layers: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub decoder_channels: usize,
    pub positional: Positional,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 3,
            horizon: 3,
            patch: 2,
            channels: 5,
            embed_dim: 16,
            heads: 2,
            d_ff: 32,
            n_experts: 8,
            k: KTriple::default(),
            layers: 2,
            spatial_stride: 2,
            temporal_stride: 2,
            spatial_kernel: 3,
            temporal_kernel: 3,
            decoder_channels: 16,
            positional: Positional::Solar,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn forecast(&self) -> ForecastConfig {
        ForecastConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            patch: self.patch,
            embed_dim: self.embed_dim,
            heads: self.heads,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            head_dim: self.embed_dim / self.heads.max(1),
            spatial_stride: self.spatial_stride,
            temporal_stride: self.temporal_stride,
            spatial_kernel: self.spatial_kernel,
            temporal_kernel: self.temporal_kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.forecast().validate()?;
        self.attention().validate()?;
        self.k.validate()?;
        for (name, v) in [
            ("channels", self.channels),
            ("d_ff", self.d_ff),
            ("layers", self.layers),
            ("decoder_channels", self.decoder_channels),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.n_experts < self.k.max {
            return Err(Error::config(format!("{} experts cannot serve k_max = {}", self.n_experts, self.k.max)));
        }
        if self.positional == Positional::Sinusoidal && !self.embed_dim.is_multiple_of(2) {
            return Err(Error::config("sinusoidal encoding needs an even embed_dim"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> IndexMap<String, String> {
        let mut m = IndexMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("lookback", self.lookback.to_string());
        put("horizon", self.horizon.to_string());
        put("patch", self.patch.to_string());
        put("channels", self.channels.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("heads", self.heads.to_string());
        put("d_ff", self.d_ff.to_string());
        put("experts", self.n_experts.to_string());
        put("k_min", self.k.min.to_string());
        put("k_med", self.k.med.to_string());
        put("k_max", self.k.max.to_string());
        put("layers", self.layers.to_string());
        put("spatial_stride", self.spatial_stride.to_string());
        put("temporal_stride", self.temporal_stride.to_string());
        put("spatial_kernel", self.spatial_kernel.to_string());
        put("temporal_kernel", self.temporal_kernel.to_string());
        put("decoder_channels", self.decoder_channels.to_string());
        put("positional", self.positional.to_string());
        put("seed", self.seed.to_string());
        m
    }

    /// Applies one `key=value` override; `Ok(false)` when the key is not a
    /// model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "lookback" => self.lookback = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "experts" => self.n_experts = num(key, value)?,
            "k_min" => self.k.min = num(key, value)?,
            "k_med" => self.k.med = num(key, value)?,
            "k_max" => self.k.max = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "spatial_stride" => self.spatial_stride = num(key, value)?,
            "temporal_stride" => self.temporal_stride = num(key, value)?,
            "spatial_kernel" => self.spatial_kernel = num(key, value)?,
            "temporal_kernel" => self.temporal_kernel = num(key, value)?,
            "decoder_channels" => self.decoder_channels = num(key, value)?,
            "positional" => self.positional = value.trim().parse()?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Rebuilds a config from pairs written by [`to_pairs`](Self::to_pairs);
    /// keys outside the model set are ignored.
    pub fn from_pairs(pairs: &IndexMap<String, String>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for key in c.to_pairs().keys() {
            let v = pairs
                .get(key)
                .ok_or_else(|| Error::Format(format!("checkpoint config lacks {key}")))?;
            c.set(key, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_roundtrip() {
        let c = ModelConfig { embed_dim: 24, heads: 3, positional: Positional::Sinusoidal, seed: 99, ..Default::default() };
        assert_eq!(ModelConfig::from_pairs(&c.to_pairs()).unwrap(), c);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let c = ModelConfig { n_experts: 4, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { embed_dim: 15, heads: 3, positional: Positional::Sinusoidal, ..Default::default() };
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        assert!(!c.set("bogus", "1").unwrap());
        assert!(c.set("heads", "x").is_err());
    }
}
