//! Patch tokens and positional encodings.
//!
//! A frame `(H, W, L)` is cut into non-overlapping `p x p` tiles; each tile is
//! flattened in `(row, col, channel)` order and projected to `d` dimensions.

mod solar;

pub use solar::{
    calendar, declination, hour_angle, patch_centre, solar_alpha, solar_alpha_field, solar_encoding, SolarGeometry,
    OBLIQUITY_DEG,
};

use crate::error::{Error, Result};

/// Tokens with shape `(B, T, H_p, W_p, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor {
    pub batch: usize,
    pub frames: usize,
    pub hp: usize,
    pub wp: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenTensor {
    pub fn new(batch: usize, frames: usize, hp: usize, wp: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * frames * hp * wp * dim {
            return Err(Error::config("token data length does not match its dimensions"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite token value"));
        }
        Ok(TokenTensor { batch, frames, hp, wp, dim, data })
    }

    /// Tokens per frame.
    pub fn n(&self) -> usize {
        self.hp * self.wp
    }
}

/// Token grid for an `h x w` field cut into `p x p` tiles.
pub fn token_grid(h: usize, w: usize, p: usize) -> Result<(usize, usize)> {
    if p == 0 {
        return Err(Error::config("patch size must be at least 1"));
    }
    if !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::config(format!("grid {h}x{w} is not divisible by patch {p}")));
    }
    Ok((h / p, w / p))
}

/// Rearranges one `(H, W, L)` frame into `(H_p * W_p, p * p * L)` rows.
pub fn patchify(frame: &[f64], h: usize, w: usize, l: usize, p: usize) -> Result<Vec<f64>> {
    let (hp, wp) = token_grid(h, w, p)?;
    if frame.len() != h * w * l {
        return Err(Error::config("frame length does not match (H, W, L)"));
    }
    let mut out = Vec::with_capacity(frame.len());
    for i in 0..hp {
        for j in 0..wp {
            for dy in 0..p {
                let row = (i * p + dy) * w + j * p;
                out.extend_from_slice(&frame[row * l..(row + p) * l]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(rows: &[f64], h: usize, w: usize, l: usize, p: usize) -> Result<Vec<f64>> {
    let (hp, wp) = token_grid(h, w, p)?;
    if rows.len() != h * w * l {
        return Err(Error::config("patch rows do not match (H, W, L)"));
    }
    let mut out = vec![0.0; rows.len()];
    let tile = p * p * l;
    for i in 0..hp {
        for j in 0..wp {
            let src = &rows[(i * wp + j) * tile..(i * wp + j + 1) * tile];
            for dy in 0..p {
                let row = (i * p + dy) * w + j * p;
                out[row * l..(row + p) * l].copy_from_slice(&src[dy * p * l..(dy + 1) * p * l]);
            }
        }
    }
    Ok(out)
}

/// Learnable linear patch projection: `weight` is `(p * p * L, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PatchEmbedding {
    pub fn new(patch: usize, channels: usize, dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != patch * patch * channels * dim || bias.len() != dim {
            return Err(Error::config("patch embedding weight or bias has the wrong size"));
        }
        Ok(PatchEmbedding { patch, channels, dim, weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Embeds one `(H, W, L)` frame to `(H_p, W_p, d)`, adding `pe` when given.
    pub fn embed(&self, frame: &[f64], h: usize, w: usize, pe: Option<&[f64]>) -> Result<Vec<f64>> {
        let rows = patchify(frame, h, w, self.channels, self.patch)?;
        let n = rows.len() / self.in_dim();
        if let Some(pe) = pe {
            if pe.len() != n * self.dim {
                return Err(Error::config("positional encoding does not match token grid"));
            }
        }
        let mut out = Vec::with_capacity(n * self.dim);
        for t in 0..n {
            let x = &rows[t * self.in_dim()..(t + 1) * self.in_dim()];
            for k in 0..self.dim {
                let mut acc = self.bias[k];
                for (i, &xv) in x.iter().enumerate() {
                    acc += xv * self.weight[i * self.dim + k];
                }
                if let Some(pe) = pe {
                    acc += pe[t * self.dim + k];
                }
                out.push(acc);
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite patch embedding".into()));
        }
        Ok(out)
    }
}

/// Interleaved sinusoidal encoding: `sin(pos / 10000^(2i/d))` at even slots and
/// the matching cosine at odd slots.
pub fn sinusoidal_pe(pos: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(format!("sinusoidal encoding needs an even width, got {d}")));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}
