//! Training objectives: soft Dice over categories, dispatch equity, router
//! decisiveness, their combinations and the curriculum weight.
//!
//! Scalar reference implementations are defined here; [`graph`] holds the
//! differentiable versions used by the trainer.

pub mod graph;

pub use graph::{decisiveness_tape, dice_tape, equity_tape};

use crate::error::{Error, Result};
use crate::pa_moe::RoutingStats;

const SIMPLEX_TOL: f64 = 1e-5;

/// Intensity-aware sample weighting schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Curriculum {
    pub eta_final: f64,
    pub alpha_w: f64,
    /// Reference rate in mm/h.
    pub r_ref: f64,
    pub ramp_fraction: f64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Curriculum { eta_final: 2.0, alpha_w: 1.0, r_ref: 1.0, ramp_fraction: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub gamma: f64,
    pub curriculum: Curriculum,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { epsilon: 1e-6, beta: 0.1, gamma: 1e-2, curriculum: Curriculum::default() }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.curriculum;
        let ok = self.epsilon > 0.0
            && self.beta >= 0.0
            && self.gamma >= 0.0
            && c.ramp_fraction > 0.0
            && c.ramp_fraction <= 1.0
            && c.eta_final >= 0.0
            && c.alpha_w >= 0.0
            && c.r_ref > 0.0;
        if !ok || ![self.epsilon, self.beta, self.gamma, c.eta_final, c.alpha_w, c.r_ref].iter().all(|v| v.is_finite()) {
            return Err(Error::config(format!("invalid loss configuration {self:?}")));
        }
        Ok(())
    }
}

/// Soft Dice loss of one pixel: `1 - (2 sum p y + eps) / (sum p^2 + sum y + eps)`.
pub fn dice_loss(p: &[f64], y: &[f64], eps: f64) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::config("prediction and label lengths differ"));
    }
    if p.iter().any(|v| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(v))
        || (p.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL
    {
        return Err(Error::domain(format!("prediction {p:?} is not a probability vector")));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) || y.iter().sum::<f64>() != 1.0 {
        return Err(Error::domain(format!("label {y:?} is not one-hot")));
    }
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let p2: f64 = p.iter().map(|a| a * a).sum();
    let ys: f64 = y.iter().sum();
    Ok(1.0 - (2.0 * inter + eps) / (p2 + ys + eps))
}

/// Weighted mean of per-pixel Dice losses, `sum w L / sum w`.
///
/// `probs` is `(pixels, classes)` row-major and `labels` holds class indices.
pub fn dice_loss_mean(probs: &[f64], labels: &[usize], classes: usize, weights: Option<&[f64]>, eps: f64) -> Result<f64> {
    if probs.len() != labels.len() * classes {
        return Err(Error::config("probabilities do not match labels"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut y = vec![0.0; classes];
    for (i, (row, &label)) in probs.chunks(classes).zip(labels).enumerate() {
        if label >= classes {
            return Err(Error::domain(format!("label {label} out of range")));
        }
        y.iter_mut().for_each(|v| *v = 0.0);
        y[label] = 1.0;
        let w = weights.map_or(1.0, |w| w[i]);
        num += w * dice_loss(row, &y, eps)?;
        den += w;
    }
    Ok(num / den)
}

/// Coefficient of variation of `U_e / N_tok` with population standard deviation.
pub fn equity_from_usage(usage: &[f64], n_tok: usize, eps: f64) -> Result<f64> {
    if n_tok == 0 || usage.is_empty() {
        return Err(Error::config("equity needs at least one token and one expert"));
    }
    let f: Vec<f64> = usage.iter().map(|u| u / n_tok as f64).collect();
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / (mean + eps))
}

pub fn equity_loss(stats: &RoutingStats, eps: f64) -> Result<f64> {
    let usage: Vec<f64> = stats.usage.iter().map(|&u| u as f64).collect();
    equity_from_usage(&usage, stats.n_tok, eps)
}

/// Mean routing entropy `-(1/N_tok) sum_j sum_e pi log(pi + eps)`.
///
/// `probs` is `(N_tok, n_experts)` row-major.
pub fn decisiveness_loss(probs: &[f64], n_experts: usize, eps: f64) -> Result<f64> {
    if n_experts == 0 || probs.is_empty() || !probs.len().is_multiple_of(n_experts) {
        return Err(Error::config("router distributions have the wrong length"));
    }
    let n_tok = probs.len() / n_experts;
    for row in probs.chunks(n_experts) {
        if (row.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::domain("router distribution does not sum to one"));
        }
    }
    Ok(-probs.iter().map(|p| p * (p + eps).ln()).sum::<f64>() / n_tok as f64)
}

pub fn moe_loss(equity: f64, decisiveness: f64, beta: f64) -> f64 {
    equity + beta * decisiveness
}

pub fn total_loss(pred: f64, moe: f64, gamma: f64) -> f64 {
    pred + gamma * moe
}

/// Curriculum strength at `epoch`: linear from 0 to `eta_final` over the first
/// `ramp_fraction` of training, then constant.
pub fn curriculum_eta(epoch: usize, total_epochs: usize, c: &Curriculum) -> f64 {
    let ramp = c.ramp_fraction * total_epochs as f64;
    if ramp <= 0.0 {
        return c.eta_final;
    }
    c.eta_final * (epoch as f64 / ramp).min(1.0)
}

/// `w(r) = 1 + eta(epoch) (r / r_ref)^alpha_w`.
pub fn curriculum_weight(r: f64, epoch: usize, total_epochs: usize, c: &Curriculum) -> Result<f64> {
    if !(r >= 0.0 && r.is_finite()) {
        return Err(Error::domain(format!("rain rate {r} must be finite and non-negative")));
    }
    if epoch >= total_epochs {
        return Err(Error::config(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    let eta = curriculum_eta(epoch, total_epochs, c);
    if eta == 0.0 || r == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 + eta * (r / c.r_ref).powf(c.alpha_w))
}
