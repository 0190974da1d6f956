use log::warn;

use super::category::IntensityCategory;
use crate::error::{Error, Result};

/// Cells at or above this rate (mm/h) count as wet.
pub const WET_CUTOFF: f64 = 0.1;

const MIN_SEPARATION: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdSource {
    Fixed,
    CdfPercentile,
}

/// Weak/strong rain boundaries that split tokens into three budget tiers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityThresholds {
    pub weak: f64,
    pub strong: f64,
    pub source: ThresholdSource,
    /// Set when estimation found no wet cells and fell back to the fixed defaults.
    pub fallback: bool,
}

impl IntensityThresholds {
    pub fn new(weak: f64, strong: f64) -> Result<Self> {
        let t = IntensityThresholds { weak, strong, source: ThresholdSource::Fixed, fallback: false };
        t.validate()?;
        Ok(t)
    }

    /// Moderate-rain and heavy-rain lower bounds.
    pub fn fixed_default() -> Self {
        IntensityThresholds {
            weak: IntensityCategory::MR.lower_bound(),
            strong: IntensityCategory::HR.lower_bound(),
            source: ThresholdSource::Fixed,
            fallback: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak.is_finite() && self.strong.is_finite() && 0.0 < self.weak && self.weak < self.strong) {
            return Err(Error::config(format!(
                "thresholds must satisfy 0 < weak < strong, got ({}, {})",
                self.weak, self.strong
            )));
        }
        Ok(())
    }
}

/// Linear-interpolation quantile of ascending `sorted` data (Hyndman-Fan type 7).
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Wet values (>= [`WET_CUTOFF`]) drawn from every slice of `stream`, sorted ascending.
pub fn wet_values<'a, I>(stream: I) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut wet: Vec<f64> = stream
        .into_iter()
        .flat_map(|s| s.iter().map(|&v| v as f64))
        .filter(|&v| v >= WET_CUTOFF)
        .collect();
    wet.sort_by(f64::total_cmp);
    wet
}

/// Weak and strong thresholds as empirical quantiles of the wet cells in `stream`.
pub fn estimate_thresholds<'a, I>(stream: I, p_weak: f64, p_strong: f64) -> Result<IntensityThresholds>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    if !(0.0 < p_weak && p_weak < p_strong && p_strong < 1.0) {
        return Err(Error::config(format!(
            "percentiles must satisfy 0 < p_weak < p_strong < 1, got ({p_weak}, {p_strong})"
        )));
    }
    let mut seen_any = false;
    let wet = wet_values(stream.into_iter().inspect(|s| seen_any |= !s.is_empty()));
    if !seen_any {
        return Err(Error::config("threshold estimation needs a non-empty intensity stream"));
    }
    if wet.is_empty() {
        warn!("no wet cells in the training stream; using fixed thresholds");
        return Ok(IntensityThresholds { fallback: true, ..IntensityThresholds::fixed_default() });
    }
    let weak = quantile_type7(&wet, p_weak);
    let mut strong = quantile_type7(&wet, p_strong);
    if strong <= weak {
        strong = weak + MIN_SEPARATION;
    }
    Ok(IntensityThresholds { weak, strong, source: ThresholdSource::CdfPercentile, fallback: false })
}
