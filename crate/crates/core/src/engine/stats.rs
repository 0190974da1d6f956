//! Dataset-wide inference: routing statistics and categorical forecasts.

use super::data::WindowDataset;
use super::model::PaNet;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::field_store::categorize;
use crate::pa_moe::{RoutingStats, TokenRoute};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TierStats {
    pub k: usize,
    pub tokens: u64,
    /// Expert evaluations spent on the tier's tokens.
    pub activations: u64,
}

impl TierStats {
    pub fn per_token(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.activations as f64 / self.tokens as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct RouteReport {
    pub layer: usize,
    pub stats: RoutingStats,
    /// `k_min`, `k_med`, `k_max` tiers.
    pub tiers: [TierStats; 3],
}

pub const ROUTE_HEADER: &str = "expert,usage_count,usage_fraction";
pub const TIER_HEADER: &str = "tier,k,tokens,activations,activations_per_token";
const TIER_NAMES: [&str; 3] = ["k_min", "k_med", "k_max"];

impl RouteReport {
    pub fn token_fraction(&self, tier: usize) -> f64 {
        let total: u64 = self.tiers.iter().map(|t| t.tokens).sum();
        self.tiers[tier].tokens as f64 / total.max(1) as f64
    }

    pub fn usage_csv(&self) -> String {
        let mut s = format!("{ROUTE_HEADER}\n");
        for (e, (u, f)) in self.stats.usage.iter().zip(self.stats.usage_fractions()).enumerate() {
            s.push_str(&format!("{e},{u},{f}\n"));
        }
        s
    }

    pub fn tier_csv(&self) -> String {
        let mut s = format!("{TIER_HEADER}\n");
        for (name, t) in TIER_NAMES.iter().zip(&self.tiers) {
            s.push_str(&format!("{name},{},{},{},{}\n", t.k, t.tokens, t.activations, t.per_token()));
        }
        s
    }
}

fn chunks(n: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    Ok((0..n).collect::<Vec<_>>().chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Hard routing counts of `layer` over every window, routed from the
/// persistence prior.
pub fn route_statistics(model: &PaNet, data: &WindowDataset, batch_size: usize, layer: usize) -> Result<RouteReport> {
    if layer >= model.config.layers {
        return Err(Error::config(format!("layer {layer} outside 0..{}", model.config.layers)));
    }
    let n = model.config.n_experts;
    let k = model.config.k.as_array();
    let mut stats = RoutingStats::new(n);
    let mut tiers = k.map(|k| TierStats { k, ..Default::default() });
    for idx in chunks(data.len(), batch_size)? {
        let batch = data.batch(&idx)?;
        let routing = model.routing_map(&batch, false)?;
        let mut tape = Tape::inference();
        let pass = model.forward(&mut tape, &batch, &routing, None)?;
        let out = &pass.layers[layer];
        let probs = tape.value(out.probs).data();
        for ((pi, sel), &b) in probs.chunks(n).zip(&out.selections).zip(&routing.budgets) {
            stats.push(&TokenRoute { probs: pi.to_vec(), selected: sel.clone() });
            let t = &mut tiers[model.config.k.tier(b).expect("validated budget")];
            t.tokens += 1;
            t.activations += sel.len() as u64;
        }
    }
    Ok(RouteReport { layer, stats, tiers })
}

/// Argmax categories for every window with the matching truth.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetForecast {
    pub windows: usize,
    pub horizon: usize,
    pub height: usize,
    pub width: usize,
    /// `(windows, j, H, W)` category indices.
    pub categories: Vec<u8>,
    /// Observed rain over the horizon.
    pub truth: Vec<f32>,
    /// Persistence forecast (last observed frame) in mm/h.
    pub persistence: Vec<f32>,
    /// Valid epoch hour of the first lead of each window.
    pub first_lead_hours: Vec<i64>,
}

pub fn forecast_dataset(model: &PaNet, data: &WindowDataset, batch_size: usize) -> Result<DatasetForecast> {
    let (h, w, _) = data.grid();
    let j = data.horizon();
    let mut out = DatasetForecast {
        windows: data.len(),
        horizon: j,
        height: h,
        width: w,
        categories: Vec::new(),
        truth: Vec::new(),
        persistence: Vec::new(),
        first_lead_hours: Vec::new(),
    };
    for idx in chunks(data.len(), batch_size)? {
        let batch = data.batch(&idx)?;
        out.categories.extend(model.predict(&batch)?.argmax());
        out.truth.extend_from_slice(&batch.target.data);
        out.persistence.extend_from_slice(&batch.prior.data);
        for b in 0..batch.size {
            out.first_lead_hours.push(batch.input_hours[(b + 1) * batch.lookback - 1] + 1);
        }
    }
    Ok(out)
}

/// Fraction of cells whose forecast category equals the observed one.
pub fn category_accuracy(f: &DatasetForecast) -> Result<f64> {
    let mut hits = 0usize;
    for (&c, &r) in f.categories.iter().zip(&f.truth) {
        hits += usize::from(categorize(r as f64)?.index() == c as usize);
    }
    Ok(hits as f64 / f.categories.len().max(1) as f64)
}
