//! Precipitation-adaptive mixture of experts.
//!
//! Each token gets an expert budget from the rain rate under its patch. A
//! softmax router scores all experts, the top `k` are kept, their gates are
//! renormalized and the selected expert outputs are blended.

mod layer;

pub use layer::{init_moe, moe_layer, soft_usage, MoeOutput};

use rand::Rng;

use crate::autodiff::{ParamStore, Tensor};
use crate::dacla::ffn;
use crate::error::{Error, Result};
use crate::field_store::{IntensityField, IntensityThresholds};

/// Expert budgets `(k_min, k_med, k_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KTriple {
    pub min: usize,
    pub med: usize,
    pub max: usize,
}

impl Default for KTriple {
    fn default() -> Self {
        KTriple { min: 1, med: 3, max: 6 }
    }
}

impl KTriple {
    pub fn new(min: usize, med: usize, max: usize) -> Result<Self> {
        let k = KTriple { min, med, max };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min >= 1 && self.min < self.med && self.med < self.max) {
            return Err(Error::config(format!(
                "budgets must satisfy 1 <= k_min < k_med < k_max, got ({}, {}, {})",
                self.min, self.med, self.max
            )));
        }
        Ok(())
    }

    /// 0 for `k_min`, 1 for `k_med`, 2 for `k_max`.
    pub fn tier(&self, k: usize) -> Option<usize> {
        [self.min, self.med, self.max].iter().position(|&v| v == k)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.min, self.med, self.max]
    }
}

/// Expert budget for rain rate `r`.
pub fn budget(r: f64, thresholds: &IntensityThresholds, k: &KTriple) -> Result<usize> {
    if !r.is_finite() {
        return Err(Error::domain(format!("non-finite rain rate {r}")));
    }
    Ok(if r >= thresholds.strong {
        k.max
    } else if r >= thresholds.weak {
        k.med
    } else {
        k.min
    })
}

/// Per-token expert budgets with shape `(B, T, H_p, W_p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingMap {
    pub batch: usize,
    pub frames: usize,
    pub hp: usize,
    pub wp: usize,
    pub k: KTriple,
    pub budgets: Vec<usize>,
}

impl RoutingMap {
    pub fn new(batch: usize, frames: usize, hp: usize, wp: usize, k: KTriple, budgets: Vec<usize>) -> Result<Self> {
        k.validate()?;
        if budgets.len() != batch * frames * hp * wp {
            return Err(Error::config("routing map length does not match its dimensions"));
        }
        if let Some(b) = budgets.iter().find(|&&b| k.tier(b).is_none()) {
            return Err(Error::domain(format!("budget {b} is not one of {:?}", k.as_array())));
        }
        Ok(RoutingMap { batch, frames, hp, wp, k, budgets })
    }

    pub fn len(&self) -> usize {
        self.budgets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.budgets.is_empty()
    }

    /// Token counts in the `k_min`, `k_med` and `k_max` tiers.
    pub fn tier_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for &b in &self.budgets {
            c[self.k.tier(b).expect("validated budget")] += 1;
        }
        c
    }
}

/// Budgets from the maximum rate inside each token's `p x p` footprint.
pub fn build_routing_map(
    intensity: &IntensityField,
    patch: usize,
    thresholds: &IntensityThresholds,
    k: &KTriple,
) -> Result<RoutingMap> {
    k.validate()?;
    thresholds.validate()?;
    let (hp, wp) = crate::tokenizer::token_grid(intensity.height, intensity.width, patch)?;
    let mut budgets = Vec::with_capacity(intensity.batch * intensity.frames * hp * wp);
    for b in 0..intensity.batch {
        for t in 0..intensity.frames {
            let frame = intensity.frame(b, t);
            for i in 0..hp {
                for j in 0..wp {
                    let mut peak = 0.0f64;
                    for y in i * patch..(i + 1) * patch {
                        for x in j * patch..(j + 1) * patch {
                            peak = peak.max(frame[y * intensity.width + x] as f64);
                        }
                    }
                    budgets.push(budget(peak, thresholds, k)?);
                }
            }
        }
    }
    RoutingMap::new(intensity.batch, intensity.frames, hp, wp, *k, budgets)
}

/// One position-wise feed-forward expert.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
}

impl Expert {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xt = Tensor::new(vec![1, x.len()], x.to_vec());
        Ok(ffn(&xt, &self.w1, &self.b1, &self.w2, &self.b2)?.into_data())
    }
}

/// `N` experts and the router `softmax(W_r x + b_r)` with `W_r` of shape `(N, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPool {
    pub experts: Vec<Expert>,
    pub w_r: Tensor,
    pub b_r: Vec<f64>,
}

impl ExpertPool {
    pub fn init<R: Rng + ?Sized>(n: usize, d: usize, d_ff: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        init_moe(&mut store, "moe", d, d_ff, n, rng);
        Self::from_store(&store, "moe", n)
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.w_r.shape()[1]
    }

    /// Reads the pool stored under `prefix` by [`init_moe`].
    pub fn from_store(store: &ParamStore, prefix: &str, n: usize) -> Result<Self> {
        let get = |name: String| {
            store
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name}")))
        };
        let experts = (0..n)
            .map(|e| {
                Ok(Expert {
                    w1: get(format!("{prefix}.expert{e}.w1.w"))?,
                    b1: get(format!("{prefix}.expert{e}.w1.b"))?.into_data(),
                    w2: get(format!("{prefix}.expert{e}.w2.w"))?,
                    b2: get(format!("{prefix}.expert{e}.w2.b"))?.into_data(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w_r = get(format!("{prefix}.router.w"))?;
        let b_r = get(format!("{prefix}.router.b"))?.into_data();
        Ok(ExpertPool { experts, w_r, b_r })
    }

    /// Writes the pool under `prefix` in the layout of [`init_moe`].
    pub fn to_store(&self, store: &mut ParamStore, prefix: &str) {
        for (e, ex) in self.experts.iter().enumerate() {
            store.insert(format!("{prefix}.expert{e}.w1.w"), ex.w1.clone());
            store.insert(format!("{prefix}.expert{e}.w1.b"), Tensor::new(vec![ex.b1.len()], ex.b1.clone()));
            store.insert(format!("{prefix}.expert{e}.w2.w"), ex.w2.clone());
            store.insert(format!("{prefix}.expert{e}.w2.b"), Tensor::new(vec![ex.b2.len()], ex.b2.clone()));
        }
        store.insert(format!("{prefix}.router.w"), self.w_r.clone());
        store.insert(format!("{prefix}.router.b"), Tensor::new(vec![self.b_r.len()], self.b_r.clone()));
    }
}

/// Router distribution `softmax(W_r x + b_r)`.
pub fn route(x: &[f64], pool: &ExpertPool) -> Vec<f64> {
    let d = pool.dim();
    assert_eq!(x.len(), d, "token width must match the router");
    let logits: Vec<f64> = pool
        .w_r
        .data()
        .chunks(d)
        .zip(&pool.b_r)
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// The `k` largest entries of `pi` in descending order; equal scores keep the
/// lower expert index first.
pub fn top_k(pi: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if k == 0 || k > pi.len() {
        return Err(Error::config(format!("k = {k} outside 1..={}", pi.len())));
    }
    let mut idx: Vec<usize> = (0..pi.len()).collect();
    // sort_by is stable, so ties stay in index order
    idx.sort_by(|&a, &b| pi[b].total_cmp(&pi[a]));
    idx.truncate(k);
    Ok((idx.iter().map(|&i| pi[i]).collect(), idx))
}

/// Gap between the `k`-th and `(k+1)`-th largest entries; infinite when `k = N`.
pub fn selection_margin(pi: &[f64], k: usize) -> f64 {
    if k >= pi.len() {
        return f64::INFINITY;
    }
    let mut sorted = pi.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[k - 1] - sorted[k]
}

/// `scores / sum(scores)`.
pub fn renormalize(scores: &[f64]) -> Vec<f64> {
    let s: f64 = scores.iter().sum();
    scores.iter().map(|v| v / s).collect()
}

/// Routing decision for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRoute {
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
}

/// Blended output of the `k` selected experts and the routing that produced it.
pub fn moe_forward_with_route(x: &[f64], k: usize, pool: &ExpertPool) -> Result<(Vec<f64>, TokenRoute)> {
    let probs = route(x, pool);
    let (scores, selected) = top_k(&probs, k)?;
    let gates = renormalize(&scores);
    let mut out = vec![0.0; x.len()];
    for (&e, &g) in selected.iter().zip(&gates) {
        for (o, y) in out.iter_mut().zip(pool.experts[e].apply(x)?) {
            *o += g * y;
        }
    }
    Ok((out, TokenRoute { probs, selected }))
}

pub fn moe_forward(x: &[f64], k: usize, pool: &ExpertPool) -> Result<Vec<f64>> {
    Ok(moe_forward_with_route(x, k, pool)?.0)
}

/// Usage counts and router distributions over a set of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingStats {
    pub n_experts: usize,
    /// `U_e`: selections of expert `e`, each token contributing `k_j`.
    pub usage: Vec<u64>,
    /// `(N_tok, N)` row-major router distributions.
    pub probs: Vec<f64>,
    pub n_tok: usize,
}

impl RoutingStats {
    pub fn new(n_experts: usize) -> Self {
        RoutingStats { n_experts, usage: vec![0; n_experts], probs: Vec::new(), n_tok: 0 }
    }

    pub fn push(&mut self, route: &TokenRoute) {
        assert_eq!(route.probs.len(), self.n_experts);
        for &e in &route.selected {
            self.usage[e] += 1;
        }
        self.probs.extend_from_slice(&route.probs);
        self.n_tok += 1;
    }

    pub fn merge(&mut self, other: &RoutingStats) {
        assert_eq!(self.n_experts, other.n_experts);
        for (a, b) in self.usage.iter_mut().zip(&other.usage) {
            *a += b;
        }
        self.probs.extend_from_slice(&other.probs);
        self.n_tok += other.n_tok;
    }

    pub fn assignments(&self) -> u64 {
        self.usage.iter().sum()
    }

    /// `U_e / sum(U)`; zeros when nothing was routed.
    pub fn usage_fractions(&self) -> Vec<f64> {
        let total = self.assignments();
        self.usage
            .iter()
            .map(|&u| if total == 0 { 0.0 } else { u as f64 / total as f64 })
            .collect()
    }

    /// `U_e / N_tok`.
    pub fn usage_per_token(&self) -> Vec<f64> {
        self.usage.iter().map(|&u| u as f64 / self.n_tok.max(1) as f64).collect()
    }
}

pub fn collect_stats(routes: &[TokenRoute], n_experts: usize) -> RoutingStats {
    let mut s = RoutingStats::new(n_experts);
    for r in routes {
        s.push(r);
    }
    s
}
