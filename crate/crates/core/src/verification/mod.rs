//! Categorical forecast verification and reference forecasts.
//!
//! Rain categories are scored on exceedance masks at their lower bound; the
//! rainless category is scored on its own class mask. When neither forecast
//! nor truth contains the event both IoU and TS are 1.

mod baselines;

pub use baselines::{persistence_baseline, Climatology};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::field_store::{categorize, IntensityCategory, CATEGORY_COUNT, WET_CUTOFF};

/// `|P ∩ G| / |P ∪ G|`, or 1 when both masks are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::config(format!("mask lengths differ: {} vs {}", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ContingencyTable {
    pub hits: u64,
    pub false_alarms: u64,
    pub misses: u64,
    pub correct_negatives: u64,
    pub threshold: f64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.hits + self.false_alarms + self.misses + self.correct_negatives
    }

    /// Adds `pred`/`truth` event flags for one cell.
    pub fn record(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.hits += 1,
            (true, false) => self.false_alarms += 1,
            (false, true) => self.misses += 1,
            (false, false) => self.correct_negatives += 1,
        }
    }

    pub fn merge(&mut self, other: &ContingencyTable) {
        self.hits += other.hits;
        self.false_alarms += other.false_alarms;
        self.misses += other.misses;
        self.correct_negatives += other.correct_negatives;
    }
}

/// Contingency counts of `pred >= theta` against `gt >= theta`.
pub fn contingency<T: Copy + Into<f64>>(pred: &[T], gt: &[T], theta: f64) -> Result<ContingencyTable> {
    if pred.len() != gt.len() {
        return Err(Error::config("forecast and truth sizes differ"));
    }
    let mut t = ContingencyTable { threshold: theta, ..Default::default() };
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g): (f64, f64) = (p.into(), g.into());
        if !(p.is_finite() && g.is_finite()) {
            return Err(Error::domain("non-finite value in verification field"));
        }
        t.record(p >= theta, g >= theta);
    }
    Ok(t)
}

/// `H / (H + M + F)`, or 1 when all three are zero.
pub fn threat_score(t: &ContingencyTable) -> f64 {
    let denom = t.hits + t.misses + t.false_alarms;
    if denom == 0 {
        1.0
    } else {
        t.hits as f64 / denom as f64
    }
}

/// Forecast and truth masks for category `c`.
pub fn category_masks(pred: &[u8], gt_mm: &[f32], c: IntensityCategory) -> (Vec<bool>, Vec<bool>) {
    let idx = c.index() as u8;
    if c == IntensityCategory::RL {
        (pred.iter().map(|&p| p == idx).collect(), gt_mm.iter().map(|&g| (g as f64) < WET_CUTOFF).collect())
    } else {
        let lb = c.lower_bound();
        (pred.iter().map(|&p| p >= idx).collect(), gt_mm.iter().map(|&g| g as f64 >= lb).collect())
    }
}

/// Maps a rain-rate field to category indices.
pub fn categories_of(field: &[f32]) -> Result<Vec<u8>> {
    field.iter().map(|&r| Ok(categorize(r as f64)?.index() as u8)).collect()
}

/// Scores per lead hour and category with the pooled contingency tables.
#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    /// `[lead][category]`
    pub iou: Vec<[f64; CATEGORY_COUNT]>,
    pub ts: Vec<[f64; CATEGORY_COUNT]>,
    pub tables: Vec<[ContingencyTable; CATEGORY_COUNT]>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl VerificationReport {
    pub fn lead_hours(&self) -> usize {
        self.iou.len()
    }

    /// Category-averaged IoU at lead `l` (0-based).
    pub fn lead_mean_iou(&self, l: usize) -> f64 {
        mean(self.iou[l].iter().copied())
    }

    pub fn lead_mean_ts(&self, l: usize) -> f64 {
        mean(self.ts[l].iter().copied())
    }

    /// Hour-averaged IoU of category `c`.
    pub fn category_mean_iou(&self, c: usize) -> f64 {
        mean(self.iou.iter().map(|r| r[c]))
    }

    pub fn category_mean_ts(&self, c: usize) -> f64 {
        mean(self.ts.iter().map(|r| r[c]))
    }

    /// Mean over categories of the hour-averaged IoU.
    pub fn mean_iou(&self) -> f64 {
        mean((0..CATEGORY_COUNT).map(|c| self.category_mean_iou(c)))
    }

    pub fn mean_ts(&self) -> f64 {
        mean((0..CATEGORY_COUNT).map(|c| self.category_mean_ts(c)))
    }

    /// CSV rows per lead hour (1-based) and category, then `mean` rows for
    /// each lead hour, each category and overall.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lead_hour,category,iou,ts\n");
        for l in 0..self.lead_hours() {
            for c in IntensityCategory::ALL {
                let i = c.index();
                let _ = writeln!(s, "{},{},{:.6},{:.6}", l + 1, c.label(), self.iou[l][i], self.ts[l][i]);
            }
            let _ = writeln!(s, "{},mean,{:.6},{:.6}", l + 1, self.lead_mean_iou(l), self.lead_mean_ts(l));
        }
        for c in IntensityCategory::ALL {
            let i = c.index();
            let _ = writeln!(s, "mean,{},{:.6},{:.6}", c.label(), self.category_mean_iou(i), self.category_mean_ts(i));
        }
        let _ = writeln!(s, "mean,mean,{:.6},{:.6}", self.mean_iou(), self.mean_ts());
        s
    }
}

/// Verifies categorical forecasts against rain rates.
///
/// Both inputs are `(B, lead_hours, H, W)` row-major; contingency counts are
/// pooled over the batch at each lead hour.
pub fn report(pred: &[u8], gt_mm: &[f32], batch: usize, lead_hours: usize) -> Result<VerificationReport> {
    if pred.len() != gt_mm.len() {
        return Err(Error::config("forecast and truth sizes differ"));
    }
    if batch == 0 || lead_hours == 0 || !pred.len().is_multiple_of(batch * lead_hours) {
        return Err(Error::config("sizes are inconsistent with the batch and horizon"));
    }
    if let Some(&bad) = pred.iter().find(|&&p| p as usize >= CATEGORY_COUNT) {
        return Err(Error::domain(format!("category index {bad} out of range")));
    }
    let frame = pred.len() / (batch * lead_hours);
    let mut tables = vec![[ContingencyTable::default(); CATEGORY_COUNT]; lead_hours];
    for (l, row) in tables.iter_mut().enumerate() {
        for c in IntensityCategory::ALL {
            let t = &mut row[c.index()];
            t.threshold = c.lower_bound();
            for b in 0..batch {
                let start = (b * lead_hours + l) * frame;
                let (pm, gm) = category_masks(&pred[start..start + frame], &gt_mm[start..start + frame], c);
                for (p, g) in pm.into_iter().zip(gm) {
                    t.record(p, g);
                }
            }
        }
    }
    let ts: Vec<[f64; CATEGORY_COUNT]> = tables.iter().map(|row| row.map(|t| threat_score(&t))).collect();
    // pooled IoU over the exceedance masks counts the same cells as TS
    let iou = tables
        .iter()
        .map(|row| {
            row.map(|t| {
                let union = t.hits + t.false_alarms + t.misses;
                if union == 0 {
                    1.0
                } else {
                    t.hits as f64 / union as f64
                }
            })
        })
        .collect();
    Ok(VerificationReport { iou, ts, tables })
}
