//! Persistence and climatology reference forecasts.

use crate::error::{Error, Result};
use crate::field_store::MeteoSequence;

/// Repeats the last observed rain field for each of `horizon` lead hours.
pub fn persistence_baseline(last: &[f32], horizon: usize) -> Result<Vec<f32>> {
    if last.is_empty() || horizon == 0 {
        return Err(Error::config("persistence needs an observed frame and a positive horizon"));
    }
    Ok(last.repeat(horizon))
}

/// Per-cell mean training rain, overall and by UTC hour of day.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    pub height: usize,
    pub width: usize,
    pub mean: Vec<f64>,
    /// `hourly[h]` is `None` when no training frame is valid at hour `h`.
    pub hourly: Vec<Option<Vec<f64>>>,
}

impl Climatology {
    pub fn fit(train: &[MeteoSequence]) -> Result<Self> {
        let first = train.first().ok_or_else(|| Error::config("climatology needs a non-empty archive"))?;
        let (h, w) = (first.dims().height, first.dims().width);
        let n = h * w;
        let mut sum = vec![0.0; n];
        let mut count = 0usize;
        let mut hsum = vec![vec![0.0; n]; 24];
        let mut hcount = [0usize; 24];
        for seq in train {
            let d = seq.dims();
            if (d.height, d.width) != (h, w) {
                return Err(Error::ConfigMismatch("archive members differ in grid size".into()));
            }
            let field = seq.intensity();
            for b in 0..d.batch {
                for t in 0..d.frames {
                    let hour = (seq.base_hour() + t as i64).rem_euclid(24) as usize;
                    for (i, &r) in field.frame(b, t).iter().enumerate() {
                        sum[i] += r as f64;
                        hsum[hour][i] += r as f64;
                    }
                    count += 1;
                    hcount[hour] += 1;
                }
            }
        }
        let mean = sum.into_iter().map(|s| s / count as f64).collect();
        let hourly = hsum
            .into_iter()
            .zip(hcount)
            .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect();
        Ok(Climatology { height: h, width: w, mean, hourly })
    }

    /// Forecast valid at each of `hours` (epoch hours). The weighted variant
    /// uses the hour-of-day mean, falling back to the overall mean for hours
    /// absent from training.
    pub fn forecast(&self, hours: &[i64], weighted: bool) -> Vec<f32> {
        let mut out = Vec::with_capacity(hours.len() * self.mean.len());
        for &t in hours {
            let field = if weighted {
                self.hourly[t.rem_euclid(24) as usize].as_ref().unwrap_or(&self.mean)
            } else {
                &self.mean
            };
            out.extend(field.iter().map(|&v| v as f32));
        }
        out
    }
}
