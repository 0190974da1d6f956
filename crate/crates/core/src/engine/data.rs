//! Sliding forecast windows over stored sequences.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::field_store::{categorize, GeoGrid, IntensityField, MeteoSequence, PRECIP_CHANNEL};

/// Every `(lookback + horizon)`-frame window of every batch member.
#[derive(Clone, Debug)]
pub struct WindowDataset {
    sequences: Vec<MeteoSequence>,
    /// `(sequence, member, first frame)`
    windows: Vec<(usize, usize, usize)>,
    lookback: usize,
    horizon: usize,
}

impl WindowDataset {
    pub fn new(sequences: Vec<MeteoSequence>, lookback: usize, horizon: usize) -> Result<Self> {
        let first = sequences.first().ok_or_else(|| Error::config("dataset is empty"))?;
        let d0 = first.dims();
        let mut windows = Vec::new();
        for (si, s) in sequences.iter().enumerate() {
            let d = s.dims();
            if (d.height, d.width, d.channels) != (d0.height, d0.width, d0.channels) || s.geo() != first.geo() {
                return Err(Error::ConfigMismatch("sequences differ in grid, channels or geolocation".into()));
            }
            if d.frames >= lookback + horizon {
                for b in 0..d.batch {
                    for t0 in 0..=d.frames - lookback - horizon {
                        windows.push((si, b, t0));
                    }
                }
            }
        }
        if windows.is_empty() {
            return Err(Error::ConfigMismatch(format!(
                "no sequence has the {} frames needed for lookback {lookback} and horizon {horizon}",
                lookback + horizon
            )));
        }
        Ok(WindowDataset { sequences, windows, lookback, horizon })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn sequences(&self) -> &[MeteoSequence] {
        &self.sequences
    }

    /// `(H, W, L)` of every window.
    pub fn grid(&self) -> (usize, usize, usize) {
        let d = self.sequences[0].dims();
        (d.height, d.width, d.channels)
    }

    /// Rain rates of all observed (look-back) frames.
    pub fn observed_rain(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for &(si, b, t0) in &self.windows {
            let f = self.sequences[si].intensity();
            for t in t0..t0 + self.lookback {
                out.extend_from_slice(f.frame(b, t));
            }
        }
        out
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let (h, w, l) = self.grid();
        let (s, j) = (self.lookback, self.horizon);
        let mut inputs = Vec::with_capacity(indices.len() * s * h * w * l);
        let mut input_hours = Vec::with_capacity(indices.len() * s);
        let mut target = Vec::with_capacity(indices.len() * j * h * w);
        let mut prior = Vec::with_capacity(indices.len() * j * h * w);
        for &i in indices {
            let &(si, b, t0) = self.windows.get(i).ok_or_else(|| Error::config(format!("window {i} out of range")))?;
            let seq = &self.sequences[si];
            let d = seq.dims();
            let frame_len = d.frame_len();
            for t in t0..t0 + s {
                let start = d.index(b, t, 0, 0, 0);
                for (c, &v) in seq.data()[start..start + frame_len].iter().enumerate() {
                    inputs.push(if c % l == PRECIP_CHANNEL { (v as f64).ln_1p() } else { v as f64 });
                }
                input_hours.push(seq.base_hour() + t as i64);
            }
            let rain = seq.intensity();
            for t in t0 + s..t0 + s + j {
                target.extend_from_slice(rain.frame(b, t));
            }
            let last = rain.frame(b, t0 + s - 1);
            for _ in 0..j {
                prior.extend_from_slice(last);
            }
        }
        let n = indices.len();
        let labels = target
            .iter()
            .map(|&r| Ok(categorize(r as f64)?.index()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            size: n,
            lookback: s,
            horizon: j,
            height: h,
            width: w,
            channels: l,
            inputs: Tensor::new(vec![n, s, h, w, l], inputs),
            input_hours,
            target: IntensityField::new(n, j, h, w, target)?,
            labels,
            prior: IntensityField::new(n, j, h, w, prior)?,
            geo: self.sequences[0].geo(),
        })
    }

    pub fn all(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Model-ready tensors for a set of windows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `(B, s, H, W, L)` with precipitation as `ln(1 + r)`.
    pub inputs: Tensor,
    /// Valid epoch hour of each input frame, `(B, s)`.
    pub input_hours: Vec<i64>,
    /// Future rain rates `(B, j, H, W)`.
    pub target: IntensityField,
    /// Category index of each target cell.
    pub labels: Vec<usize>,
    /// Last observed frame repeated over the horizon.
    pub prior: IntensityField,
    pub geo: GeoGrid,
}
