//! Gridded meteorological fields, the intensity taxonomy, climatological
//! thresholds, synthetic data and the `PANG` container format.

mod category;
mod container;
mod synthetic;
mod thresholds;

pub use category::{categorize, IntensityCategory, CATEGORY_COUNT};
pub use container::{
    decode_container, encode_container, read_container, write_container, CONTAINER_MAGIC, CONTAINER_VERSION,
};
pub use synthetic::{generate_synthetic, generate_synthetic_with, stack_sequences, SyntheticOptions};
pub use thresholds::{
    estimate_thresholds, quantile_type7, wet_values, IntensityThresholds, ThresholdSource, WET_CUTOFF,
};

use crate::error::{Error, Result};

/// Grid geolocation of the south-west cell centre and the cell spacing, in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoGrid {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
}

impl GeoGrid {
    pub fn lat(&self, row: f64) -> f64 {
        self.lat0 + row * self.dlat
    }

    pub fn lon(&self, col: f64) -> f64 {
        self.lon0 + col * self.dlon
    }
}

impl Default for GeoGrid {
    fn default() -> Self {
        GeoGrid { lat0: 25.0, lon0: 110.0, dlat: 0.25, dlon: 0.25 }
    }
}

/// Extent of a `(B, T, H, W, L)` field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqDims {
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SeqDims {
    pub fn new(batch: usize, frames: usize, height: usize, width: usize, channels: usize) -> Self {
        SeqDims { batch, frames, height, width, channels }
    }

    /// Element count, or `None` on overflow.
    pub fn checked_len(&self) -> Option<usize> {
        [self.frames, self.height, self.width, self.channels]
            .iter()
            .try_fold(self.batch, |acc, &d| acc.checked_mul(d))
    }

    pub fn len(&self) -> usize {
        self.checked_len().expect("dimension overflow")
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    #[inline]
    pub fn index(&self, b: usize, t: usize, y: usize, x: usize, c: usize) -> usize {
        (((b * self.frames + t) * self.height + y) * self.width + x) * self.channels + c
    }
}

/// Batched multi-variate gridded sequence; channel 0 is precipitation in mm/h.
///
/// Frames are hourly: frame `t` is valid at epoch hour `base_hour + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeteoSequence {
    dims: SeqDims,
    data: Vec<f32>,
    base_hour: i64,
    geo: GeoGrid,
}

pub const PRECIP_CHANNEL: usize = 0;

impl MeteoSequence {
    pub fn new(dims: SeqDims, data: Vec<f32>, base_hour: i64, geo: GeoGrid) -> Result<Self> {
        if dims.batch == 0 || dims.frames == 0 || dims.height == 0 || dims.width == 0 || dims.channels == 0 {
            return Err(Error::config(format!("all dimensions must be positive, got {dims:?}")));
        }
        let len = dims
            .checked_len()
            .ok_or_else(|| Error::DimensionOverflow(format!("{dims:?}")))?;
        if data.len() != len {
            return Err(Error::config(format!("expected {len} values for {dims:?}, got {}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite value at flat index {i}")));
        }
        for (i, v) in data.iter().enumerate().skip(PRECIP_CHANNEL).step_by(dims.channels) {
            if *v < 0.0 {
                return Err(Error::domain(format!("negative precipitation {v} at flat index {i}")));
            }
        }
        if !(geo.lat0.is_finite() && geo.lon0.is_finite() && geo.dlat.is_finite() && geo.dlon.is_finite()) {
            return Err(Error::domain("non-finite geolocation"));
        }
        Ok(MeteoSequence { dims, data, base_hour, geo })
    }

    pub fn dims(&self) -> SeqDims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn base_hour(&self) -> i64 {
        self.base_hour
    }

    pub fn geo(&self) -> GeoGrid {
        self.geo
    }

    pub fn timestamps(&self) -> Vec<i64> {
        (0..self.dims.frames as i64).map(|t| self.base_hour + t).collect()
    }

    pub fn get(&self, b: usize, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.dims.index(b, t, y, x, c)]
    }

    /// The precipitation channel as an intensity field.
    pub fn intensity(&self) -> IntensityField {
        let d = self.dims;
        let data = self.data.iter().skip(PRECIP_CHANNEL).step_by(d.channels).copied().collect();
        IntensityField { batch: d.batch, frames: d.frames, height: d.height, width: d.width, data }
    }

    /// Member `b` of the batch as its own sequence.
    pub fn member(&self, b: usize) -> MeteoSequence {
        let n = self.dims.frames * self.dims.frame_len();
        MeteoSequence {
            dims: SeqDims { batch: 1, ..self.dims },
            data: self.data[b * n..(b + 1) * n].to_vec(),
            base_hour: self.base_hour,
            geo: self.geo,
        }
    }
}

/// Per-cell rain rate in mm/h with shape `(B, T, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityField {
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl IntensityField {
    pub fn new(batch: usize, frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != batch * frames * height * width {
            return Err(Error::config("intensity field length does not match its dimensions"));
        }
        Ok(IntensityField { batch, frames, height, width, data })
    }

    #[inline]
    pub fn get(&self, b: usize, t: usize, y: usize, x: usize) -> f32 {
        self.data[((b * self.frames + t) * self.height + y) * self.width + x]
    }

    pub fn frame(&self, b: usize, t: usize) -> &[f32] {
        let n = self.height * self.width;
        let start = (b * self.frames + t) * n;
        &self.data[start..start + n]
    }
}

/// Look-back, horizon, patch size and embedding width of a forecaster.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForecastConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("patch", self.patch),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> SeqDims {
        SeqDims::new(1, 2, 2, 2, 2)
    }

    #[test]
    fn rejects_negative_precipitation() {
        let mut data = vec![0.0f32; 16];
        data[2] = -1.0;
        assert!(matches!(MeteoSequence::new(dims(), data, 0, GeoGrid::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn negative_auxiliary_channel_is_fine() {
        let mut data = vec![0.0f32; 16];
        data[3] = -1.0;
        assert!(MeteoSequence::new(dims(), data, 0, GeoGrid::default()).is_ok());
    }

    #[test]
    fn rejects_non_finite_and_wrong_length() {
        let mut data = vec![0.0f32; 16];
        data[5] = f32::NAN;
        assert!(MeteoSequence::new(dims(), data, 0, GeoGrid::default()).is_err());
        assert!(MeteoSequence::new(dims(), vec![0.0; 15], 0, GeoGrid::default()).is_err());
        assert!(MeteoSequence::new(SeqDims::new(1, 0, 2, 2, 2), vec![], 0, GeoGrid::default()).is_err());
    }

    #[test]
    fn intensity_extracts_channel_zero() {
        let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let seq = MeteoSequence::new(dims(), data, 7, GeoGrid::default()).unwrap();
        let f = seq.intensity();
        assert_eq!(f.data, vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0]);
        assert_eq!(seq.timestamps(), vec![7, 8]);
    }

    #[test]
    fn forecast_config_checks_head_divisibility() {
        let cfg = ForecastConfig { lookback: 3, horizon: 3, patch: 2, embed_dim: 10, heads: 4 };
        assert!(cfg.validate().is_err());
        let cfg = ForecastConfig { heads: 2, ..cfg };
        assert!(cfg.validate().is_ok());
    }
}
