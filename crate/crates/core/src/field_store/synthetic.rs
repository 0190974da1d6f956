//! Advecting Gaussian rain cells with Pareto-distributed peak intensities.
//!
//! Channel layout: 0 precipitation (mm/h), 1 temperature anomaly, 2 humidity,
//! 3 zonal wind, 4 meridional wind; further channels are drifting plane waves.
//! Auxiliary channels are dimensionless and roughly unit scale.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};

use super::{GeoGrid, MeteoSequence, SeqDims};
use crate::error::{Error, Result};

/// 2019-06-01T00:00Z in hours since the Unix epoch.
const BASE_EPOCH_HOUR: i64 = 433_152;
const PEAK_CAP: f64 = 100.0;

/// Knobs of the generator beyond the required dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticOptions {
    /// Mean rain cells per 1024 grid cells.
    pub cell_density: f64,
    /// Pareto scale of peak intensity (mm/h).
    pub peak_scale: f64,
    /// Range of Gaussian cell widths in grid cells.
    pub sigma_range: (f64, f64),
    /// Maximum advection speed per axis, grid cells per hour.
    pub max_speed: f64,
    pub geo: GeoGrid,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            cell_density: 2.5,
            peak_scale: 1.0,
            sigma_range: (1.5, 3.5),
            max_speed: 1.0,
            geo: GeoGrid::default(),
        }
    }
}

struct RainCell {
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    sigma: f64,
    peak: f64,
    growth: f64,
}

impl RainCell {
    fn at(&self, t: f64) -> (f64, f64, f64) {
        let peak = (self.peak * (self.growth * t).exp()).min(PEAK_CAP);
        (self.y + self.vy * t, self.x + self.vx * t, peak)
    }
}

struct Wave {
    ky: f64,
    kx: f64,
    omega: f64,
    phase: f64,
}

/// `n_seq` independent single-member sequences with `(T, H, W, L)` extent,
/// sharing geolocation and start time.
pub fn generate_synthetic(
    seed: u64,
    n_seq: usize,
    dims: (usize, usize, usize, usize),
    tail_exponent: f64,
) -> Result<Vec<MeteoSequence>> {
    generate_synthetic_with(seed, n_seq, dims, tail_exponent, &SyntheticOptions::default())
}

pub fn generate_synthetic_with(
    seed: u64,
    n_seq: usize,
    dims: (usize, usize, usize, usize),
    tail_exponent: f64,
    options: &SyntheticOptions,
) -> Result<Vec<MeteoSequence>> {
    let (frames, height, width, channels) = dims;
    if frames == 0 || height == 0 || width == 0 || channels == 0 {
        return Err(Error::config(format!("synthetic dims must be positive, got {dims:?}")));
    }
    if !(tail_exponent > 1.0 && tail_exponent.is_finite()) {
        return Err(Error::config(format!("tail exponent must exceed 1, got {tail_exponent}")));
    }
    let (s_lo, s_hi) = options.sigma_range;
    if !(options.peak_scale > 0.0 && s_lo > 0.0 && s_lo <= s_hi && options.cell_density >= 0.0) {
        return Err(Error::config("invalid synthetic generator options"));
    }
    let pareto = Pareto::new(options.peak_scale, tail_exponent)
        .map_err(|e| Error::config(format!("pareto law: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_hour = BASE_EPOCH_HOUR + rng.random_range(0..24 * 90);
    let seq_dims = SeqDims::new(1, frames, height, width, channels);
    let area = (height * width) as f64;
    let mean_cells = options.cell_density * area / 1024.0;

    let mut out = Vec::with_capacity(n_seq);
    for _ in 0..n_seq {
        // at least one cell so no sequence is entirely dry
        let n_cells = 1 + (mean_cells * 2.0 * rng.random::<f64>()).floor() as usize;
        let margin = 4.0;
        let cells: Vec<RainCell> = (0..n_cells)
            .map(|_| RainCell {
                y: rng.random_range(-margin..height as f64 + margin),
                x: rng.random_range(-margin..width as f64 + margin),
                vy: rng.random_range(-options.max_speed..=options.max_speed),
                vx: rng.random_range(-options.max_speed..=options.max_speed),
                sigma: rng.random_range(s_lo..=s_hi),
                peak: pareto.sample(&mut rng).min(PEAK_CAP),
                growth: rng.random_range(-0.1..=0.1),
            })
            .collect();
        let waves: Vec<Wave> = (5..channels.max(5))
            .map(|_| Wave {
                ky: rng.random_range(-0.3..0.3),
                kx: rng.random_range(-0.3..0.3),
                omega: rng.random_range(-0.5..0.5),
                phase: rng.random_range(0.0..2.0 * PI),
            })
            .collect();
        let data = render(seq_dims, &cells, &waves, base_hour, &options.geo);
        out.push(MeteoSequence::new(seq_dims, data, base_hour, options.geo)?);
    }
    Ok(out)
}

fn render(d: SeqDims, cells: &[RainCell], waves: &[Wave], base_hour: i64, geo: &GeoGrid) -> Vec<f32> {
    let mut data = vec![0.0f32; d.len()];
    for t in 0..d.frames {
        let tf = t as f64;
        let hour_of_day = (base_hour + t as i64).rem_euclid(24) as f64;
        let diurnal = (2.0 * PI * (hour_of_day - 15.0) / 24.0).cos();
        let states: Vec<(f64, f64, f64)> = cells.iter().map(|c| c.at(tf)).collect();
        for y in 0..d.height {
            let lat = geo.lat(y as f64);
            for x in 0..d.width {
                let (mut rain, mut moist, mut u, mut v) = (0.0, 0.0, 0.0, 0.0);
                for (c, &(cy, cx, peak)) in cells.iter().zip(&states) {
                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let core = (-r2 / (2.0 * c.sigma * c.sigma)).exp();
                    let halo = (-r2 / (8.0 * c.sigma * c.sigma)).exp();
                    rain += peak * core;
                    moist += peak.ln_1p() * halo;
                    u += c.vx * halo;
                    v += c.vy * halo;
                }
                let base = d.index(0, t, y, x, 0);
                data[base] = rain as f32;
                for ch in 1..d.channels {
                    let value = match ch {
                        1 => 0.5 * diurnal - 0.04 * (lat - geo.lat0) - 0.5 * (rain / 5.0).tanh(),
                        2 => (moist / 2.0).tanh(),
                        3 => u,
                        4 => v,
                        _ => {
                            let w = &waves[ch - 5];
                            (w.ky * y as f64 + w.kx * x as f64 + w.omega * tf + w.phase).sin()
                        }
                    };
                    data[base + ch] = value as f32;
                }
            }
        }
    }
    data
}

/// Concatenates single- or multi-member sequences along the batch axis.
pub fn stack_sequences(seqs: &[MeteoSequence]) -> Result<MeteoSequence> {
    let first = seqs.first().ok_or_else(|| Error::config("cannot stack an empty list"))?;
    let d = first.dims();
    let mut data = Vec::new();
    let mut batch = 0;
    for s in seqs {
        let sd = s.dims();
        if (sd.frames, sd.height, sd.width, sd.channels) != (d.frames, d.height, d.width, d.channels)
            || s.base_hour() != first.base_hour()
            || s.geo() != first.geo()
        {
            return Err(Error::ConfigMismatch("sequences to stack differ in shape, time or grid".into()));
        }
        batch += sd.batch;
        data.extend_from_slice(s.data());
    }
    MeteoSequence::new(SeqDims { batch, ..d }, data, first.base_hour(), first.geo())
}
