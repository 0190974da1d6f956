//! Solar geometry from grid geolocation and epoch hours.

use chrono::{DateTime, Datelike, Timelike};

use crate::error::{Error, Result};
use crate::field_store::GeoGrid;

/// Maximum declination in degrees used by the cosine approximation.
pub const OBLIQUITY_DEG: f64 = 23.44;
const ARCCOS_TOLERANCE: f64 = 1e-9;

/// `arccos(sin phi sin delta + cos phi cos delta cos omega)`, all in radians.
pub fn solar_alpha(phi: f64, delta: f64, omega: f64) -> Result<f64> {
    if !(phi.is_finite() && delta.is_finite() && omega.is_finite()) {
        return Err(Error::Numeric("solar angles must be finite".into()));
    }
    let arg = phi.sin() * delta.sin() + phi.cos() * delta.cos() * omega.cos();
    if arg.abs() > 1.0 + ARCCOS_TOLERANCE {
        return Err(Error::Numeric(format!("arccos argument {arg} outside [-1, 1]")));
    }
    Ok(arg.clamp(-1.0, 1.0).acos())
}

/// Declination in radians for a zero-based day of year.
pub fn declination(day_of_year: u32) -> f64 {
    let phase = 2.0 * std::f64::consts::PI * (day_of_year as f64 + 10.0) / 365.25;
    -OBLIQUITY_DEG.to_radians() * phase.cos()
}

/// Hour angle in radians; negative before local solar noon.
pub fn hour_angle(utc_hour: f64, lon_deg: f64) -> f64 {
    let local = utc_hour + lon_deg / 15.0;
    ((local - 12.0) * 15.0).to_radians()
}

/// Zero-based day of year and UTC hour of an epoch hour.
pub fn calendar(epoch_hour: i64) -> Result<(u32, f64)> {
    let t = epoch_hour
        .checked_mul(3600)
        .and_then(|s| DateTime::from_timestamp(s, 0))
        .ok_or_else(|| Error::domain(format!("epoch hour {epoch_hour} out of range")))?;
    Ok((t.ordinal0(), t.hour() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolarGeometry {
    pub latitude: f64,
    pub declination: f64,
    pub hour_angle: f64,
    pub alpha: f64,
}

impl SolarGeometry {
    pub fn at(lat_deg: f64, lon_deg: f64, epoch_hour: i64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat_deg) {
            return Err(Error::domain(format!("latitude {lat_deg} outside [-90, 90]")));
        }
        let (doy, hour) = calendar(epoch_hour)?;
        let latitude = lat_deg.to_radians();
        let declination = declination(doy);
        let hour_angle = hour_angle(hour, lon_deg);
        let alpha = solar_alpha(latitude, declination, hour_angle)?;
        Ok(SolarGeometry { latitude, declination, hour_angle, alpha })
    }
}

/// Grid coordinate of the centre of patch `i` along one axis.
pub fn patch_centre(i: usize, patch: usize) -> f64 {
    (i * patch) as f64 + (patch as f64 - 1.0) / 2.0
}

/// `alpha` at every patch centre, shape `(T, H_p, W_p)` row-major.
pub fn solar_alpha_field(geo: &GeoGrid, timestamps: &[i64], hp: usize, wp: usize, patch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(timestamps.len() * hp * wp);
    for &hour in timestamps {
        for i in 0..hp {
            let lat = geo.lat(patch_centre(i, patch));
            for j in 0..wp {
                let lon = geo.lon(patch_centre(j, patch));
                out.push(SolarGeometry::at(lat, lon, hour)?.alpha);
            }
        }
    }
    Ok(out)
}

/// Additive encoding `alpha * w + b` of shape `(T, H_p, W_p, d)`, where `w`
/// and `b` are the `1 -> d` linear map.
pub fn solar_encoding(
    geo: &GeoGrid,
    timestamps: &[i64],
    hp: usize,
    wp: usize,
    patch: usize,
    weight: &[f64],
    bias: &[f64],
) -> Result<Vec<f64>> {
    if weight.len() != bias.len() {
        return Err(Error::config("solar weight and bias lengths differ"));
    }
    let alpha = solar_alpha_field(geo, timestamps, hp, wp, patch)?;
    Ok(alpha
        .iter()
        .flat_map(|&a| weight.iter().zip(bias).map(move |(w, b)| a * w + b))
        .collect())
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3};

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn alpha_reference_values() {
        assert_eq!(solar_alpha(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!((solar_alpha(FRAC_PI_3, 0.0, 0.0).unwrap() - FRAC_PI_3).abs() < 1e-12);
        for omega in [-2.0, 0.0, 0.7, 3.0] {
            assert!((solar_alpha(FRAC_PI_2, 0.0, omega).unwrap() - FRAC_PI_2).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_rejects_non_finite() {
        assert!(matches!(solar_alpha(f64::NAN, 0.0, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn calendar_of_known_dates() {
        // 1970-01-01T00Z
        assert_eq!(calendar(0).unwrap(), (0, 0.0));
        // 2019-06-01T13Z: day 151 of a non-leap year
        assert_eq!(calendar(433_152 + 13).unwrap(), (151, 13.0));
    }

    #[test]
    fn declination_extremes() {
        // winter solstice near day 355 minus 10 wrap
        let min = (0..366).map(declination).fold(f64::INFINITY, f64::min);
        let max = (0..366).map(declination).fold(f64::NEG_INFINITY, f64::max);
        assert!((min + OBLIQUITY_DEG.to_radians()).abs() < 1e-3);
        assert!((max - OBLIQUITY_DEG.to_radians()).abs() < 1e-3);
        assert!(max <= 0.4093);
    }

    #[test]
    fn same_latitude_same_solar_time_gives_same_alpha() {
        // 15 degrees of longitude east equals one hour earlier in UTC
        let a = SolarGeometry::at(30.0, 120.0, 433_152 + 4).unwrap();
        let b = SolarGeometry::at(30.0, 105.0, 433_152 + 5).unwrap();
        assert!((a.hour_angle - b.hour_angle).abs() < 1e-12);
        assert_eq!(a.alpha, b.alpha);
    }

    #[test]
    fn field_matches_pointwise_oracle() {
        let geo = GeoGrid { lat0: -10.0, lon0: 40.0, dlat: 1.5, dlon: 2.0 };
        let ts = [433_152, 434_263];
        let (hp, wp, p) = (3, 2, 4);
        let field = solar_alpha_field(&geo, &ts, hp, wp, p).unwrap();
        let mut k = 0;
        for &t in &ts {
            for i in 0..hp {
                for j in 0..wp {
                    let lat = (-10.0 + 1.5 * (4.0 * i as f64 + 1.5)).to_radians();
                    let lon = 40.0 + 2.0 * (4.0 * j as f64 + 1.5);
                    let (doy, hour) = calendar(t).unwrap();
                    let delta = -(23.44f64.to_radians()) * (2.0 * std::f64::consts::PI * (doy as f64 + 10.0) / 365.25).cos();
                    let omega = ((hour + lon / 15.0 - 12.0) * 15.0).to_radians();
                    let want = (lat.sin() * delta.sin() + lat.cos() * delta.cos() * omega.cos()).acos();
                    assert!((field[k] - want).abs() < 1e-12);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn zero_map_gives_zero_encoding() {
        let enc = solar_encoding(&GeoGrid::default(), &[433_152, 434_257], 2, 2, 2, &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(enc.len(), 2 * 2 * 2 * 4);
        assert!(enc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_bitwise_repeatable() {
        let w = [0.3, -0.2, 1.1];
        let b = [0.0, 0.5, -0.5];
        let a = solar_encoding(&GeoGrid::default(), &[434_300], 4, 4, 2, &w, &b).unwrap();
        let c = solar_encoding(&GeoGrid::default(), &[434_300], 4, 4, 2, &w, &b).unwrap();
        assert_eq!(a, c);
    }

    proptest! {
        #[test]
        fn alpha_symmetric_in_hour_angle(phi in -1.57f64..1.57, delta in -0.409f64..0.409, omega in -3.2f64..3.2) {
            let a = solar_alpha(phi, delta, omega).unwrap();
            prop_assert_eq!(a, solar_alpha(phi, delta, -omega).unwrap());
            prop_assert!((0.0..=std::f64::consts::PI).contains(&a));
        }
    }
}
