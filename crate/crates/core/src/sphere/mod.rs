//! Equirectangular geometry: sphere coordinates, gnomonic viewport
//! rendering and viewport-sequence construction.

mod erp;
mod viewport;

pub use erp::{sample_bilinear, sphere_to_erp, ErpImage};
pub use viewport::{
    equator_viewports, extract_sequences, gnomonic_project, sample_scanpath, scanpath_indices, Scanpath,
    SequenceSource, ViewingCondition, ViewportSequence, ViewportSpec, DEFAULT_FOV, DEFAULT_K,
    DESK_VIEWPORT_SIZE, FULL_VIEWPORT_SIZE,
};

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A direction on the unit sphere. Longitude is kept in `[-π, π)`,
/// latitude in `[-π/2, π/2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct SphereCoord {
    lon: f64,
    lat: f64,
}

impl SphereCoord {
    /// Normalizes `lon` modulo 2π; rejects latitudes outside `[-π/2, π/2]`.
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(Error::pre("sphere_coord", format!("non-finite coordinate ({lon}, {lat})")));
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&lat) {
            return Err(Error::pre("sphere_coord", format!("latitude {lat} outside [-pi/2, pi/2]")));
        }
        Ok(SphereCoord { lon: normalize_lon(lon), lat })
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }
}

impl TryFrom<(f64, f64)> for SphereCoord {
    type Error = Error;

    fn try_from((lon, lat): (f64, f64)) -> Result<Self> {
        SphereCoord::new(lon, lat)
    }
}

impl From<SphereCoord> for (f64, f64) {
    fn from(c: SphereCoord) -> Self {
        (c.lon, c.lat)
    }
}

/// Wraps a longitude into `[-π, π)`.
pub fn normalize_lon(lon: f64) -> f64 {
    if (-PI..PI).contains(&lon) {
        return lon;
    }
    let mut l = lon - TAU * ((lon + PI) / TAU).floor();
    // floor() can land one period off when lon + π sits on a rounding edge
    if l >= PI {
        l -= TAU;
    }
    if l < -PI {
        l += TAU;
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lon_wraps_into_range() {
        let c = SphereCoord::new(PI, 0.0).unwrap();
        assert_eq!(c.lon(), -PI);
        let c = SphereCoord::new(0.5 + TAU, 0.1).unwrap();
        assert_eq!(c.lon(), 0.5);
        let c = SphereCoord::new(-0.25 - 2.0 * TAU, 0.0).unwrap();
        assert_eq!(c.lon(), -0.25);
    }

    #[test]
    fn lat_out_of_range_rejected() {
        assert!(SphereCoord::new(0.0, 1.6).is_err());
        assert!(SphereCoord::new(f64::NAN, 0.0).is_err());
        assert!(SphereCoord::new(0.0, -FRAC_PI_2).is_ok());
    }

    #[test]
    fn serde_roundtrip_validates() {
        let c: SphereCoord = serde_json::from_str("[4.0, 0.5]").unwrap();
        assert!(c.lon() < PI);
        assert!(serde_json::from_str::<SphereCoord>("[0.0, 3.0]").is_err());
    }
}
