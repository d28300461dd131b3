use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{sample_bilinear, sphere_to_erp, ErpImage, SphereCoord};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_FOV: f64 = FRAC_PI_2;
pub const DEFAULT_K: usize = 7;
pub const FULL_VIEWPORT_SIZE: usize = 224;
pub const DESK_VIEWPORT_SIZE: usize = 32;

/// Starting point (good/bad) crossed with exploration time (5 s / 15 s).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewingCondition {
    Good5s,
    Bad5s,
    Good15s,
    Bad15s,
}

impl ViewingCondition {
    pub const ALL: [ViewingCondition; 4] =
        [ViewingCondition::Good5s, ViewingCondition::Bad5s, ViewingCondition::Good15s, ViewingCondition::Bad15s];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewingCondition::Good5s => "Good5s",
            ViewingCondition::Bad5s => "Bad5s",
            ViewingCondition::Good15s => "Good15s",
            ViewingCondition::Bad15s => "Bad15s",
        }
    }

    pub fn good_start(self) -> bool {
        matches!(self, ViewingCondition::Good5s | ViewingCondition::Good15s)
    }

    pub fn long_exploration(self) -> bool {
        matches!(self, ViewingCondition::Good15s | ViewingCondition::Bad15s)
    }
}

impl fmt::Display for ViewingCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewingCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ViewingCondition::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(&s.replace(['-', '_'], "")))
            .ok_or_else(|| Error::Config(format!("unknown viewing condition `{s}`")))
    }
}

/// Time-ordered gaze directions recorded under one viewing condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scanpath {
    pub condition: ViewingCondition,
    pub points: Vec<SphereCoord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewportSpec {
    pub center: SphereCoord,
    /// Horizontal and vertical field of view in radians.
    pub fov: f64,
    pub out_size: usize,
}

impl ViewportSpec {
    pub fn new(center: SphereCoord, fov: f64, out_size: usize) -> Result<Self> {
        if !(fov > 0.0 && fov < PI) {
            return Err(Error::pre("viewport", format!("fov {fov} outside (0, pi)")));
        }
        if out_size < 2 {
            return Err(Error::pre("viewport", format!("output size {out_size} below 2")));
        }
        Ok(ViewportSpec { center, fov, out_size })
    }
}

/// K viewports of one image rendered along one scanpath (or the equator).
#[derive(Clone, Debug)]
pub struct ViewportSequence<T> {
    /// `[K, 3, S, S]`.
    pub viewports: Tensor<T>,
    pub specs: Vec<ViewportSpec>,
    pub condition: Option<ViewingCondition>,
    pub image_id: String,
}

impl<T: Scalar> ViewportSequence<T> {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn out_size(&self) -> usize {
        self.viewports.shape()[2]
    }
}

/// Renders a rectilinear (gnomonic) view of the panorama.
///
/// Output pixel `(i, j)` looks along the tangent-plane ray
/// `(x, y, 1)` with `x = (2(j+½)/S − 1)·tan(fov/2)` and
/// `y = (1 − 2(i+½)/S)·tan(fov/2)` (Y up), pitched to the center latitude
/// and offset by the center longitude, then sampled bilinearly.
/// Returns `[3, S, S]`.
pub fn gnomonic_project<T: Scalar>(img: &ErpImage<T>, spec: &ViewportSpec) -> Tensor<T> {
    let s = spec.out_size;
    let half = (spec.fov / 2.0).tan();
    let (sin_p, cos_p) = spec.center.lat().sin_cos();
    let lon0 = spec.center.lon();
    let mut out = Tensor::zeros(&[3, s, s]);
    let data = out.data_mut();
    for i in 0..s {
        let y = (1.0 - 2.0 * (i as f64 + 0.5) / s as f64) * half;
        for j in 0..s {
            let x = (2.0 * (j as f64 + 0.5) / s as f64 - 1.0) * half;
            let norm = (x * x + y * y + 1.0).sqrt();
            let (dx, dy, dz) = (x / norm, y / norm, 1.0 / norm);
            let ry = dy * cos_p + dz * sin_p;
            let rz = -dy * sin_p + dz * cos_p;
            let lat = ry.clamp(-1.0, 1.0).asin();
            let lon = lon0 + dx.atan2(rz);
            let c = SphereCoord::new(lon, lat.clamp(-FRAC_PI_2, FRAC_PI_2)).expect("finite ray direction");
            let (u, v) = sphere_to_erp(c, img.width(), img.height());
            let px = sample_bilinear(img, u, v);
            for (ch, &val) in px.iter().enumerate() {
                data[(ch * s + i) * s + j] = val;
            }
        }
    }
    out
}

/// Indices of `k` scanpath samples out of `t`:
/// `round_half_up(i·(t−1)/(k−1))`, index 0 when `k = 1`, and every index
/// followed by repeats of the last when `k ≥ t`.
pub fn scanpath_indices(t: usize, k: usize) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::pre("sample_scanpath", "empty scanpath"));
    }
    if k == 0 {
        return Err(Error::pre("sample_scanpath", "K must be at least 1"));
    }
    if k == 1 {
        return Ok(vec![0]);
    }
    if k >= t {
        return Ok((0..k).map(|i| i.min(t - 1)).collect());
    }
    // floor((2 i (t-1) + (k-1)) / (2 (k-1))) == round_half_up(i (t-1) / (k-1))
    Ok((0..k).map(|i| (2 * i * (t - 1) + (k - 1)) / (2 * (k - 1))).collect())
}

pub fn sample_scanpath(sp: &Scanpath, k: usize) -> Result<Vec<SphereCoord>> {
    Ok(scanpath_indices(sp.points.len(), k)?.into_iter().map(|i| sp.points[i]).collect())
}

/// `k` viewports on the equator at longitudes `−π + 2πk/K`.
pub fn equator_viewports(k: usize, fov: f64, out_size: usize) -> Result<Vec<ViewportSpec>> {
    if k == 0 {
        return Err(Error::pre("equator_viewports", "K must be at least 1"));
    }
    (0..k)
        .map(|i| ViewportSpec::new(SphereCoord::new(-PI + TAU * i as f64 / k as f64, 0.0)?, fov, out_size))
        .collect()
}

/// Where viewport centers come from.
#[derive(Clone, Copy, Debug)]
pub enum SequenceSource<'a> {
    /// One sequence per scanpath, in scanpath time order.
    Scanpaths(&'a [Scanpath]),
    /// A single sequence of equidistant equator viewports.
    Equator,
}

pub fn extract_sequences<T: Scalar>(
    img: &ErpImage<T>,
    image_id: &str,
    source: SequenceSource<'_>,
    k: usize,
    fov: f64,
    out_size: usize,
) -> Result<Vec<ViewportSequence<T>>> {
    let render = |specs: Vec<ViewportSpec>, condition: Option<ViewingCondition>| -> Result<ViewportSequence<T>> {
        let views: Vec<Tensor<T>> = specs.iter().map(|s| gnomonic_project(img, s)).collect();
        Ok(ViewportSequence { viewports: Tensor::stack(&views)?, specs, condition, image_id: image_id.to_string() })
    };
    match source {
        SequenceSource::Equator => Ok(vec![render(equator_viewports(k, fov, out_size)?, None)?]),
        SequenceSource::Scanpaths(paths) => paths
            .iter()
            .map(|sp| {
                let specs = sample_scanpath(sp, k)?
                    .into_iter()
                    .map(|c| ViewportSpec::new(c, fov, out_size))
                    .collect::<Result<Vec<_>>>()?;
                render(specs, Some(sp.condition))
            })
            .collect(),
    }
}
