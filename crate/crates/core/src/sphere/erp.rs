use std::f64::consts::{FRAC_PI_2, PI, TAU};

use super::SphereCoord;
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::scalar::{lit, Scalar};

/// Equirectangular panorama, RGB interleaved row-major, values in `[0, 1]`.
///
/// Columns span longitude `[-π, π)` left to right; rows span latitude
/// `π/2` (top) to `-π/2` (bottom). A 2:1 aspect ratio is expected but not
/// enforced.
#[derive(Clone, Debug, PartialEq)]
pub struct ErpImage<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> ErpImage<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width < 2 || height < 1 {
            return Err(Error::pre("erp_image", format!("size {width}x{height} too small")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape("erp_image", format!("{width}x{height}x3 needs {} values, got {}", width * height * 3, data.len())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < T::zero() || **v > T::one()) {
            return Err(Error::pre("erp_image", format!("value {v} outside [0, 1]")));
        }
        Ok(ErpImage { width, height, data })
    }

    pub fn constant(width: usize, height: usize, v: T) -> Result<Self> {
        Self::new(width, height, vec![v; width * height * 3])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> ErpImage<U> {
        ErpImage { width: self.width, height: self.height, data: self.data.iter().map(|v| lit(v.to_f64_lossy())).collect() }
    }

    /// Channel-first copy `[3, H, W]`.
    pub fn to_chw(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, rest) = (i / (w * h), i % (w * h));
            self.data[rest * 3 + c]
        })
    }
}

/// Continuous ERP pixel position of a sphere direction.
///
/// `u = (lon + π) / 2π · w` wraps modulo `w`; `v = (π/2 − lat) / π · h` is
/// clamped into `[0, h)`.
pub fn sphere_to_erp(c: SphereCoord, w: usize, h: usize) -> (f64, f64) {
    let (wf, hf) = (w as f64, h as f64);
    let u = ((c.lon() + PI) / TAU * wf).rem_euclid(wf);
    let v = ((FRAC_PI_2 - c.lat()) / PI * hf).clamp(0.0, f64::from_bits(hf.to_bits() - 1));
    (u, v)
}

/// Bilinear sample at continuous position `(u, v)`; pixel `(x, y)` has its
/// center at `(x + 0.5, y + 0.5)`. Wraps horizontally, clamps vertically.
pub fn sample_bilinear<T: Scalar>(img: &ErpImage<T>, u: f64, v: f64) -> [T; 3] {
    let (w, h) = (img.width, img.height);
    let x = u - 0.5;
    let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let x0f = x.floor();
    let fx = x - x0f;
    let x0 = (x0f as i64).rem_euclid(w as i64) as usize;
    let x1 = (x0 + 1) % w;
    let y0 = y.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let fy = y - y0 as f64;
    let (fx, fy) = (lit::<T>(fx), lit::<T>(fy));
    let one = T::one();
    let mut out = [T::zero(); 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = img.pixel(x0, y0, c) * (one - fx) + img.pixel(x1, y0, c) * fx;
        let bot = img.pixel(x0, y1, c) * (one - fx) + img.pixel(x1, y1, c) * fx;
        *o = top * (one - fy) + bot * fy;
    }
    out
}
