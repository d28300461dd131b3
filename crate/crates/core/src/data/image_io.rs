use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;
use crate::sphere::ErpImage;

/// Reads a PNG or binary PPM (P6) as an ERP image with values `/255`.
pub fn load_erp(path: &Path) -> Result<ErpImage<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(Error::Image { path: path.into(), msg: format!("unsupported format {format:?}") });
    }
    let img = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    ErpImage::new(w as usize, h as usize, data).map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, img: RgbImage) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    img.write_to(&mut std::io::BufWriter::new(tmp.as_file()), ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Writes an ERP image as 8-bit PNG (atomically).
pub fn save_erp_png<T: Scalar>(img: &ErpImage<T>, path: &Path) -> Result<()> {
    let raw = img.data().iter().map(|v| quantize(v.to_f64_lossy())).collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size matches dimensions");
    write_png(path, buf)
}

/// Writes a `3 x S x S` viewport as 8-bit PNG (atomically).
pub fn save_viewport_png<T: Scalar>(vp: &Tensor<T>, path: &Path) -> Result<()> {
    let s = vp.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("save_viewport_png", format!("expected 3 x H x W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = vp.data();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| quantize(d[c * h * w + i].to_f64_lossy())))
    });
    write_png(path, buf)
}
