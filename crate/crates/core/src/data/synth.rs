//! Procedural stand-in for the omnidirectional quality databases.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, LabeledScanpath, ManifestEntry, ManifestHeader, MANIFEST_SCHEMA};
use super::save_erp_png;
use crate::error::{Error, Result};
use crate::sphere::{normalize_lon, ErpImage, Scanpath, SphereCoord, ViewingCondition};

pub const MOS_MIN: f64 = 1.0;
pub const MOS_MAX: f64 = 5.0;
const MAX_LEVEL: u8 = 3;
const BLUR_SIGMA: [f64; 4] = [0.0, 1.0, 2.0, 3.0];
const NOISE_SIGMA: [f64; 4] = [0.0, 0.05, 0.10, 0.16];
const FIELD_COMPONENTS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    GaussianBlur,
    GaussianNoise,
}

impl Distortion {
    pub fn as_str(self) -> &'static str {
        match self {
            Distortion::GaussianBlur => "blur",
            Distortion::GaussianNoise => "noise",
        }
    }

    /// Fraction of the score range lost at the top level.
    pub fn severity_norm(self) -> f64 {
        1.0
    }

    /// Blur sigma in ERP pixels, or noise sigma in intensity units.
    pub fn strength(self, level: u8) -> f64 {
        match self {
            Distortion::GaussianBlur => BLUR_SIGMA[level as usize],
            Distortion::GaussianNoise => NOISE_SIGMA[level as usize],
        }
    }

    /// Score drop of a fully distorted view.
    pub fn mos_drop(self, level: u8) -> f64 {
        level as f64 * (MOS_MAX - MOS_MIN) / MAX_LEVEL as f64 * self.severity_norm()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// Whole panorama distorted; one score per image.
    Uniform,
    /// One 90° longitude band distorted; four scanpaths with their own scores.
    Nonuniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_scenes: usize,
    pub width: usize,
    pub height: usize,
    pub distortions: Vec<Distortion>,
    /// 0 leaves the image untouched.
    pub levels: Vec<u8>,
    pub mode: SynthMode,
    /// Decay `λ` of the sequence-label weights `exp(λ·t/T)`; `None` is a plain mean.
    pub recency_weighting: Option<f64>,
    pub scanpath_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_scenes: 40,
            width: 128,
            height: 64,
            distortions: vec![Distortion::GaussianBlur, Distortion::GaussianNoise],
            levels: vec![1, 2, 3],
            mode: SynthMode::Uniform,
            recency_weighting: None,
            scanpath_len: 300,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_scenes == 0 || self.distortions.is_empty() || self.levels.is_empty() {
            return bad("synthetic spec needs scenes, distortions and levels".into());
        }
        if self.width < 4 || self.height < 2 || self.width % 2 != 0 || self.height % 2 != 0 {
            return bad(format!("ERP size {}x{} must be even", self.width, self.height));
        }
        if let Some(l) = self.levels.iter().find(|&&l| l > MAX_LEVEL) {
            return bad(format!("distortion level {l} above {MAX_LEVEL}"));
        }
        if self.scanpath_len == 0 {
            return bad("scanpath_len must be positive".into());
        }
        if self.recency_weighting.is_some_and(|l| !l.is_finite()) {
            return bad("recency_weighting must be finite".into());
        }
        Ok(())
    }
}

/// Smooth random field, periodic in longitude, stretched to `[0.05, 0.95]`.
pub fn base_scene<R: Rng>(width: usize, height: usize, rng: &mut R) -> ErpImage<f64> {
    let max_m = (width / 8).max(1) as i32;
    let max_n = (height / 8).max(1) as i32;
    let mut field = |count: usize| {
        let comps: Vec<(f64, f64, f64, f64)> = (0..count)
            .map(|_| {
                let m = rng.gen_range(1..=max_m) as f64;
                let n = rng.gen_range(0..=max_n) as f64;
                (m, n, rng.gen_range(0.5..1.0), rng.gen_range(0.0..TAU))
            })
            .collect();
        let mut v = vec![0.0; width * height];
        for y in 0..height {
            let lat = FRAC_PI_2 - (y as f64 + 0.5) / height as f64 * PI;
            for x in 0..width {
                let lon = (x as f64 + 0.5) / width as f64 * TAU - PI;
                v[y * width + x] = comps.iter().map(|&(m, n, a, p)| a * (m * lon + 2.0 * n * lat + p).cos()).sum();
            }
        }
        v
    };
    let lum = field(FIELD_COMPONENTS);
    let tints: Vec<Vec<f64>> = (0..3).map(|_| field(FIELD_COMPONENTS / 3)).collect();
    let raw: Vec<f64> = (0..width * height).flat_map(|i| (0..3).map(move |c| (i, c))).map(|(i, c)| lum[i] + 0.4 * tints[c][i]).collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = raw.iter().map(|v| 0.05 + 0.9 * (v - lo) / (hi - lo).max(1e-12)).collect();
    ErpImage::new(width, height, data).expect("field stays in range")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur(img: &ErpImage<f64>, sigma: f64) -> ErpImage<f64> {
    let (w, h) = (img.width(), img.height());
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[(y * w + x) * 3 + c] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * src[(y * w + (x as isize + j as isize - r).rem_euclid(w as isize) as usize) * 3 + c])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[((y as isize + j as isize - r).clamp(0, h as isize - 1) as usize * w + x) * 3 + c])
                    .sum::<f64>()
                    .clamp(0.0, 1.0);
            }
        }
    }
    ErpImage::new(w, h, out).expect("convex combination stays in range")
}

/// Applies a distortion to the whole image; level 0 returns a copy.
pub fn apply_distortion<R: Rng>(img: &ErpImage<f64>, d: Distortion, level: u8, rng: &mut R) -> ErpImage<f64> {
    let s = d.strength(level);
    if s == 0.0 {
        return img.clone();
    }
    match d {
        Distortion::GaussianBlur => blur(img, s),
        Distortion::GaussianNoise => {
            let data = img
                .data()
                .iter()
                .map(|&v| {
                    let z: f64 = rng.sample(StandardNormal);
                    (v + s * z).clamp(0.0, 1.0)
                })
                .collect();
            ErpImage::new(img.width(), img.height(), data).expect("clamped")
        }
    }
}

fn lon_distance(a: f64, b: f64) -> f64 {
    normalize_lon(a - b).abs()
}

fn in_band(lon: f64, band: f64) -> bool {
    lon_distance(lon, band) <= FRAC_PI_4
}

/// Overlap of a 90° view centred at `lon` with the band centred at `band`.
fn band_overlap(lon: f64, band: f64) -> f64 {
    (1.0 - lon_distance(lon, band) / FRAC_PI_2).max(0.0)
}

/// Ground-truth score of a view: full score minus the drop scaled by band overlap.
pub fn viewport_quality(lon: f64, band: f64, d: Distortion, level: u8) -> f64 {
    MOS_MAX - d.mos_drop(level) * band_overlap(lon, band)
}

/// `Σ exp(λ·t/T)·q_t / Σ exp(λ·t/T)`.
pub fn recency_label(qualities: &[f64], lambda: f64) -> f64 {
    let t = qualities.len() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, q) in qualities.iter().enumerate() {
        let w = (lambda * i as f64 / t).exp();
        num += w * q;
        den += w;
    }
    num / den
}

fn scanpath<R: Rng>(cond: ViewingCondition, band: f64, len: usize, rng: &mut R) -> Scanpath {
    let start = if cond.good_start() { band + PI } else { band };
    let sweep = if cond.long_exploration() { PI } else { FRAC_PI_2 };
    let dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let (amp, phase, cycles) = (rng.gen_range(0.05..0.2), rng.gen_range(0.0..TAU), rng.gen_range(1.0..3.0));
    let points = (0..len)
        .map(|i| {
            let f = if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 };
            let lat = amp * (TAU * cycles * f + phase).sin();
            SphereCoord::new(start + dir * sweep * f, lat).expect("latitude within range")
        })
        .collect();
    Scanpath { condition: cond, points }
}

/// In-memory dataset: entries (with `erp_path` set to `<image_id>.png`) and
/// their images, aligned.
pub fn synthesize(spec: &SynthSpec) -> Result<(ManifestHeader, Vec<ManifestEntry>, Vec<ErpImage<f64>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::new();
    let mut images = Vec::new();
    let lambda = spec.recency_weighting.unwrap_or(0.0);
    for s in 0..spec.n_scenes {
        let scene_id = format!("scene{s:03}");
        let base = base_scene(spec.width, spec.height, &mut rng);
        for &d in &spec.distortions {
            for &level in &spec.levels {
                let image_id = format!("{scene_id}_{}{level}", d.as_str());
                let distorted = apply_distortion(&base, d, level, &mut rng);
                let (img, mos, scanpaths) = match spec.mode {
                    SynthMode::Uniform => (distorted, MOS_MAX - d.mos_drop(level), Vec::new()),
                    SynthMode::Nonuniform => {
                        let band = rng.gen_range(-PI..PI);
                        let (w, h) = (spec.width, spec.height);
                        let img = ErpImage::from_fn(w, h, |x, y, c| {
                            let lon = (x as f64 + 0.5) / w as f64 * TAU - PI;
                            let src = if in_band(lon, band) { &distorted } else { &base };
                            src.pixel(x, y, c)
                        })?;
                        let paths: Vec<LabeledScanpath> = ViewingCondition::ALL
                            .iter()
                            .map(|&c| {
                                let sp = scanpath(c, band, spec.scanpath_len, &mut rng);
                                let q: Vec<f64> = sp.points.iter().map(|p| viewport_quality(p.lon(), band, d, level)).collect();
                                LabeledScanpath { mos: Some(recency_label(&q, lambda)), scanpath: sp }
                            })
                            .collect();
                        let mos = paths.iter().map(|p| p.mos.unwrap()).sum::<f64>() / paths.len() as f64;
                        (img, mos, paths)
                    }
                };
                entries.push(ManifestEntry {
                    erp_path: format!("{image_id}.png").into(),
                    image_id,
                    scene_id: scene_id.clone(),
                    mos,
                    distortion_tag: format!("{}{level}", d.as_str()),
                    scanpaths,
                });
                images.push(img);
            }
        }
    }
    let conditions = match spec.mode {
        SynthMode::Uniform => Vec::new(),
        SynthMode::Nonuniform => ViewingCondition::ALL.to_vec(),
    };
    Ok((ManifestHeader { schema: MANIFEST_SCHEMA, mos_scale: [MOS_MIN, MOS_MAX], conditions }, entries, images))
}

/// Writes a synthetic dataset to `dir`: `images/*.png`, `scanpaths/*.json`
/// and `manifest.csv`. Returns the manifest path.
pub fn generate_synthetic(spec: &SynthSpec, dir: &Path) -> Result<std::path::PathBuf> {
    let (header, mut entries, images) = synthesize(spec)?;
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (e, img) in entries.iter_mut().zip(&images) {
        let p = img_dir.join(&e.erp_path);
        save_erp_png(img, &p)?;
        e.erp_path = p;
    }
    write_manifest(dir, "manifest.csv", &header, &entries)
}
