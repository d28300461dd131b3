use serde::{Deserialize, Serialize};

use super::{load_erp, ManifestEntry, ManifestHeader};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sphere::{extract_sequences, ErpImage, Scanpath, SequenceSource, ViewingCondition, ViewportSequence, DEFAULT_FOV, DEFAULT_K, DESK_VIEWPORT_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    /// One sequence per recorded scanpath.
    Scanpath,
    /// One sequence of equidistant equator viewports per image.
    Equator,
}

impl std::str::FromStr for ExtractionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scanpath" => Ok(ExtractionMode::Scanpath),
            "equator" => Ok(ExtractionMode::Equator),
            _ => Err(Error::Config(format!("unknown extraction mode `{s}` (expected scanpath or equator)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    pub k: usize,
    pub fov: f64,
    pub size: usize,
    pub mode: ExtractionMode,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig { k: DEFAULT_K, fov: DEFAULT_FOV, size: DESK_VIEWPORT_SIZE, mode: ExtractionMode::Scanpath }
    }
}

/// A manifest with its images decoded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<ErpImage<f64>>,
}

impl Dataset {
    pub fn load(manifest: &std::path::Path) -> Result<Self> {
        let (header, entries) = super::load_manifest(manifest)?;
        let images = load_images(&entries)?;
        Ok(Dataset { header, entries, images })
    }

    /// The subset whose image ids are in `ids`, in dataset order.
    pub fn select(&self, ids: &[ManifestEntry]) -> Dataset {
        let keep: std::collections::HashSet<&str> = ids.iter().map(|e| e.image_id.as_str()).collect();
        let (entries, images) = self
            .entries
            .iter()
            .zip(&self.images)
            .filter(|(e, _)| keep.contains(e.image_id.as_str()))
            .map(|(e, i)| (e.clone(), i.clone()))
            .unzip();
        Dataset { header: self.header.clone(), entries, images }
    }
}

pub fn load_images(entries: &[ManifestEntry]) -> Result<Vec<ErpImage<f64>>> {
    entries.iter().map(|e| load_erp(&e.erp_path)).collect()
}

/// One training/evaluation unit: a viewport sequence and its score.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image_id: String,
    pub scene_id: String,
    pub condition: Option<ViewingCondition>,
    pub mos: f64,
    pub sequence: ViewportSequence<T>,
}

/// Renders every entry into viewport sequences. Scanpath-level scores are
/// used when present, otherwise the image score is replicated.
pub fn build_samples<T: Scalar>(entries: &[ManifestEntry], images: &[ErpImage<f64>], cfg: &ExtractionConfig) -> Result<Vec<Sample<T>>> {
    if entries.len() != images.len() {
        return Err(Error::shape("build_samples", format!("{} entries vs {} images", entries.len(), images.len())));
    }
    let mut out = Vec::new();
    for (e, img) in entries.iter().zip(images) {
        let img = img.cast::<T>();
        let (seqs, labels): (Vec<ViewportSequence<T>>, Vec<f64>) = match cfg.mode {
            ExtractionMode::Equator => (extract_sequences(&img, &e.image_id, SequenceSource::Equator, cfg.k, cfg.fov, cfg.size)?, vec![e.mos]),
            ExtractionMode::Scanpath => {
                if e.scanpaths.is_empty() {
                    return Err(Error::pre("build_samples", format!("`{}` has no scanpaths; use equator extraction", e.image_id)));
                }
                let paths: Vec<Scanpath> = e.scanpaths.iter().map(|s| s.scanpath.clone()).collect();
                let seqs = extract_sequences(&img, &e.image_id, SequenceSource::Scanpaths(&paths), cfg.k, cfg.fov, cfg.size)?;
                (seqs, e.scanpaths.iter().map(|s| s.mos.unwrap_or(e.mos)).collect())
            }
        };
        for (sequence, mos) in seqs.into_iter().zip(labels) {
            out.push(Sample { image_id: e.image_id.clone(), scene_id: e.scene_id.clone(), condition: sequence.condition, mos, sequence });
        }
    }
    Ok(out)
}
