//! Manifest ingestion, scene-grouped splitting, sample construction and the
//! synthetic micro-dataset generator.

mod image_io;
mod manifest;
mod samples;
mod split;
mod synth;

pub use image_io::{load_erp, save_erp_png, save_viewport_png};
pub use manifest::{
    load_manifest, parse_manifest, write_manifest, LabeledScanpath, ManifestEntry, ManifestHeader, ScanpathFile, MANIFEST_SCHEMA,
};
pub use manifest::write_atomic;
pub use samples::{build_samples, load_images, Dataset, ExtractionConfig, ExtractionMode, Sample};
pub use split::{split_train_test, TRAIN_RATIO};
pub use synth::{
    apply_distortion, base_scene, generate_synthetic, recency_label, synthesize, viewport_quality, Distortion, SynthMode, SynthSpec,
    MOS_MAX, MOS_MIN,
};
