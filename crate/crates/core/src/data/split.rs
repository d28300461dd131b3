use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ManifestEntry;
use crate::error::{Error, Result};

pub const TRAIN_RATIO: f64 = 0.8;

/// Scene-grouped shuffle split; entry order is preserved within each side.
pub fn split_train_test(entries: &[ManifestEntry], ratio: f64, seed: u64) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::pre("split_train_test", format!("ratio {ratio} outside (0, 1)")));
    }
    let mut scenes: Vec<&str> = Vec::new();
    for e in entries {
        if !scenes.contains(&e.scene_id.as_str()) {
            scenes.push(&e.scene_id);
        }
    }
    if scenes.len() < 2 {
        return Err(Error::pre("split_train_test", format!("need at least 2 scenes, got {}", scenes.len())));
    }
    scenes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((scenes.len() as f64 * ratio).round() as usize).clamp(1, scenes.len() - 1);
    let train_scenes = &scenes[..n_train];
    let (train, test) = entries.iter().cloned().partition(|e| train_scenes.contains(&e.scene_id.as_str()));
    Ok((train, test))
}
