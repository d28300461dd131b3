//! Run configuration: one TOML file plus `--set key.path=value` overrides.

use std::path::Path;

use max360iq::data::{ExtractionConfig, SynthSpec, TRAIN_RATIO};
use max360iq::model::ModelConfig;
use max360iq::trainer::TrainConfig;
use max360iq::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Fraction of scenes used for training.
    pub ratio: f64,
    /// Fraction of the training scenes held out for best-checkpoint selection; 0 disables.
    pub val_ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { ratio: TRAIN_RATIO, val_ratio: 0.0, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dtype: Dtype,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub extraction: ExtractionConfig,
    pub split: SplitConfig,
    pub synth: SynthSpec,
}

impl RunConfig {
    pub fn validate(&self) -> max360iq::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        let s = &self.split;
        if !(s.ratio > 0.0 && s.ratio < 1.0) || !(0.0..1.0).contains(&s.val_ratio) {
            return Err(Error::Config(format!("split ratios {} / {} outside (0, 1)", s.ratio, s.val_ratio)));
        }
        if self.extraction.k == 0 || self.extraction.size < 2 {
            return Err(Error::Config("extraction needs k >= 1 and size >= 2".into()));
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.split.seed = seed;
        self.synth.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn config_err(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

/// `key.path=value`; the value is read as a TOML literal, falling back to a bare string.
fn apply_override(root: &mut toml::Table, spec: &str) -> max360iq::Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| config_err(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| config_err(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Defaults, then the file (if any), then overrides in order.
pub fn load(path: Option<&Path>, overrides: &[String]) -> max360iq::Result<RunConfig> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.into(), source: e })?;
            text.parse::<toml::Table>().map_err(|e| config_err(format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| config_err(e.message()))?;
    cfg.validate()?;
    Ok(cfg)
}
