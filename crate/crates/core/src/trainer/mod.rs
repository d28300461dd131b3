//! Optimization loop, checkpoints and batched inference.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState, ADAM_EPS, BETA1, BETA2};
pub use checkpoint::{Checkpoint, CHECKPOINT_SCHEMA, MAGIC};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ExtractionConfig, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{plcc, srcc};
use crate::model::{forward, init_model, score_sequences, stack_sequences, ModelConfig};
use crate::ndgrad::{Graph, Mode, ParamStore};
use crate::objective::{loss, LossConfig, LossKind};
use crate::scalar::{lit, Scalar};
use crate::sphere::ViewingCondition;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub loss: LossKind,
    pub loss_cfg: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 5e-4,
            batch_size: 16,
            epochs: 150,
            max_steps: None,
            seed: 0,
            loss: LossKind::NormInNorm,
            loss_cfg: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        self.loss_cfg.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub batches: usize,
    pub skipped: usize,
    pub train_loss: Option<f64>,
    pub val_plcc: Option<f64>,
    pub val_srcc: Option<f64>,
    pub best: bool,
}

/// Mutable optimization state.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub extraction: ExtractionConfig,
    pub store: ParamStore<T>,
    pub adam: AdamState<T>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, extraction: &ExtractionConfig) -> Result<Self> {
        cfg.validate()?;
        let store = init_model(model, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model: model.clone(),
            cfg: cfg.clone(),
            extraction: *extraction,
            adam: AdamState::new(&store),
            store,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        ck.model.validate()?;
        ck.train.validate()?;
        Ok(Trainer {
            model: ck.model,
            cfg: ck.train,
            extraction: ck.extraction,
            store: ck.store,
            adam: ck.adam,
            rng: ck.rng,
            epoch: ck.epoch,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            train: self.cfg.clone(),
            extraction: self.extraction,
            store: self.store.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            epoch: self.epoch,
            step: self.step,
        }
    }

    fn done(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    /// One optimizer step. Returns `None` (and leaves the state untouched)
    /// when the batch scores are constant and the loss is undefined.
    pub fn train_step(&mut self, batch: &[&Sample<T>]) -> Result<Option<f64>> {
        let mos: Vec<T> = batch.iter().map(|s| lit(s.mos)).collect();
        if self.cfg.loss == LossKind::NormInNorm && degenerate(batch) {
            return Ok(None);
        }
        let seqs: Vec<_> = batch.iter().map(|s| &s.sequence).collect();
        let (x, b, k) = stack_sequences(&seqs)?;
        let mut g = Graph::new(Mode::Train, self.rng.gen());
        let xv = g.input(x)?;
        let out = forward(&mut g, &self.store, &self.model, xv, b, k)?;
        let l = loss(&mut g, self.cfg.loss, &self.cfg.loss_cfg, out.sequences, &mos)?;
        let value = g.value(l).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let grads = g.backward(l)?;
        self.store.zero_grad();
        grads.accumulate_into(&g, &mut self.store)?;
        adam_step(&mut self.store, &mut self.adam, self.cfg.lr, self.cfg.weight_decay)?;
        g.commit_buffers(&mut self.store)?;
        self.step += 1;
        Ok(Some(value))
    }

    /// One pass over a fresh shuffle of `train`, stopping early at `max_steps`.
    pub fn train_epoch(&mut self, train: &[Sample<T>]) -> Result<(Option<f64>, usize, usize)> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut batches, mut skipped) = (0.0, 0, 0);
        for chunk in order.chunks(self.cfg.batch_size) {
            if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &train[i]).collect();
            match self.train_step(&batch)? {
                Some(l) => {
                    total += l;
                    batches += 1;
                }
                None => {
                    log::warn!("epoch {}: skipped batch of {} with constant scores", self.epoch + 1, batch.len());
                    skipped += 1;
                }
            }
        }
        self.epoch += 1;
        Ok(((batches > 0).then(|| total / batches as f64), batches, skipped))
    }
}

fn degenerate<T>(batch: &[&Sample<T>]) -> bool {
    batch.len() < 2 || batch.iter().all(|s| s.mos == batch[0].mos)
}

/// Final and best-on-validation states plus the per-epoch log.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub best: Checkpoint<T>,
    pub last: Checkpoint<T>,
    pub history: Vec<EpochRecord>,
}

/// Runs epochs until `epochs` or `max_steps` is reached. The best
/// checkpoint maximizes validation SRCC; without a usable validation set it
/// is the final state. `on_epoch` receives each record as it is produced.
pub fn train<T: Scalar>(
    mut trainer: Trainer<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::pre("train", "empty training set"));
    }
    let mut best: Option<(f64, Checkpoint<T>)> = None;
    let mut history = Vec::new();
    while !trainer.done() {
        let (train_loss, batches, skipped) = trainer.train_epoch(train_set)?;
        let (val_plcc, val_srcc) = validate(&trainer.store, &trainer.model, val_set)?;
        let improved = val_srcc.is_some_and(|s| best.as_ref().map_or(true, |(b, _)| s > *b));
        if improved {
            best = Some((val_srcc.unwrap_or_default(), trainer.checkpoint()));
        }
        let rec = EpochRecord { epoch: trainer.epoch, step: trainer.step, batches, skipped, train_loss, val_plcc, val_srcc, best: improved };
        on_epoch(&rec)?;
        history.push(rec);
    }
    let last = trainer.checkpoint();
    let best = best.map_or_else(|| last.clone(), |(_, c)| c);
    Ok(TrainOutcome { best, last, history })
}

/// Sequence-level PLCC/SRCC on a held-out set; `None` when undefined.
pub fn validate<T: Scalar>(store: &ParamStore<T>, model: &ModelConfig, val: &[Sample<T>]) -> Result<(Option<f64>, Option<f64>)> {
    if val.len() < 3 {
        return Ok((None, None));
    }
    let pred: Vec<f64> = predict(store, model, val, 16)?.into_iter().map(|v| v.to_f64_lossy()).collect();
    let mos: Vec<f64> = val.iter().map(|s| s.mos).collect();
    Ok((plcc(&pred, &mos).ok(), srcc(&pred, &mos).ok()))
}

/// Eval-mode sequence scores in input order, computed in chunks of
/// `chunk` sequences across the current rayon pool.
pub fn predict<T: Scalar>(store: &ParamStore<T>, model: &ModelConfig, samples: &[Sample<T>], chunk: usize) -> Result<Vec<T>> {
    let chunk = chunk.max(1);
    let parts: Vec<Vec<T>> = samples
        .par_chunks(chunk)
        .map(|c| {
            let seqs: Vec<_> = c.iter().map(|s| &s.sequence).collect();
            score_sequences(store, model, &seqs)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequencePrediction {
    pub condition: Option<ViewingCondition>,
    pub score: f64,
    pub mos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub image_id: String,
    pub scene_id: String,
    /// Mean over the image's sequence scores.
    pub score: f64,
    pub sequences: Vec<SequencePrediction>,
}

/// Groups sequence scores by image in order of first appearance.
pub fn aggregate_predictions<T: Scalar>(samples: &[Sample<T>], scores: &[T]) -> Result<Vec<ImagePrediction>> {
    if samples.len() != scores.len() {
        return Err(Error::shape("aggregate_predictions", format!("{} samples, {} scores", samples.len(), scores.len())));
    }
    let mut out: indexmap::IndexMap<&str, ImagePrediction> = indexmap::IndexMap::new();
    for (s, &v) in samples.iter().zip(scores) {
        let e = out.entry(&s.image_id).or_insert_with(|| ImagePrediction {
            image_id: s.image_id.clone(),
            scene_id: s.scene_id.clone(),
            score: 0.0,
            sequences: Vec::new(),
        });
        e.sequences.push(SequencePrediction { condition: s.condition, score: v.to_f64_lossy(), mos: s.mos });
    }
    Ok(out
        .into_values()
        .map(|mut p| {
            p.score = p.sequences.iter().map(|s| s.score).sum::<f64>() / p.sequences.len() as f64;
            p
        })
        .collect())
}

/// Names of parameters that receive weight decay.
pub fn decayed_parameters<T: Scalar>(store: &ParamStore<T>) -> Vec<String> {
    store.iter().filter(|(_, p)| p.kind.decays()).map(|(n, _)| n.to_string()).collect()
}
