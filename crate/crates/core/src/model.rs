//! Backbone and head assembled into the full scorer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone, init_backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::head::{descriptor, init_head, regress, HeadConfig, HeadOutput};
use crate::ndgrad::{Graph, Mode, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::sphere::ViewportSequence;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig { backbone: BackboneConfig::tiny(), head: HeadConfig::tiny() }
    }

    pub fn full() -> Self {
        ModelConfig { backbone: BackboneConfig::full(), head: HeadConfig::full() }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()
    }
}

/// Fresh parameters drawn from a seeded stream.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_backbone(&cfg.backbone, &mut store, &mut rng)?;
    init_head(&cfg.head, &cfg.backbone, &mut store, &mut rng)?;
    Ok(store)
}

/// Full forward on the tape. `viewports` is `[B*K, 3, S, S]` with the K
/// viewports of each sequence contiguous and in scanpath order.
pub fn forward<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ModelConfig, viewports: Var, batch: usize, k: usize) -> Result<HeadOutput> {
    let feats = backbone(g, store, &cfg.backbone, viewports)?;
    let v = descriptor(g, store, &cfg.head, &feats)?;
    regress(g, store, &cfg.head, v, batch, k)
}

/// Stacks sequences into a `[B*K, 3, S, S]` batch; returns `(batch, B, K)`.
pub fn stack_sequences<T: Scalar>(seqs: &[&ViewportSequence<T>]) -> Result<(Tensor<T>, usize, usize)> {
    let first = seqs.first().ok_or_else(|| Error::pre("stack_sequences", "no sequences"))?;
    let shape = first.viewports.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("stack_sequences", format!("viewports {shape:?}")));
    }
    let mut data = Vec::with_capacity(seqs.len() * first.viewports.numel());
    for s in seqs {
        if s.viewports.shape() != &shape[..] {
            return Err(Error::shape(
                "stack_sequences",
                format!("sequence {} has viewports {:?}, expected {shape:?}", s.image_id, s.viewports.shape()),
            ));
        }
        data.extend_from_slice(s.viewports.data());
    }
    let k = shape[0];
    let mut out_shape = shape;
    out_shape[0] = k * seqs.len();
    Ok((Tensor::new(&out_shape, data)?, seqs.len(), k))
}

/// Eval-mode sequence scores (mean over each sequence's K viewports).
pub fn score_sequences<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, seqs: &[&ViewportSequence<T>]) -> Result<Vec<T>> {
    let (x, b, k) = stack_sequences(seqs)?;
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = g.input(x)?;
    let out = forward(&mut g, store, cfg, xv, b, k)?;
    Ok(g.value(out.sequences).data().to_vec())
}
