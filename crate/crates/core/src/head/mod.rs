//! Quality head: multi-scale GeM fusion, deep semantic guidance, recurrent
//! regression over the viewport sequence and the two averaging steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{add_linear, BackboneConfig, FeaturePyramid, STAGES};
use crate::error::{Error, Result};
use crate::ndgrad::kernels::{gem_forward, softplus, softplus_inverse};
use crate::ndgrad::ops::{gru_cell_step, GruCellNames};
use crate::ndgrad::{Graph, Mode, ParamKind, ParamStore, Tensor, Var};
use crate::scalar::{lit, Scalar};

/// Initial pooling exponent.
pub const RHO_INIT: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub gru_layers: usize,
    pub gru_hidden: usize,
    pub fc_hidden: usize,
    /// Applied after FC1 in train mode only.
    pub dropout: f64,
    pub use_gru: bool,
    pub use_msfi: bool,
    pub use_dsg: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl HeadConfig {
    pub fn tiny() -> Self {
        HeadConfig { gru_layers: 1, gru_hidden: 32, fc_hidden: 32, dropout: 0.1, use_gru: true, use_msfi: true, use_dsg: true }
    }

    pub fn full() -> Self {
        HeadConfig { gru_layers: 2, gru_hidden: 64, fc_hidden: 128, dropout: 0.1, use_gru: true, use_msfi: true, use_dsg: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_msfi && !self.use_dsg {
            return Err(Error::Config("at least one of use_msfi and use_dsg must be enabled".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.fc_hidden == 0 || (self.use_gru && (self.gru_layers == 0 || self.gru_hidden == 0)) {
            return Err(Error::Config("head widths and GRU layer count must be positive".into()));
        }
        Ok(())
    }

    /// Length of the fused descriptor fed to the regressor.
    pub fn descriptor_len(&self, bb: &BackboneConfig) -> usize {
        let c4 = bb.stage_dims[STAGES - 1];
        c4 * (self.use_msfi as usize + self.use_dsg as usize)
    }
}

pub fn gem_param_name(level: Option<usize>) -> String {
    match level {
        Some(i) => format!("head.gem.{i}.raw"),
        None => "head.gem.g.raw".to_string(),
    }
}

pub fn gru_names(layer: usize) -> GruCellNames {
    GruCellNames::new(format!("head.gru.{layer}"))
}

/// Registers head parameters. The fusion layer maps `ΣC_i → C_4`.
pub fn init_head<T: Scalar, R: Rng>(cfg: &HeadConfig, bb: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let raw = Tensor::scalar(softplus_inverse(lit::<T>(RHO_INIT - 1.0))).reshape(&[1])?;
    let c4 = bb.stage_dims[STAGES - 1];
    if cfg.use_msfi {
        for i in 0..STAGES {
            store.insert(gem_param_name(Some(i)), raw.clone(), ParamKind::GemExponent)?;
        }
        add_linear(store, "head.fusion", c4, bb.stage_dims.iter().sum(), rng)?;
    }
    if cfg.use_dsg {
        store.insert(gem_param_name(None), raw, ParamKind::GemExponent)?;
    }
    let mut din = cfg.descriptor_len(bb);
    if cfg.use_gru {
        let dh = cfg.gru_hidden;
        let bound = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.gru_layers {
            let names = gru_names(l);
            for part in GruCellNames::PARTS {
                let (shape, kind) = match &part[..1] {
                    "w" => (vec![dh, din], ParamKind::Weight),
                    "u" => (vec![dh, dh], ParamKind::Weight),
                    _ => (vec![dh], ParamKind::Bias),
                };
                let t = Tensor::from_fn(&shape, |_| lit(rng.gen_range(-bound..bound)));
                store.insert(names.name(part), t, kind)?;
            }
            din = dh;
        }
    }
    add_linear(store, "head.fc1", cfg.fc_hidden, din, rng)?;
    add_linear(store, "head.fc2", 1, cfg.fc_hidden, rng)
}

/// `ρ = 1 + softplus(raw)` on the tape.
pub fn rho<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    let raw = g.param(store, name)?;
    let sp = g.softplus(raw)?;
    g.affine(sp, T::one(), T::one())
}

/// Current value of a reparameterized exponent.
pub fn rho_value<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<T> {
    Ok(T::one() + softplus(store.value(name)?.data()[0]))
}

fn lin<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    g.linear(x, w, Some(b))
}

/// GeM-pools every level, concatenates and fuses: `[N, C_4]`.
pub fn msfi<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, feats: &[Var; STAGES]) -> Result<Var> {
    let mut pooled = Vec::with_capacity(STAGES);
    for (i, &f) in feats.iter().enumerate() {
        let r = rho(g, store, &gem_param_name(Some(i)))?;
        pooled.push(g.gem(f, r)?);
    }
    let cat = g.concat(&pooled)?;
    lin(g, store, "head.fusion", cat)
}

/// Pooled deepest-stage feature `[N, C_4]`.
pub fn dsg<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, f4: Var) -> Result<Var> {
    let r = rho(g, store, &gem_param_name(None))?;
    g.gem(f4, r)
}

/// Per-viewport descriptor `ṽ` for every row of the pyramid.
pub fn descriptor<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &HeadConfig, feats: &[Var; STAGES]) -> Result<Var> {
    match (cfg.use_msfi, cfg.use_dsg) {
        (true, true) => {
            let q = msfi(g, store, feats)?;
            let d = dsg(g, store, feats[STAGES - 1])?;
            g.concat(&[q, d])
        }
        (true, false) => msfi(g, store, feats),
        (false, true) => dsg(g, store, feats[STAGES - 1]),
        (false, false) => Err(Error::Config("at least one of use_msfi and use_dsg must be enabled".into())),
    }
}

/// Scores on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[B, K]` per-viewport scores.
    pub steps: Var,
    /// `[B]` sequence scores (mean over K).
    pub sequences: Var,
}

/// Regresses descriptors `[B*K, D]` (row `b*K + t`) into scores.
pub fn regress<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &HeadConfig, v: Var, batch: usize, k: usize) -> Result<HeadOutput> {
    let s = g.shape(v).to_vec();
    if k == 0 || batch == 0 || s.len() != 2 || s[0] != batch * k {
        return Err(Error::shape("regress", format!("descriptors {s:?} for {batch} sequences of {k}")));
    }
    let mut x = v;
    if cfg.use_gru {
        let mut d = s[1];
        let mut seq: Vec<Var> = (0..k)
            .map(|t| {
                let idx = (0..batch).flat_map(|b| (b * k + t) * d..(b * k + t + 1) * d).collect();
                g.gather(v, idx, &[batch, d])
            })
            .collect::<Result<_>>()?;
        let dh = cfg.gru_hidden;
        for l in 0..cfg.gru_layers {
            let names = gru_names(l);
            let mut h = g.input(Tensor::zeros(&[batch, dh]))?;
            let mut outs = Vec::with_capacity(k);
            for &xt in &seq {
                h = gru_cell_step(g, store, &names, xt, h)?;
                outs.push(h);
            }
            seq = outs;
            d = dh;
        }
        let cat = g.concat(&seq)?;
        x = g.reshape(cat, &[batch * k, d])?;
    }
    let y = lin(g, store, "head.fc1", x)?;
    let y = g.gelu(y)?;
    let y = g.dropout(y, cfg.dropout)?;
    let y = lin(g, store, "head.fc2", y)?;
    let steps = g.reshape(y, &[batch, k])?;
    let idx = (0..k).flat_map(|t| (0..batch).map(move |b| b * k + t)).collect();
    let tb = g.gather(steps, idx, &[k, batch])?;
    let sequences = g.mean_axis0(tb)?;
    Ok(HeadOutput { steps, sequences })
}

/// Forward-only GeM over a `C x H x W` map.
pub fn gem_pool<T: Scalar>(f: &Tensor<T>, rho: T) -> Result<Tensor<T>> {
    if f.ndim() != 3 {
        return Err(Error::shape("gem_pool", format!("expected C x H x W, got {:?}", f.shape())));
    }
    if !(rho >= T::one()) {
        return Err(Error::pre("gem_pool", format!("exponent {rho} below 1")));
    }
    let len = f.shape()[1] * f.shape()[2];
    let out = Tensor::new(&[f.shape()[0]], gem_forward(f.data(), len, rho))?;
    out.check_finite("gem_pool")?;
    Ok(out)
}

fn batched<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = vec![1];
    s.extend_from_slice(f.shape());
    f.reshape(&s)
}

/// Forward-only `v_q` for one viewport's pyramid.
pub fn msfi_fuse<T: Scalar>(pyr: &FeaturePyramid<T>, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new(Mode::Eval, 0);
    let mut feats = Vec::with_capacity(STAGES);
    for f in &pyr.levels {
        feats.push(g.input(batched(f)?)?);
    }
    let v = msfi(&mut g, store, &[feats[0], feats[1], feats[2], feats[3]])?;
    let t = g.value(v);
    t.reshape(&[t.numel()])
}

/// `ṽ = v_q ∪ GeM(F_4)`.
pub fn dsg_concat<T: Scalar>(pyr: &FeaturePyramid<T>, v_q: &Tensor<T>, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let v_g = gem_pool(&pyr.levels[STAGES - 1], rho_value(store, &gem_param_name(None))?)?;
    let mut d = v_q.data().to_vec();
    d.extend_from_slice(v_g.data());
    Ok(Tensor::from_vec(d))
}

/// Forward-only per-step scores for one sequence of descriptors (eval mode).
pub fn regress_sequence<T: Scalar>(descriptors: &[Tensor<T>], store: &ParamStore<T>, cfg: &HeadConfig) -> Result<Vec<T>> {
    if descriptors.is_empty() {
        return Err(Error::pre("regress_sequence", "empty sequence"));
    }
    let k = descriptors.len();
    let d = descriptors[0].numel();
    let rows: Vec<Tensor<T>> = descriptors.iter().map(|t| t.reshape(&[d])).collect::<Result<_>>()?;
    let mut g = Graph::new(Mode::Eval, 0);
    let v = g.input(Tensor::stack(&rows)?)?;
    let out = regress(&mut g, store, cfg, v, 1, k)?;
    Ok(g.value(out.steps).data().to_vec())
}

fn mean<T: Scalar>(op: &'static str, xs: &[T]) -> Result<T> {
    if xs.is_empty() {
        return Err(Error::pre(op, "empty list"));
    }
    Ok(xs.iter().copied().sum::<T>() / lit(xs.len() as f64))
}

/// Mean of the K viewport scores of one sequence.
pub fn aggregate_sequence<T: Scalar>(scores: &[T]) -> Result<T> {
    mean("aggregate_sequence", scores)
}

/// Mean of the M sequence scores of one image.
pub fn aggregate_image<T: Scalar>(seq_scores: &[T]) -> Result<T> {
    mean("aggregate_image", seq_scores)
}
