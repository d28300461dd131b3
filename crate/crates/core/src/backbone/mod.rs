//! Stem plus four stages of multi-axis attention blocks.
//!
//! Each block is MBConv → block (local window) attention → grid (dilated)
//! attention. Every stage ends with a 2x2 max-pool; the pooled maps form
//! the feature pyramid `F1..F4`.

mod partition;

pub use partition::{
    block_partition, block_unpartition, grid_partition, grid_unpartition, partition_indices,
    relative_position_indices, unpartition_indices, window_partition, window_unpartition, WindowLayout,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{he_fan_out, truncated_normal, Graph, Mode, ParamKind, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

pub const STAGES: usize = 4;
const MLP_RATIO: usize = 4;
const ATTN_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_dims: [usize; STAGES],
    pub stage_depths: [usize; STAGES],
    /// Side `P` of block windows and of the grid lattice.
    pub window: usize,
    pub heads: usize,
    pub mbconv_expansion: f64,
    pub se_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl BackboneConfig {
    /// CPU-sized configuration used throughout the tests.
    pub fn tiny() -> Self {
        BackboneConfig {
            stem_channels: 8,
            stage_dims: [8, 16, 32, 64],
            stage_depths: [1, 1, 1, 1],
            window: 2,
            heads: 2,
            mbconv_expansion: 4.0,
            se_ratio: 0.25,
        }
    }

    /// Larger configuration for 224x224 viewports (about 6M parameters).
    pub fn full() -> Self {
        BackboneConfig {
            stem_channels: 32,
            stage_dims: [32, 64, 128, 192],
            stage_depths: [2, 2, 3, 2],
            window: 7,
            heads: 4,
            mbconv_expansion: 4.0,
            se_ratio: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stem_channels == 0 || self.stage_dims.contains(&0) || self.window == 0 || self.heads == 0 {
            return bad("backbone sizes must be positive".into());
        }
        if self.stage_depths.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.stage_dims.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("stage dims {:?} must be non-decreasing", self.stage_dims));
        }
        if let Some(d) = self.stage_dims.iter().find(|&&d| d % self.heads != 0) {
            return bad(format!("{} heads do not divide stage dim {d}", self.heads));
        }
        if !(self.mbconv_expansion >= 1.0) || !(self.se_ratio > 0.0 && self.se_ratio <= 1.0) {
            return bad("mbconv_expansion must be >= 1 and se_ratio in (0, 1]".into());
        }
        Ok(())
    }

    /// Spatial extent each stage runs at for input size `s`.
    pub fn stage_extents(&self, s: usize) -> [usize; STAGES] {
        let mut e = [0; STAGES];
        let mut cur = s / 2;
        for slot in e.iter_mut() {
            *slot = cur;
            cur /= 2;
        }
        e
    }

    /// Checks that a viewport side `s` survives the stem and four halvings
    /// with every stage divisible by the window.
    pub fn check_input(&self, s: usize) -> Result<()> {
        if s % 2 != 0 {
            return Err(Error::shape("backbone", format!("viewport size {s} must be even")));
        }
        for (i, &e) in self.stage_extents(s).iter().enumerate() {
            if e == 0 || e % 2 != 0 || e % self.window != 0 {
                return Err(Error::shape(
                    "backbone",
                    format!("stage {} runs at {e}x{e}, which needs to be even and divisible by window {}", i + 1, self.window),
                ));
            }
        }
        Ok(())
    }

    fn mid_channels(&self, out: usize) -> usize {
        ((out as f64 * self.mbconv_expansion).round() as usize).max(1)
    }

    fn se_hidden(&self, out: usize) -> usize {
        ((out as f64 * self.se_ratio).floor() as usize).max(1)
    }

    /// `(name, input channels, output channels)` of every block, in order.
    fn blocks(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut cin = self.stem_channels;
        for s in 0..STAGES {
            for b in 0..self.stage_depths[s] {
                out.push((format!("backbone.stages.{s}.blocks.{b}"), cin, self.stage_dims[s]));
                cin = self.stage_dims[s];
            }
        }
        out
    }

    /// Closed-form learnable scalar count.
    pub fn parameter_count(&self) -> usize {
        let st = self.stem_channels;
        let mut n = st * 3 * 9 + st + 2 * st + st * st * 9 + st;
        let span = (2 * self.window - 1).pow(2);
        for (_, cin, cout) in self.blocks() {
            let mid = self.mid_channels(cout);
            let se = self.se_hidden(cout);
            n += 2 * cin; // pre-norm
            n += cin * mid + 2 * mid; // expand + bn
            n += mid * 9 + 2 * mid; // depthwise + bn
            n += mid * se + se + se * mid + mid; // squeeze-excite
            n += mid * cout + cout; // project
            if cin != cout {
                n += cin * cout + cout;
            }
            let attn = 2 * cout + (3 * cout * cout + 3 * cout) + self.heads * span + (cout * cout + cout) + 2 * cout
                + (cout * MLP_RATIO * cout + MLP_RATIO * cout) + (MLP_RATIO * cout * cout + cout);
            n += 2 * attn;
        }
        n
    }
}

fn add_conv<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cout: usize, cin: usize, k: usize, groups: usize, bias: bool, rng: &mut R) -> Result<()> {
    store.insert(format!("{name}.weight"), he_fan_out(&[cout, cin / groups, k, k], groups, rng), ParamKind::Weight)?;
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Bias)?;
    }
    Ok(())
}

fn add_bn<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<()> {
    store.insert(format!("{name}.weight"), Tensor::full(&[c], T::one()), ParamKind::Norm)?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[c]), ParamKind::Norm)?;
    store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]))?;
    store.insert_buffer(format!("{name}.running_var"), Tensor::full(&[c], T::one()))
}

pub(crate) fn add_linear<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dout: usize, din: usize, rng: &mut R) -> Result<()> {
    store.insert(format!("{name}.weight"), truncated_normal(&[dout, din], ATTN_INIT_STD, rng), ParamKind::Weight)?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]), ParamKind::Bias)
}

fn add_ln<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<()> {
    store.insert(format!("{name}.weight"), Tensor::full(&[c], T::one()), ParamKind::Norm)?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[c]), ParamKind::Norm)
}

/// Registers every backbone parameter and buffer in `store`.
pub fn init_backbone<T: Scalar, R: Rng>(cfg: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let st = cfg.stem_channels;
    add_conv(store, "backbone.stem.conv1", st, 3, 3, 1, true, rng)?;
    add_bn(store, "backbone.stem.bn1", st)?;
    add_conv(store, "backbone.stem.conv2", st, st, 3, 1, true, rng)?;
    let span = (2 * cfg.window - 1).pow(2);
    for (name, cin, cout) in cfg.blocks() {
        let mid = cfg.mid_channels(cout);
        let se = cfg.se_hidden(cout);
        let mb = format!("{name}.mbconv");
        add_bn(store, &format!("{mb}.pre_norm"), cin)?;
        add_conv(store, &format!("{mb}.expand"), mid, cin, 1, 1, false, rng)?;
        add_bn(store, &format!("{mb}.bn1"), mid)?;
        add_conv(store, &format!("{mb}.depthwise"), mid, mid, 3, mid, false, rng)?;
        add_bn(store, &format!("{mb}.bn2"), mid)?;
        add_linear(store, &format!("{mb}.se.reduce"), se, mid, rng)?;
        add_linear(store, &format!("{mb}.se.expand"), mid, se, rng)?;
        add_conv(store, &format!("{mb}.project"), cout, mid, 1, 1, true, rng)?;
        if cin != cout {
            add_conv(store, &format!("{mb}.shortcut"), cout, cin, 1, 1, true, rng)?;
        }
        for layout in [WindowLayout::Block, WindowLayout::Grid] {
            let a = format!("{name}.{}_attn", layout.as_str());
            add_ln(store, &format!("{a}.norm1"), cout)?;
            add_linear(store, &format!("{a}.qkv"), 3 * cout, cout, rng)?;
            store.insert(format!("{a}.rel_pos_bias"), Tensor::zeros(&[cfg.heads, span]), ParamKind::PositionBias)?;
            add_linear(store, &format!("{a}.proj"), cout, cout, rng)?;
            add_ln(store, &format!("{a}.norm2"), cout)?;
            add_linear(store, &format!("{a}.mlp.fc1"), MLP_RATIO * cout, cout, rng)?;
            add_linear(store, &format!("{a}.mlp.fc2"), cout, MLP_RATIO * cout, rng)?;
        }
    }
    Ok(())
}

fn conv<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b_name = format!("{name}.bias");
    let b = if store.contains(&b_name) { Some(g.param(store, &b_name)?) } else { None };
    g.conv2d(x, w, b, stride, pad)
}

fn lin<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    g.linear(x, w, Some(b))
}

fn ln<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    g.layer_norm(x, w, b)
}

/// Stem on the tape: conv3x3/2 → BN → GELU → conv3x3/1. Halves H and W.
pub fn stem<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::shape("stem", format!("expected N x 3 x S x S with even S, got {s:?}")));
    }
    let y = conv(g, store, "backbone.stem.conv1", x, 2, 1)?;
    let y = g.batch_norm_layer(store, "backbone.stem.bn1", y)?;
    let y = g.gelu(y)?;
    conv(g, store, "backbone.stem.conv2", y, 1, 1)
}

/// Inverted residual: BN → 1x1 expand → BN → GELU → depthwise 3x3 → BN →
/// GELU → squeeze-excite → 1x1 project, plus (projected) shortcut.
pub fn mbconv<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let y = g.batch_norm_layer(store, &format!("{prefix}.pre_norm"), x)?;
    let y = conv(g, store, &format!("{prefix}.expand"), y, 1, 0)?;
    let y = g.batch_norm_layer(store, &format!("{prefix}.bn1"), y)?;
    let y = g.gelu(y)?;
    let dw = g.param(store, &format!("{prefix}.depthwise.weight"))?;
    let y = g.depthwise_conv2d(y, dw, None, 1, 1)?;
    let y = g.batch_norm_layer(store, &format!("{prefix}.bn2"), y)?;
    let y = g.gelu(y)?;
    let y = squeeze_excite(g, store, &format!("{prefix}.se"), y)?;
    let y = conv(g, store, &format!("{prefix}.project"), y, 1, 0)?;
    let short_name = format!("{prefix}.shortcut");
    let shortcut = if store.contains(&format!("{short_name}.weight")) { conv(g, store, &short_name, x, 1, 0)? } else { x };
    g.add(y, shortcut)
}

/// Channel gating: global average → FC → GELU → FC → sigmoid → scale.
pub fn squeeze_excite<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let s = g.global_avg_pool(x)?;
    let s = lin(g, store, &format!("{prefix}.reduce"), s)?;
    let s = g.gelu(s)?;
    let s = lin(g, store, &format!("{prefix}.expand"), s)?;
    let s = g.sigmoid(s)?;
    g.mul_channel(x, s)
}

/// Pre-norm attention unit over `[windows, P*P, C]` tokens: multi-head
/// self-attention with relative-position bias and a GELU MLP, each with a
/// residual connection.
pub fn window_attention<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, tokens: Var, window: usize, heads: usize) -> Result<Var> {
    let t = g.shape(tokens)[1];
    if t != window * window {
        return Err(Error::shape("window_attention", format!("{t} tokens per window, expected {}", window * window)));
    }
    let a = ln(g, store, &format!("{prefix}.norm1"), tokens)?;
    let qkv = lin(g, store, &format!("{prefix}.qkv"), a)?;
    let table = g.param(store, &format!("{prefix}.rel_pos_bias"))?;
    let bias = g.gather(table, relative_position_indices(window, heads), &[heads, t, t])?;
    let o = g.attention(qkv, bias, heads)?;
    let o = lin(g, store, &format!("{prefix}.proj"), o)?;
    let x = g.add(tokens, o)?;
    let m = ln(g, store, &format!("{prefix}.norm2"), x)?;
    let m = lin(g, store, &format!("{prefix}.mlp.fc1"), m)?;
    let m = g.gelu(m)?;
    let m = lin(g, store, &format!("{prefix}.mlp.fc2"), m)?;
    g.add(x, m)
}

/// Partition an NCHW map, run one attention unit, and restore the layout.
pub fn attention_unit<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var, layout: WindowLayout, window: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let fwd = partition_indices(layout, n, c, h, w, window)?;
    let inv = unpartition_indices(layout, n, c, h, w, window)?;
    let tokens = g.gather(x, fwd, &[n * (h / window) * (w / window), window * window, c])?;
    let y = window_attention(g, store, prefix, tokens, window, heads)?;
    g.gather(y, inv, &[n, c, h, w])
}

/// One multi-axis block: MBConv → block attention → grid attention.
pub fn maxvit_block<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &BackboneConfig, prefix: &str, x: Var) -> Result<Var> {
    let y = mbconv(g, store, &format!("{prefix}.mbconv"), x)?;
    let y = attention_unit(g, store, &format!("{prefix}.block_attn"), y, WindowLayout::Block, cfg.window, cfg.heads)?;
    attention_unit(g, store, &format!("{prefix}.grid_attn"), y, WindowLayout::Grid, cfg.window, cfg.heads)
}

/// Backbone on the tape for a batch `[N, 3, S, S]`; returns `F1..F4`.
pub fn backbone<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &BackboneConfig, x: Var) -> Result<[Var; STAGES]> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::shape("backbone", format!("expected square N x 3 x S x S, got {s:?}")));
    }
    cfg.check_input(s[2])?;
    let mut y = stem(g, store, x)?;
    let mut feats = Vec::with_capacity(STAGES);
    for st in 0..STAGES {
        for b in 0..cfg.stage_depths[st] {
            y = maxvit_block(g, store, cfg, &format!("backbone.stages.{st}.blocks.{b}"), y)?;
        }
        y = g.max_pool2d(y)?;
        feats.push(y);
    }
    Ok([feats[0], feats[1], feats[2], feats[3]])
}

/// Stage outputs `F1..F4` of one viewport, each `C_i x H_i x W_i`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    pub levels: [Tensor<T>; STAGES],
}

/// Eval-mode backbone on a single `3 x S x S` viewport.
pub fn backbone_forward<T: Scalar>(vp: &Tensor<T>, store: &ParamStore<T>, cfg: &BackboneConfig) -> Result<FeaturePyramid<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(vp.shape());
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.input(vp.reshape(&shape)?)?;
    let f = backbone(&mut g, store, cfg, x)?;
    let take = |v: Var| -> Result<Tensor<T>> {
        let t = g.value(v);
        t.reshape(&t.shape()[1..])
    };
    Ok(FeaturePyramid { levels: [take(f[0])?, take(f[1])?, take(f[2])?, take(f[3])?] })
}

/// Eval-mode stem on a single `3 x S x S` viewport.
pub fn stem_forward<T: Scalar>(vp: &Tensor<T>, store: &ParamStore<T>) -> Result<Tensor<T>> {
    if vp.ndim() != 3 {
        return Err(Error::shape("stem", format!("expected 3 x S x S, got {:?}", vp.shape())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(vp.shape());
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.input(vp.reshape(&shape)?)?;
    let y = stem(&mut g, store, x)?;
    let t = g.value(y);
    t.reshape(&t.shape()[1..])
}
