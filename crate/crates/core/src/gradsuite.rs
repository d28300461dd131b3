//! Finite-difference verification of every differentiable primitive and of
//! the composite modules built from them, at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{init_backbone, maxvit_block, mbconv, stem, BackboneConfig, STAGES};
use crate::error::Result;
use crate::head::{descriptor, gem_param_name, init_head, regress, HeadConfig};
use crate::model::{forward, init_model, ModelConfig};
use crate::ndgrad::ops::{gru_cell_step, GruCellNames};
use crate::ndgrad::{grad_check, GradCheckOptions, Graph, Mode, ParamKind, ParamStore, Tensor, Var};
use crate::objective::{norm_in_norm, LossConfig};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
pub const LOSS_TOL: f64 = 1e-5;
pub const SUITE_EPS: f64 = 1e-5;
/// Bound on analytic gradients of entries that vanish identically.
pub const STRUCTURAL_ZERO_TOL: f64 = 1e-8;

type Objective = Box<dyn Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>>;

/// A randomized computation ready for checking.
pub struct Built {
    pub store: ParamStore<f64>,
    pub objective: Objective,
    /// Case-specific entries with vanishing gradient, beyond [`structural_zeros`].
    pub skip: Vec<(String, std::ops::Range<usize>)>,
}

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all.
    pub max_coords: Option<usize>,
    /// Parameter tensors sampled per seed; `None` checks all.
    pub max_params: Option<usize>,
    pub build: fn(u64) -> Result<Built>,
}

#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub tol: f64,
    pub max_rel_error: f64,
    pub coords: usize,
    pub skipped_max_abs: f64,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol && self.skipped_max_abs <= STRUCTURAL_ZERO_TOL
    }
}

/// Entries whose gradient is identically zero under batch statistics:
/// biases feeding a batch norm (directly or through a bias-free 1x1 conv),
/// and the key part of a packed qkv bias, which shifts every logit of a
/// query equally and cancels in the softmax.
pub fn structural_zeros(store: &ParamStore<f64>) -> Vec<(String, std::ops::Range<usize>)> {
    store
        .iter()
        .filter_map(|(n, p)| {
            let len = p.value.numel();
            if n == "backbone.stem.conv1.bias" || n.ends_with(".mbconv.pre_norm.bias") {
                Some((n.to_string(), 0..len))
            } else if n.ends_with(".qkv.bias") {
                Some((n.to_string(), len / 3..2 * len / 3))
            } else {
                None
            }
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn store_of(items: Vec<(&str, Tensor<f64>)>) -> Result<ParamStore<f64>> {
    let mut s = ParamStore::new();
    for (n, t) in items {
        s.insert(n, t, ParamKind::Weight)?;
    }
    Ok(s)
}

/// `Σ r ⊙ y` with a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, probe: &dyn Fn(usize) -> Tensor<f64>) -> Result<Var> {
    let r = probe(g.value(y).numel()).reshape(g.shape(y))?;
    let r = g.input(r)?;
    let p = g.mul(y, r)?;
    g.sum_all(p)
}

/// Probe weights of a given length, identical on every call.
fn probe_for(seed: u64) -> impl Fn(usize) -> Tensor<f64> {
    move |n| normal(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), &[n], 1.0)
}

fn unary(seed: u64, lo: f64, hi: f64, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.gen_range(1..4), rng.gen_range(1..6)];
    let store = store_of(vec![("x", uniform(&mut rng, &shape, lo, hi))])?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let x = g.param(s, "x")?;
            let y = op(&mut g, x)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn binary(seed: u64, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.gen_range(1..4), rng.gen_range(1..6)];
    let store = store_of(vec![("a", normal(&mut rng, &shape, 1.0)), ("b", normal(&mut rng, &shape, 1.0))])?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let y = op(&mut g, a, b)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

/// Tensor `x` plus a one-element `s` bounded away from zero.
fn with_scalar(seed: u64, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.gen_range(1..4), rng.gen_range(1..6)];
    let s0 = rng.gen_range(0.5..2.0) * if rng.gen() { 1.0 } else { -1.0 };
    let store = store_of(vec![("x", normal(&mut rng, &shape, 1.0)), ("s", Tensor::new(&[1], vec![s0])?)])?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |st| {
            let mut g = Graph::new(Mode::Train, 0);
            let (x, s) = (g.param(st, "x")?, g.param(st, "s")?);
            let y = op(&mut g, x, s)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

/// NCHW input plus arbitrary extra parameters, fed to `op`.
fn spatial(seed: u64, even: bool, extra: fn(&mut ChaCha8Rng, usize) -> Vec<(&'static str, Tensor<f64>)>, op: fn(&mut Graph<f64>, &ParamStore<f64>, Var) -> Result<Var>) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..3);
    let c = rng.gen_range(1..4);
    let (h, w) = if even { (2 * rng.gen_range(1..4), 2 * rng.gen_range(1..4)) } else { (rng.gen_range(3..7), rng.gen_range(3..7)) };
    let mut items = vec![("x", normal(&mut rng, &[n, c, h, w], 1.0))];
    items.extend(extra(&mut rng, c));
    let store = store_of(items)?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let x = g.param(s, "x")?;
            let y = op(&mut g, s, x)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn no_extra(_: &mut ChaCha8Rng, _: usize) -> Vec<(&'static str, Tensor<f64>)> {
    Vec::new()
}

fn case_linear(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, din, dout) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
    let store = store_of(vec![
        ("x", normal(&mut rng, &[rows, din], 1.0)),
        ("w", normal(&mut rng, &[dout, din], 1.0)),
        ("b", normal(&mut rng, &[dout], 1.0)),
    ])?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
            let y = g.linear(x, w, Some(b))?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_conv(seed: u64, depthwise: bool) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, cin) = (rng.gen_range(1..3), rng.gen_range(1..4));
    let cout = if depthwise { cin } else { rng.gen_range(1..4) };
    let k = if rng.gen() { 3 } else { 1 };
    let stride = rng.gen_range(1..3);
    let pad = if k == 3 { rng.gen_range(0..2) } else { 0 };
    let (h, w) = (rng.gen_range(3..8), rng.gen_range(3..8));
    let wshape = if depthwise { [cin, 1, k, k] } else { [cout, cin, k, k] };
    let store = store_of(vec![
        ("x", normal(&mut rng, &[n, cin, h, w], 1.0)),
        ("w", normal(&mut rng, &wshape, 1.0)),
        ("b", normal(&mut rng, &[cout], 1.0)),
    ])?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
            let y = if depthwise { g.depthwise_conv2d(x, w, Some(b), stride, pad)? } else { g.conv2d(x, w, Some(b), stride, pad)? };
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_batch_norm(seed: u64) -> Result<Built> {
    spatial(
        seed,
        false,
        |rng, c| vec![("gamma", uniform(rng, &[c], 0.5, 1.5)), ("beta", normal(rng, &[c], 1.0))],
        |g, s, x| {
            let (gm, bt) = (g.param(s, "gamma")?, g.param(s, "beta")?);
            let c = g.shape(x)[1];
            let (rm, rv) = (Tensor::zeros(&[c]), Tensor::full(&[c], 1.0));
            Ok(g.batch_norm(x, gm, bt, (&rm, &rv))?.0)
        },
    )
}

fn case_layer_norm(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, d) = (rng.gen_range(1..4), rng.gen_range(2..7));
    let store = store_of(vec![
        ("x", normal(&mut rng, &[rows, d], 1.0)),
        ("gamma", uniform(&mut rng, &[d], 0.5, 1.5)),
        ("beta", normal(&mut rng, &[d], 1.0)),
    ])?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let (x, gm, bt) = (g.param(s, "x")?, g.param(s, "gamma")?, g.param(s, "beta")?);
            let y = g.layer_norm(x, gm, bt)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_attention(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.gen_range(1..3);
    let dim = heads * rng.gen_range(1..4);
    let (windows, tokens) = (rng.gen_range(1..3), rng.gen_range(2..5));
    let store = store_of(vec![
        ("qkv", normal(&mut rng, &[windows, tokens, 3 * dim], 1.0)),
        ("bias", normal(&mut rng, &[heads, tokens, tokens], 0.5)),
    ])?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let (q, b) = (g.param(s, "qkv")?, g.param(s, "bias")?);
            let y = g.attention(q, b, heads)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_gem(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..4));
    let store = store_of(vec![
        ("x", uniform(&mut rng, &[n, c, h, w], 0.1, 1.0)),
        ("rho", Tensor::new(&[1], vec![rng.gen_range(1.2..6.0)])?),
    ])?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let (x, r) = (g.param(s, "x")?, g.param(s, "rho")?);
            let y = g.gem(x, r)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_gather(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..10);
    let m = rng.gen_range(1..15);
    let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
    let store = store_of(vec![("x", normal(&mut rng, &[n], 1.0))])?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let x = g.param(s, "x")?;
            let y = g.gather(x, idx.clone(), &[idx.len()])?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_concat(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(1..4);
    let widths: Vec<usize> = (0..3).map(|_| rng.gen_range(1..4)).collect();
    let store = store_of(vec![
        ("a", normal(&mut rng, &[rows, widths[0]], 1.0)),
        ("b", normal(&mut rng, &[rows, widths[1]], 1.0)),
        ("c", normal(&mut rng, &[rows, widths[2]], 1.0)),
    ])?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let v = [g.param(s, "a")?, g.param(s, "b")?, g.param(s, "c")?];
            let y = g.concat(&v)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_mul_channel(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
    let store = store_of(vec![("x", normal(&mut rng, &[n, c, h, w], 1.0)), ("scale", normal(&mut rng, &[n, c], 1.0))])?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let (x, sc) = (g.param(s, "x")?, g.param(s, "scale")?);
            let y = g.mul_channel(x, sc)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_gru_cell(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, din, dh) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5));
    let names = GruCellNames::new("gru");
    let mut items: Vec<(String, Tensor<f64>)> = vec![
        ("x".into(), normal(&mut rng, &[batch, din], 1.0)),
        ("h".into(), uniform(&mut rng, &[batch, dh], -0.9, 0.9)),
    ];
    for part in GruCellNames::PARTS {
        let shape = match &part[..1] {
            "w" => vec![dh, din],
            "u" => vec![dh, dh],
            _ => vec![dh],
        };
        items.push((names.name(part), normal(&mut rng, &shape, 0.7)));
    }
    let mut store = ParamStore::new();
    for (n, t) in items {
        store.insert(n, t, ParamKind::Weight)?;
    }
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let (x, h) = (g.param(s, "x")?, g.param(s, "h")?);
            let y = gru_cell_step(&mut g, s, &names, x, h)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_loss(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..12);
    let mos: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..5.0)).collect();
    let store = store_of(vec![("pred", normal(&mut rng, &[n], 1.0))])?;
    let cfg = LossConfig::default();
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let p = g.param(s, "pred")?;
            let o = norm_in_norm(&mut g, p, &mos, &cfg)?;
            Ok((g, o))
        }),
    })
}

/// Nudges every parameter off its initialization so that no gradient is
/// structurally tiny (zero biases, unit norm scales).
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Parameters of `full` under any of `prefixes`, buffers included.
fn subset(full: &ParamStore<f64>, prefixes: &[&str]) -> Result<ParamStore<f64>> {
    let keep = |n: &str| prefixes.iter().any(|p| n.starts_with(p));
    let mut s = ParamStore::new();
    for (n, p) in full.iter().filter(|(n, _)| keep(n)) {
        s.insert(n, p.value.clone(), p.kind)?;
    }
    for (n, b) in full.buffers().filter(|(n, _)| keep(n)) {
        s.insert_buffer(n, b.clone())?;
    }
    Ok(s)
}

fn tiny_backbone(rng: &mut ChaCha8Rng) -> Result<(BackboneConfig, ParamStore<f64>)> {
    let cfg = BackboneConfig::tiny();
    let mut store = ParamStore::new();
    init_backbone(&cfg, &mut store, rng)?;
    jitter(&mut store, rng, 0.1);
    Ok((cfg, store))
}

fn case_stem(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, full) = tiny_backbone(&mut rng)?;
    let store = subset(&full, &["backbone.stem"])?;
    let x = uniform(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let xv = g.input(x.clone())?;
            let y = stem(&mut g, s, xv)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_mbconv(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, full) = tiny_backbone(&mut rng)?;
    let stage = rng.gen_range(0..STAGES);
    let prefix = format!("backbone.stages.{stage}.blocks.0.mbconv");
    let mut store = subset(&full, &[&prefix])?;
    let cin = store.value(&format!("{prefix}.pre_norm.weight"))?.numel();
    store.insert("x", normal(&mut rng, &[1, cin, 8, 8], 1.0), ParamKind::Weight)?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let xv = g.param(s, "x")?;
            let y = mbconv(&mut g, s, &prefix, xv)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

/// One multi-axis block per stage, chained as in the backbone but on a
/// small map.
fn case_blocks(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cfg, full) = tiny_backbone(&mut rng)?;
    let store = subset(&full, &["backbone.stages"])?;
    let x = normal(&mut rng, &[1, cfg.stem_channels, 4, 4], 1.0);
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let mut y = g.input(x.clone())?;
            for st in 0..STAGES {
                y = maxvit_block(&mut g, s, &cfg, &format!("backbone.stages.{st}.blocks.0"), y)?;
            }
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_descriptor(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = BackboneConfig::tiny();
    let head = HeadConfig { use_gru: false, ..HeadConfig::tiny() };
    let mut store = ParamStore::new();
    init_head(&head, &bb, &mut store, &mut rng)?;
    let mut store = subset(&store, &["head.gem", "head.fusion"])?;
    jitter(&mut store, &mut rng, 0.1);
    let n = 2;
    let names = ["f0", "f1", "f2", "f3"];
    for (i, name) in names.iter().enumerate() {
        let e = 2 + (STAGES - 1 - i);
        store.insert(*name, uniform(&mut rng, &[n, bb.stage_dims[i], e, e], 0.1, 1.0), ParamKind::Weight)?;
    }
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let f = [g.param(s, names[0])?, g.param(s, names[1])?, g.param(s, names[2])?, g.param(s, names[3])?];
            let y = descriptor(&mut g, s, &head, &f)?;
            let o = project(&mut g, y, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_regressor(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = BackboneConfig::tiny();
    let head = HeadConfig { dropout: 0.0, gru_hidden: 8, fc_hidden: 8, ..HeadConfig::tiny() };
    let mut full = ParamStore::new();
    init_head(&head, &bb, &mut full, &mut rng)?;
    let mut store = subset(&full, &["head.gru", "head.fc"])?;
    jitter(&mut store, &mut rng, 0.1);
    let (batch, k) = (2, 3);
    store.insert("v", normal(&mut rng, &[batch * k, head.descriptor_len(&bb)], 1.0), ParamKind::Weight)?;
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip: Vec::new(),
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let v = g.param(s, "v")?;
            let out = regress(&mut g, s, &head, v, batch, k)?;
            let o = project(&mut g, out.steps, &pr)?;
            Ok((g, o))
        }),
    })
}

fn case_model(seed: u64) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::tiny();
    cfg.head.dropout = 0.0;
    let mut store = init_model::<f64>(&cfg, seed)?;
    jitter(&mut store, &mut rng, 0.1);
    let (batch, k) = (1, 2);
    let x = uniform(&mut rng, &[batch * k, 3, 32, 32], 0.0, 1.0);
    // a 32 px viewport leaves a 1x1 deepest map, where GeM is the identity
    let skip = [Some(STAGES - 1), None].map(|l| (gem_param_name(l), 0..1)).to_vec();
    let pr = probe_for(seed);
    Ok(Built {
        store,
        skip,
        objective: Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let xv = g.input(x.clone())?;
            let out = forward(&mut g, s, &cfg, xv, batch, k)?;
            let o = project(&mut g, out.steps, &pr)?;
            Ok((g, o))
        }),
    })
}

macro_rules! prim {
    ($name:expr, $build:expr) => {
        GradCase { name: $name, tol: PRIMITIVE_TOL, max_coords: None, max_params: None, build: $build }
    };
}

/// Every registered case in suite order.
pub fn cases() -> Vec<GradCase> {
    vec![
        prim!("add", |s| binary(s, |g, a, b| g.add(a, b))),
        prim!("sub", |s| binary(s, |g, a, b| g.sub(a, b))),
        prim!("mul", |s| binary(s, |g, a, b| g.mul(a, b))),
        prim!("affine", |s| unary(s, -2.0, 2.0, |g, x| g.affine(x, -1.7, 0.3))),
        prim!("add_scalar", |s| with_scalar(s, |g, x, c| g.add_scalar(x, c))),
        prim!("sub_scalar", |s| with_scalar(s, |g, x, c| g.sub_scalar(x, c))),
        prim!("mul_scalar", |s| with_scalar(s, |g, x, c| g.mul_scalar(x, c))),
        prim!("div_scalar", |s| with_scalar(s, |g, x, c| g.div_scalar(x, c))),
        prim!("linear", case_linear),
        prim!("conv2d", |s| case_conv(s, false)),
        prim!("depthwise_conv2d", |s| case_conv(s, true)),
        prim!("mul_channel", case_mul_channel),
        prim!("batch_norm", case_batch_norm),
        prim!("layer_norm", case_layer_norm),
        prim!("gelu", |s| unary(s, -3.0, 3.0, |g, x| g.gelu(x))),
        prim!("sigmoid", |s| unary(s, -4.0, 4.0, |g, x| g.sigmoid(x))),
        prim!("tanh", |s| unary(s, -2.0, 2.0, |g, x| g.tanh(x))),
        prim!("relu", |s| unary(s, -2.0, 2.0, |g, x| g.relu(x))),
        prim!("softplus", |s| unary(s, -4.0, 4.0, |g, x| g.softplus(x))),
        prim!("abs", |s| unary(s, -2.0, 2.0, |g, x| g.abs(x))),
        prim!("exp", |s| unary(s, -2.0, 2.0, |g, x| g.exp(x))),
        prim!("pow_const", |s| unary(s, 0.2, 2.0, |g, x| g.pow_const(x, 2.7))),
        prim!("max_pool2d", |s| spatial(s, true, no_extra, |g, _, x| g.max_pool2d(x))),
        prim!("global_avg_pool", |s| spatial(s, false, no_extra, |g, _, x| g.global_avg_pool(x))),
        prim!("dropout", |s| unary(s, -1.0, 1.0, |g, x| g.dropout(x, 0.3))),
        prim!("gather", case_gather),
        prim!("concat", case_concat),
        prim!("softmax", |s| unary(s, -3.0, 3.0, |g, x| g.softmax(x))),
        prim!("attention", case_attention),
        prim!("gem", case_gem),
        prim!("sum_all", |s| unary(s, -2.0, 2.0, |g, x| g.sum_all(x))),
        prim!("mean_all", |s| unary(s, -2.0, 2.0, |g, x| g.mean_all(x))),
        prim!("mean_axis0", |s| unary(s, -2.0, 2.0, |g, x| g.mean_axis0(x))),
        prim!("reshape", |s| unary(s, -2.0, 2.0, |g, x| {
            let n = g.value(x).numel();
            g.reshape(x, &[n])
        })),
        prim!("gru_cell", case_gru_cell),
        GradCase { name: "norm_in_norm", tol: LOSS_TOL, max_coords: None, max_params: None, build: case_loss },
        GradCase { name: "stem", tol: PRIMITIVE_TOL, max_coords: Some(4), max_params: None, build: case_stem },
        GradCase { name: "mbconv", tol: PRIMITIVE_TOL, max_coords: Some(4), max_params: None, build: case_mbconv },
        GradCase { name: "descriptor", tol: PRIMITIVE_TOL, max_coords: Some(4), max_params: None, build: case_descriptor },
        GradCase { name: "regressor", tol: COMPOSITE_TOL, max_coords: Some(4), max_params: None, build: case_regressor },
        GradCase { name: "blocks", tol: COMPOSITE_TOL, max_coords: Some(1), max_params: Some(32), build: case_blocks },
        GradCase { name: "model", tol: COMPOSITE_TOL, max_coords: Some(1), max_params: Some(24), build: case_model },
    ]
}

pub fn run_case(case: &GradCase, seed: u64, corrupt_analytic: Option<f64>) -> Result<CaseOutcome> {
    let built = (case.build)(seed)?;
    let opts = GradCheckOptions {
        eps: SUITE_EPS,
        max_coords_per_param: case.max_coords,
        seed,
        corrupt_analytic,
        max_params: case.max_params,
        skip: structural_zeros(&built.store).into_iter().chain(built.skip.iter().cloned()).collect(),
    };
    let report = grad_check(&built.store, &opts, |s| (built.objective)(s))?;
    Ok(CaseOutcome {
        name: case.name,
        seed,
        tol: case.tol,
        max_rel_error: report.max_rel_error,
        coords: report.coords_checked,
        skipped_max_abs: report.skipped_max_abs,
    })
}

/// Runs every case (optionally only those named in `only`) for seeds `0..seeds`.
pub fn run_suite(seeds: u64, only: Option<&[&str]>, corrupt_analytic: Option<f64>) -> Result<Vec<CaseOutcome>> {
    let mut out = Vec::new();
    for case in cases().iter().filter(|c| only.map_or(true, |o| o.contains(&c.name))) {
        for seed in 0..seeds {
            out.push(run_case(case, seed, corrupt_analytic)?);
        }
    }
    Ok(out)
}

/// Worst error per case, in suite order: `(name, tol, worst)`.
pub fn summarize(outcomes: &[CaseOutcome]) -> Vec<(&'static str, f64, f64)> {
    let mut out: Vec<(&'static str, f64, f64)> = Vec::new();
    for o in outcomes {
        match out.iter_mut().find(|(n, _, _)| *n == o.name) {
            Some(e) => e.2 = e.2.max(o.max_rel_error),
            None => out.push((o.name, o.tol, o.max_rel_error)),
        }
    }
    out
}
