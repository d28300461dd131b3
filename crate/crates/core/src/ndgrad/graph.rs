//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass.
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar output with respect to every node that requires one.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self as k, AttnGeom, ChannelLayout, ConvGeom};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Gelu,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Abs,
    Exp,
}

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    AddS(Var, Var),
    MulS(Var, Var),
    DivS(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, depthwise: bool },
    MulChannel { x: Var, s: Var, inner: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, layout: ChannelLayout, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Unary { x: Var, f: Unary },
    PowConst { x: Var, p: T },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, inner: usize },
    Dropout { x: Var, mask: Vec<T> },
    Gather { x: Var, idx: Vec<usize> },
    Concat { inputs: Vec<(Var, usize)> },
    Softmax { x: Var },
    Attention { qkv: Var, bias: Var, geom: AttnGeom, probs: Vec<T> },
    Gem { x: Var, rho: Var, len: usize },
    SumAll(Var),
    MeanAll(Var),
    MeanAxis0 { x: Var, outer: usize },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording context for one forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
    params: HashMap<String, Var>,
    staged: Vec<(String, Tensor<T>)>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds every parameter gradient recorded in `graph` into `store`.
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (name, &v) in &graph.params {
            if let Some(g) = self.wrt(v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], g: Vec<T>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), g)),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: HashMap::new(),
            staged: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        value.check_finite(op_name)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked and available through [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Loads a named parameter onto the tape (once per graph).
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push("param", value, Op::Param, true)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Records a buffer update (e.g. running statistics) to apply after the step.
    pub fn stage_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.staged.push((name.into(), value));
    }

    /// Writes staged buffer updates into `store`.
    pub fn commit_buffers(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, value) in self.staged.drain(..) {
            store.set_buffer(&name, value)?;
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let d = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), d);
        let ng = self.needs(a) || self.needs(b);
        self.push("add", t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let d = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), d);
        let ng = self.needs(a) || self.needs(b);
        self.push("sub", t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let d = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), d);
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", t, Op::Mul(a, b), ng)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let t = self.value(x).map(|v| scale * v + shift);
        let ng = self.needs(x);
        self.push("affine", t, Op::Affine { x, scale }, ng)
    }

    fn scalar_of(&self, op: &'static str, s: Var) -> Result<T> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(op, format!("expected a single-element tensor, got {:?}", self.shape(s))));
        }
        Ok(self.value(s).item())
    }

    /// `x + s` with `s` a single-element node broadcast over `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("add_scalar", s)?;
        let t = self.value(x).map(|v| v + sv);
        let ng = self.needs(x) || self.needs(s);
        self.push("add_scalar", t, Op::AddS(x, s), ng)
    }

    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let neg = self.affine(s, -T::one(), T::zero())?;
        self.add_scalar(x, neg)
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("mul_scalar", s)?;
        let t = self.value(x).map(|v| v * sv);
        let ng = self.needs(x) || self.needs(s);
        self.push("mul_scalar", t, Op::MulS(x, s), ng)
    }

    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("div_scalar", s)?;
        if sv == T::zero() {
            return Err(Error::Degenerate("division by a zero scalar".into()));
        }
        let t = self.value(x).map(|v| v / sv);
        let ng = self.needs(x) || self.needs(s);
        self.push("div_scalar", t, Op::DivS(x, s), ng)
    }

    /// `y = x W^T + b` over the last axis of `x`; `W` is `[dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.ndim() != 2 || xs.last_dim() != ws.shape()[1] {
            return Err(Error::shape("linear", format!("input {:?} vs weight {:?}", xs.shape(), ws.shape())));
        }
        let (din, dout) = (ws.shape()[1], ws.shape()[0]);
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(Error::shape("linear", format!("bias {:?} vs out dim {dout}", self.shape(b))));
            }
        }
        let y = k::linear_forward(xs.data(), xs.rows(), din, ws.data(), dout, b.map(|b| self.value(b).data()));
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("linear", Tensor::from_parts(shape, y), Op::Linear { x, w, b }, ng)
    }

    fn conv_geom(&self, op: &'static str, x: Var, w: Var, stride: usize, pad: usize, depthwise: bool) -> Result<ConvGeom> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(op, format!("expected NCHW input and 4-d kernel, got {xs:?} and {ws:?}")));
        }
        let cin_k = if depthwise { 1 } else { xs[1] };
        if ws[1] != cin_k || (depthwise && ws[0] != xs[1]) {
            return Err(Error::shape(op, format!("kernel {ws:?} does not match input channels {}", xs[1])));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape(op, format!("input {xs:?} too small for kernel {ws:?} with pad {pad}, stride {stride}")));
        }
        Ok(ConvGeom { n: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: ws[0], kh: ws[2], kw: ws[3], stride, pad })
    }

    fn conv_impl(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, depthwise: bool) -> Result<Var> {
        let name = if depthwise { "depthwise_conv2d" } else { "conv2d" };
        let geom = self.conv_geom(name, x, w, stride, pad, depthwise)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(name, format!("bias {:?} vs {} output channels", self.shape(b), geom.cout)));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let y = if depthwise { k::depthwise_forward(&geom, xd, wd, bias) } else { k::conv2d_forward(&geom, xd, wd, bias) };
        let shape = vec![geom.n, geom.cout, geom.out_h(), geom.out_w()];
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(name, Tensor::from_parts(shape, y), Op::Conv { x, w, b, geom, depthwise }, ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_impl(x, w, b, stride, pad, false)
    }

    /// Per-channel convolution; kernel `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_impl(x, w, b, stride, pad, true)
    }

    /// Scales each `[n, c]` plane of `x` (NC...) by `s[n, c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if xs.len() < 2 || ss != &xs[..2] {
            return Err(Error::shape("mul_channel", format!("{xs:?} vs scale {ss:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let sd = self.value(s).data();
        let d = self.value(x).data().chunks(inner).zip(sd).flat_map(|(p, &f)| p.iter().map(move |&v| v * f)).collect();
        let t = Tensor::from_parts(xs.to_vec(), d);
        let ng = self.needs(x) || self.needs(s);
        self.push("mul_channel", t, Op::MulChannel { x, s, inner }, ng)
    }

    /// Batch normalization over N and spatial axes of an NC... tensor.
    ///
    /// In train mode the batch statistics are used and the updated running
    /// statistics are returned; in eval mode `running` is used as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor<T>, &Tensor<T>),
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm", format!("{xs:?}")));
        }
        let c = xs[1];
        for (nm, v) in [("gamma", self.shape(gamma)), ("beta", self.shape(beta)), ("running_mean", running.0.shape()), ("running_var", running.1.shape())] {
            if v != [c] {
                return Err(Error::shape("batch_norm", format!("{nm} {v:?} vs {c} channels")));
            }
        }
        let layout = ChannelLayout { n: xs[0], c, inner: xs[2..].iter().product() };
        let eps = lit::<T>(BN_EPS);
        let batch_stats = self.is_train();
        let (mean, var, update) = if batch_stats {
            if layout.count() < 2 {
                return Err(Error::pre("batch_norm", "train mode needs more than one value per channel"));
            }
            let (m, v) = k::channel_moments(self.value(x).data(), layout);
            let mom = lit::<T>(BN_MOMENTUM);
            let unbias = lit::<T>(layout.count() as f64 / (layout.count() - 1) as f64);
            let rm: Vec<T> = running.0.data().iter().zip(&m).map(|(&r, &b)| (T::one() - mom) * r + mom * b).collect();
            let rv: Vec<T> = running.1.data().iter().zip(&v).map(|(&r, &b)| (T::one() - mom) * r + mom * b * unbias).collect();
            (m, v, Some((Tensor::from_vec(rm), Tensor::from_vec(rv))))
        } else {
            (running.0.data().to_vec(), running.1.data().to_vec(), None)
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = k::channel_normalize(self.value(x).data(), layout, &mean, &inv_std, self.value(gamma).data(), self.value(beta).data());
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push("batch_norm", Tensor::from_parts(xs, y), Op::BatchNorm { x, gamma, beta, xhat, inv_std, layout, batch_stats }, ng)?;
        Ok((v, update))
    }

    /// Batch norm whose parameters live in `store` under `prefix` (`.weight`,
    /// `.bias`, buffers `.running_mean`, `.running_var`). Running-stat updates
    /// are staged on the graph.
    pub fn batch_norm_layer(&mut self, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(store, &format!("{prefix}.weight"))?;
        let beta = self.param(store, &format!("{prefix}.bias"))?;
        let (rm_name, rv_name) = (format!("{prefix}.running_mean"), format!("{prefix}.running_var"));
        let (y, update) = self.batch_norm(x, gamma, beta, (store.buffer(&rm_name)?, store.buffer(&rv_name)?))?;
        if let Some((rm, rv)) = update {
            self.stage_buffer(rm_name, rm);
            self.stage_buffer(rv_name, rv);
        }
        Ok(y)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let len = self.value(x).last_dim();
        if self.shape(gamma) != [len] || self.shape(beta) != [len] {
            return Err(Error::shape("layer_norm", format!("affine params vs last dim {len}")));
        }
        let (y, xhat, inv_std) = k::layer_norm_forward(self.value(x).data(), len, self.value(gamma).data(), self.value(beta).data(), lit(LN_EPS));
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("layer_norm", Tensor::from_parts(shape, y), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: Unary) -> Result<Var> {
        let xv = self.value(x);
        let t = match f {
            Unary::Gelu => xv.map(k::gelu),
            Unary::Sigmoid => xv.map(k::sigmoid),
            Unary::Tanh => xv.map(T::tanh),
            Unary::Relu => xv.map(|v| v.max(T::zero())),
            Unary::Softplus => xv.map(k::softplus),
            Unary::Abs => xv.map(T::abs),
            Unary::Exp => xv.map(T::exp),
        };
        let ng = self.needs(x);
        self.push(name, t, Op::Unary { x, f }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Unary::Relu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, Unary::Softplus)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, Unary::Abs)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Unary::Exp)
    }

    /// Elementwise `x^p` for a constant exponent.
    pub fn pow_const(&mut self, x: Var, p: T) -> Result<Var> {
        let t = self.value(x).map(|v| v.powf(p));
        let ng = self.needs(x);
        self.push("pow", t, Op::PowConst { x, p }, ng)
    }

    /// 2x2 max pooling with stride 2 over NCHW.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape("max_pool2d", format!("needs NCHW with even H and W, got {s:?}")));
        }
        let (y, argmax) = k::max_pool2_forward(self.value(x).data(), s[0], s[1], s[2], s[3]);
        let ng = self.needs(x);
        self.push("max_pool2d", Tensor::from_parts(vec![s[0], s[1], s[2] / 2, s[3] / 2], y), Op::MaxPool2 { x, argmax }, ng)
    }

    /// Mean over spatial axes: NC... -> NC.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let l = lit::<T>(inner as f64);
        let y = self.value(x).data().chunks(inner).map(|c| c.iter().copied().sum::<T>() / l).collect();
        let ng = self.needs(x);
        self.push("global_avg_pool", Tensor::from_parts(vec![s[0], s[1]], y), Op::GlobalAvgPool { x, inner }, ng)
    }

    /// Inverted dropout: Bernoulli keep mask scaled by `1/(1-rate)` in train
    /// mode, identity in eval mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::pre("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !self.is_train() || rate == 0.0 {
            return Ok(x);
        }
        let keep = lit::<T>(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n).map(|_| if self.rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), self.value(x).data().iter().zip(&mask).map(|(&a, &m)| a * m).collect());
        let ng = self.needs(x);
        self.push("dropout", t, Op::Dropout { x, mask }, ng)
    }

    /// `out[i] = x[idx[i]]` reshaped to `shape`; indices may repeat.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if idx.len() != shape.iter().product::<usize>() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather", format!("{} indices into {n} values for shape {shape:?}", idx.len())));
        }
        let src = self.value(x).data();
        let d = idx.iter().map(|&i| src[i]).collect();
        let ng = self.needs(x);
        self.push("gather", Tensor::from_parts(shape.to_vec(), d), Op::Gather { x, idx }, ng)
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::pre("concat", "no inputs"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", format!("{s:?} vs leading {lead:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut d = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                d.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = inputs.iter().any(|&v| self.needs(v));
        let op = Op::Concat { inputs: inputs.iter().copied().zip(widths).collect() };
        self.push("concat", Tensor::from_parts(shape, d), op, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let len = self.value(x).last_dim();
        let y = k::softmax_rows(self.value(x).data(), len);
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push("softmax", Tensor::from_parts(shape, y), Op::Softmax { x }, ng)
    }

    /// Multi-head scaled dot-product attention within each window.
    ///
    /// `qkv` is `[windows, tokens, 3C]` (queries, keys, values packed along
    /// the last axis) and `bias` is `[heads, tokens, tokens]`.
    pub fn attention(&mut self, qkv: Var, bias: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || s[2] % 3 != 0 {
            return Err(Error::shape("attention", format!("qkv {s:?}")));
        }
        let dim = s[2] / 3;
        if heads == 0 || dim % heads != 0 {
            return Err(Error::shape("attention", format!("{heads} heads do not divide width {dim}")));
        }
        if self.shape(bias) != [heads, s[1], s[1]] {
            return Err(Error::shape("attention", format!("bias {:?} vs [{heads}, {}, {}]", self.shape(bias), s[1], s[1])));
        }
        let geom = AttnGeom { windows: s[0], tokens: s[1], dim, heads };
        let (y, probs) = k::attention_forward(&geom, self.value(qkv).data(), self.value(bias).data());
        let ng = self.needs(qkv) || self.needs(bias);
        self.push("attention", Tensor::from_parts(vec![s[0], s[1], dim], y), Op::Attention { qkv, bias, geom, probs }, ng)
    }

    /// Attention probabilities `[windows, heads, tokens, tokens]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Generalized-mean pooling over spatial axes (NC... -> NC) with the
    /// exponent taken from the single-element node `rho`.
    pub fn gem(&mut self, x: Var, rho: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape("gem", format!("{s:?}")));
        }
        let r = self.scalar_of("gem", rho)?;
        if r < T::one() {
            return Err(Error::pre("gem", format!("exponent {r} below 1")));
        }
        let len: usize = s[2..].iter().product();
        let y = k::gem_forward(self.value(x).data(), len, r);
        let ng = self.needs(x) || self.needs(rho);
        self.push("gem", Tensor::from_parts(vec![s[0], s[1]], y), Op::Gem { x, rho, len }, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push("sum", t, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / lit(v.numel() as f64));
        let ng = self.needs(x);
        self.push("mean", t, Op::MeanAll(x), ng)
    }

    /// Mean over the leading axis: `[A, rest..] -> [rest..]`.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let outer = s[0];
        let inner: usize = s[1..].iter().product();
        let l = lit::<T>(outer as f64);
        let src = self.value(x).data();
        let d = (0..inner).map(|i| (0..outer).map(|o| src[o * inner + i]).sum::<T>() / l).collect();
        let shape = if s.len() > 1 { s[1..].to_vec() } else { vec![1] };
        let ng = self.needs(x);
        self.push("mean_axis0", Tensor::from_parts(shape, d), Op::MeanAxis0 { x, outer }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        self.push("reshape", t, Op::Reshape(x), ng)
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).numel() != 1 {
            return Err(Error::shape("backward", format!("output must be a scalar, got {:?}", self.shape(out))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::from_parts(self.shape(out).to_vec(), vec![T::one()]));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gt) = grads[i].take() else { continue };
            self.backward_node(node, &gt, &mut grads);
            grads[i] = Some(gt);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, gt: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gt.data();
        let val = |v: Var| self.value(v);
        let shp = |v: Var| self.shape(v).to_vec();
        let want = |v: Var| self.needs(v);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if want(*a) {
                    acc(grads, *a, &shp(*a), g.to_vec());
                }
                if want(*b) {
                    acc(grads, *b, &shp(*b), g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(grads, *a, &shp(*a), g.to_vec());
                }
                if want(*b) {
                    acc(grads, *b, &shp(*b), g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(grads, *a, &shp(*a), g.iter().zip(val(*b).data()).map(|(&d, &y)| d * y).collect());
                }
                if want(*b) {
                    acc(grads, *b, &shp(*b), g.iter().zip(val(*a).data()).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Affine { x, scale } => {
                acc(grads, *x, &shp(*x), g.iter().map(|&d| d * *scale).collect());
            }
            Op::AddS(x, s) => {
                if want(*x) {
                    acc(grads, *x, &shp(*x), g.to_vec());
                }
                if want(*s) {
                    acc(grads, *s, &shp(*s), vec![g.iter().copied().sum()]);
                }
            }
            Op::MulS(x, s) => {
                let sv = val(*s).item();
                if want(*x) {
                    acc(grads, *x, &shp(*x), g.iter().map(|&d| d * sv).collect());
                }
                if want(*s) {
                    let d = g.iter().zip(val(*x).data()).map(|(&d, &x)| d * x).sum();
                    acc(grads, *s, &shp(*s), vec![d]);
                }
            }
            Op::DivS(x, s) => {
                let sv = val(*s).item();
                if want(*x) {
                    acc(grads, *x, &shp(*x), g.iter().map(|&d| d / sv).collect());
                }
                if want(*s) {
                    let d: T = g.iter().zip(val(*x).data()).map(|(&d, &x)| d * x).sum();
                    acc(grads, *s, &shp(*s), vec![-d / (sv * sv)]);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (dout, din) = (wv.shape()[0], wv.shape()[1]);
                let (dx, dw, db) = k::linear_backward(xv.data(), xv.rows(), din, wv.data(), dout, g);
                if want(*x) {
                    acc(grads, *x, &shp(*x), dx);
                }
                if want(*w) {
                    acc(grads, *w, &shp(*w), dw);
                }
                if let Some(b) = b {
                    if want(*b) {
                        acc(grads, *b, &shp(*b), db);
                    }
                }
            }
            Op::Conv { x, w, b, geom, depthwise } => {
                let (xv, wv) = (val(*x).data(), val(*w).data());
                let (dx, dw, db) = if *depthwise {
                    k::depthwise_backward(geom, xv, wv, g)
                } else {
                    k::conv2d_backward(geom, xv, wv, g)
                };
                if want(*x) {
                    acc(grads, *x, &shp(*x), dx);
                }
                if want(*w) {
                    acc(grads, *w, &shp(*w), dw);
                }
                if let Some(b) = b {
                    if want(*b) {
                        acc(grads, *b, &shp(*b), db);
                    }
                }
            }
            Op::MulChannel { x, s, inner } => {
                let (xv, sv) = (val(*x).data(), val(*s).data());
                if want(*x) {
                    let d = g.chunks(*inner).zip(sv).flat_map(|(c, &f)| c.iter().map(move |&v| v * f)).collect();
                    acc(grads, *x, &shp(*x), d);
                }
                if want(*s) {
                    let d = g.chunks(*inner).zip(xv.chunks(*inner)).map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| p * q).sum()).collect();
                    acc(grads, *s, &shp(*s), d);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, layout, batch_stats } => {
                let (dx, dg, db) = k::batch_norm_backward(g, xhat, *layout, val(*gamma).data(), inv_std, *batch_stats);
                if want(*x) {
                    acc(grads, *x, &shp(*x), dx);
                }
                if want(*gamma) {
                    acc(grads, *gamma, &shp(*gamma), dg);
                }
                if want(*beta) {
                    acc(grads, *beta, &shp(*beta), db);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let len = val(*x).last_dim();
                let (dx, dg, db) = k::layer_norm_backward(g, xhat, inv_std, val(*gamma).data(), len);
                if want(*x) {
                    acc(grads, *x, &shp(*x), dx);
                }
                if want(*gamma) {
                    acc(grads, *gamma, &shp(*gamma), dg);
                }
                if want(*beta) {
                    acc(grads, *beta, &shp(*beta), db);
                }
            }
            Op::Unary { x, f } => {
                let xv = val(*x).data();
                let yv = node.value.data();
                let zip3 = |h: &dyn Fn(T, T) -> T| -> Vec<T> { g.iter().zip(xv.iter().zip(yv)).map(|(&d, (&x, &y))| d * h(x, y)).collect() };
                let d = match f {
                    Unary::Gelu => g.iter().zip(xv).map(|(&d, &x)| d * k::gelu_grad(x)).collect(),
                    Unary::Sigmoid => g.iter().zip(yv).map(|(&d, &y)| d * y * (T::one() - y)).collect(),
                    Unary::Tanh => g.iter().zip(yv).map(|(&d, &y)| d * (T::one() - y * y)).collect(),
                    Unary::Relu => zip3(&|x, _| if x > T::zero() { T::one() } else { T::zero() }),
                    Unary::Softplus => zip3(&|x, _| k::sigmoid(x)),
                    Unary::Abs => zip3(&|x, _| {
                        if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    }),
                    Unary::Exp => g.iter().zip(yv).map(|(&d, &y)| d * y).collect(),
                };
                acc(grads, *x, &shp(*x), d);
            }
            Op::PowConst { x, p } => {
                let d = g.iter().zip(val(*x).data()).map(|(&d, &x)| d * *p * x.powf(*p - T::one())).collect();
                acc(grads, *x, &shp(*x), d);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![T::zero(); val(*x).numel()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    d[i] += gv;
                }
                acc(grads, *x, &shp(*x), d);
            }
            Op::GlobalAvgPool { x, inner } => {
                let l = lit::<T>(*inner as f64);
                let d = g.iter().flat_map(|&v| std::iter::repeat(v / l).take(*inner)).collect();
                acc(grads, *x, &shp(*x), d);
            }
            Op::Dropout { x, mask } => {
                acc(grads, *x, &shp(*x), g.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
            Op::Gather { x, idx } => {
                let mut d = vec![T::zero(); val(*x).numel()];
                for (&i, &gv) in idx.iter().zip(g) {
                    d[i] += gv;
                }
                acc(grads, *x, &shp(*x), d);
            }
            Op::Concat { inputs } => {
                let total: usize = inputs.iter().map(|(_, w)| w).sum();
                let rows = g.len() / total;
                let mut off = 0;
                for &(v, w) in inputs {
                    if want(v) {
                        let d = (0..rows).flat_map(|r| g[r * total + off..r * total + off + w].iter().copied()).collect();
                        acc(grads, v, &shp(v), d);
                    }
                    off += w;
                }
            }
            Op::Softmax { x } => {
                let len = node.value.last_dim();
                acc(grads, *x, &shp(*x), k::softmax_rows_backward(node.value.data(), g, len));
            }
            Op::Attention { qkv, bias, geom, probs } => {
                let (dqkv, dbias) = k::attention_backward(geom, val(*qkv).data(), probs, g);
                if want(*qkv) {
                    acc(grads, *qkv, &shp(*qkv), dqkv);
                }
                if want(*bias) {
                    acc(grads, *bias, &shp(*bias), dbias);
                }
            }
            Op::Gem { x, rho, len } => {
                let r = val(*rho).item();
                let (dx, drho) = k::gem_backward(val(*x).data(), *len, r, node.value.data(), g);
                if want(*x) {
                    acc(grads, *x, &shp(*x), dx);
                }
                if want(*rho) {
                    acc(grads, *rho, &shp(*rho), vec![drho]);
                }
            }
            Op::SumAll(x) => {
                acc(grads, *x, &shp(*x), vec![g[0]; val(*x).numel()]);
            }
            Op::MeanAll(x) => {
                let n = val(*x).numel();
                acc(grads, *x, &shp(*x), vec![g[0] / lit(n as f64); n]);
            }
            Op::MeanAxis0 { x, outer } => {
                let l = lit::<T>(*outer as f64);
                let d = (0..*outer).flat_map(|_| g.iter().map(|&v| v / l)).collect();
                acc(grads, *x, &shp(*x), d);
            }
            Op::Reshape(x) => {
                acc(grads, *x, &shp(*x), g.to_vec());
            }
        }
    }
}

