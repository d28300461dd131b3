//! Tensor-in, tensor-out wrappers over the graph primitives, for callers
//! that only need forward values.

use super::graph::{Graph, Mode, Var};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn eval_unary<T: Scalar>(x: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>) -> Result<Tensor<T>> {
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = g.input(x.clone())?;
    let y = f(&mut g, xv)?;
    Ok(g.value(y).clone())
}

/// Cross-correlation of an NCHW input with a `[cout, cin, kh, kw]` kernel.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new(Mode::Eval, 0);
    let (x, w, b) = (g.input(input.clone())?, g.input(kernel.clone())?, g.input(bias.clone())?);
    let y = g.conv2d(x, w, Some(b), stride, padding)?;
    Ok(g.value(y).clone())
}

pub fn depthwise_conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new(Mode::Eval, 0);
    let (x, w, b) = (g.input(input.clone())?, g.input(kernel.clone())?, g.input(bias.clone())?);
    let y = g.depthwise_conv2d(x, w, Some(b), stride, padding)?;
    Ok(g.value(y).clone())
}

/// `x W^T + b` over the last axis.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new(Mode::Eval, 0);
    let (xv, wv, bv) = (g.input(x.clone())?, g.input(w.clone())?, g.input(b.clone())?);
    let y = g.linear(xv, wv, Some(bv))?;
    Ok(g.value(y).clone())
}

/// Softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = x.clone();
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x.data()[(o * len + j) * inner + i];
            }
            let s = super::kernels::softmax_rows(&buf, len);
            for (j, v) in s.into_iter().enumerate() {
                out.data_mut()[(o * len + j) * inner + i] = v;
            }
        }
    }
    Ok(out)
}

pub fn max_pool2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    eval_unary(x, |g, v| g.max_pool2d(v))
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    eval_unary(x, |g, v| g.global_avg_pool(v))
}

/// Parameter names of one gated recurrent unit cell.
///
/// `w_*` map the input (`[hidden, input]`), `u_*` the previous state
/// (`[hidden, hidden]`); gates are update (`z`), reset (`r`) and candidate (`h`).
#[derive(Clone, Debug)]
pub struct GruCellNames {
    pub prefix: String,
}

impl GruCellNames {
    pub fn new(prefix: impl Into<String>) -> Self {
        GruCellNames { prefix: prefix.into() }
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub const PARTS: [&'static str; 9] = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"];
}

/// One step of a gated recurrent unit on the tape.
///
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
pub fn gru_cell_step<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, names: &GruCellNames, x: Var, h: Var) -> Result<Var> {
    let p = |g: &mut Graph<T>, part: &str| g.param(store, &names.name(part));
    let (w_z, u_z, b_z) = (p(g, "w_z")?, p(g, "u_z")?, p(g, "b_z")?);
    let (w_r, u_r, b_r) = (p(g, "w_r")?, p(g, "u_r")?, p(g, "b_r")?);
    let (w_h, u_h, b_h) = (p(g, "w_h")?, p(g, "u_h")?, p(g, "b_h")?);

    let zx = g.linear(x, w_z, Some(b_z))?;
    let zh = g.linear(h, u_z, None)?;
    let z_pre = g.add(zx, zh)?;
    let z = g.sigmoid(z_pre)?;

    let rx = g.linear(x, w_r, Some(b_r))?;
    let rh = g.linear(h, u_r, None)?;
    let r_pre = g.add(rx, rh)?;
    let r = g.sigmoid(r_pre)?;

    let rh_gated = g.mul(r, h)?;
    let cx = g.linear(x, w_h, Some(b_h))?;
    let ch = g.linear(rh_gated, u_h, None)?;
    let c_pre = g.add(cx, ch)?;
    let cand = g.tanh(c_pre)?;

    let keep = g.affine(z, -T::one(), T::one())?;
    let old = g.mul(keep, h)?;
    let new = g.mul(z, cand)?;
    g.add(old, new)
}

/// Forward-only GRU cell: `x` is `[B, Din]`, `h` is `[B, Dh]`.
pub fn gru_cell<T: Scalar>(x: &Tensor<T>, h: &Tensor<T>, store: &ParamStore<T>, names: &GruCellNames) -> Result<Tensor<T>> {
    if x.ndim() != 2 || h.ndim() != 2 || x.shape()[0] != h.shape()[0] {
        return Err(Error::shape("gru_cell", format!("x {:?} vs h {:?}", x.shape(), h.shape())));
    }
    let mut g = Graph::new(Mode::Eval, 0);
    let (xv, hv) = (g.input(x.clone())?, g.input(h.clone())?);
    let y = gru_cell_step(&mut g, store, names, xv, hv)?;
    Ok(g.value(y).clone())
}
