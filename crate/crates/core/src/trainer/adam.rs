use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::ndgrad::{ParamStore, Tensor};
use crate::scalar::{lit, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape()))).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        let c = |m: &IndexMap<String, Tensor<T>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        AdamState { m: c(&self.m), v: c(&self.v), t: self.t }
    }
}

/// Adam with bias correction and decoupled weight decay `θ ← θ − lr·wd·θ`
/// on decaying (weight-matrix) parameters only. Reads `grad` from `store`.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, weight_decay: f64) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let (b1, b2, eps) = (lit::<T>(BETA1), lit::<T>(BETA2), lit::<T>(ADAM_EPS));
    let (one, step, decay) = (T::one(), lit::<T>(lr / bc1), lit::<T>(lr * weight_decay));
    let inv_bc2 = lit::<T>(1.0 / bc2);
    for (name, p) in store.iter_mut() {
        let (m, v) = match (state.m.get_mut(name), state.v.get_mut(name)) {
            (Some(m), Some(v)) if m.shape() == p.value.shape() && v.shape() == p.value.shape() => (m, v),
            _ => return Err(Error::shape("adam_step", format!("optimizer state does not match parameter `{name}`"))),
        };
        let decays = p.kind.decays() && weight_decay != 0.0;
        let (vals, grads) = (p.value.data_mut(), p.grad.data());
        for i in 0..vals.len() {
            let g = grads[i];
            let mi = b1 * m.data()[i] + (one - b1) * g;
            let vi = b2 * v.data()[i] + (one - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            if decays {
                vals[i] -= decay * vals[i];
            }
            vals[i] -= step * mi / ((vi * inv_bc2).sqrt() + eps);
        }
        p.value.check_finite("adam_step")?;
    }
    Ok(())
}
