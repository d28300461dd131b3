//! Norm-in-Norm regression loss plus plain MAE/MSE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Tensor, Var};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    NormInNorm,
    Mae,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub p: f64,
    pub q: f64,
    pub sigma_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { p: 1.0, q: 2.0, sigma_floor: 1e-12 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0 && self.q >= 1.0) || !self.p.is_finite() || !self.q.is_finite() {
            return Err(Error::Config(format!("loss exponents p={} q={} must be finite and >= 1", self.p, self.q)));
        }
        if !(self.sigma_floor >= 0.0) {
            return Err(Error::Config("sigma_floor must be non-negative".into()));
        }
        Ok(())
    }

    /// `ε = 2^p · N^(1 − p/q)`.
    pub fn epsilon(&self, n: usize) -> f64 {
        2f64.powf(self.p) * (n as f64).powf(1.0 - self.p / self.q)
    }
}

/// Centred, q-norm-scaled scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub mean: f64,
    pub sigma: f64,
}

pub fn normalize_scores(s: &[f64], q: f64, sigma_floor: f64) -> Result<Normalized> {
    if s.len() < 2 {
        return Err(Error::pre("normalize_scores", format!("need at least 2 scores, got {}", s.len())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "normalize_scores" });
    }
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let total = s.iter().map(|v| (v - mean).abs().powf(q)).sum::<f64>();
    let sigma = total.powf(1.0 / q);
    if !(sigma > sigma_floor) {
        return Err(Error::Degenerate(format!("scores are constant (norm {sigma:e} <= {sigma_floor:e})")));
    }
    // scale by total^(-1/q) rather than dividing by sigma, matching the graph
    let inv = total.powf(-1.0 / q);
    Ok(Normalized { values: s.iter().map(|v| (v - mean) * inv).collect(), mean, sigma })
}

fn check_pair<T>(op: &'static str, n_pred: usize, mos: &[T]) -> Result<()> {
    if n_pred != mos.len() {
        return Err(Error::shape(op, format!("{n_pred} predictions vs {} targets", mos.len())));
    }
    if n_pred < 2 {
        return Err(Error::pre(op, format!("need at least 2 pairs, got {n_pred}")));
    }
    Ok(())
}

/// Norm-in-Norm loss of the prediction node `pred` (`[N]`) against `mos`.
pub fn norm_in_norm<T: Scalar>(g: &mut Graph<T>, pred: Var, mos: &[T], cfg: &LossConfig) -> Result<Var> {
    let n = g.value(pred).numel();
    check_pair("norm_in_norm", n, mos)?;
    let target: Vec<f64> = mos.iter().map(|v| v.to_f64_lossy()).collect();
    let target = normalize_scores(&target, cfg.q, cfg.sigma_floor)?;

    let pred = g.reshape(pred, &[n])?;
    let mu = g.mean_all(pred)?;
    let centred = g.sub_scalar(pred, mu)?;
    let a = g.abs(centred)?;
    let a = g.pow_const(a, lit(cfg.q))?;
    let s = g.sum_all(a)?;
    let sv = g.value(s).item().to_f64_lossy().powf(1.0 / cfg.q);
    if !(sv > cfg.sigma_floor) {
        return Err(Error::Degenerate(format!("predictions are constant (norm {sv:e} <= {:e})", cfg.sigma_floor)));
    }
    let inv = g.pow_const(s, lit(-1.0 / cfg.q))?;
    let normed = g.mul_scalar(centred, inv)?;
    let t = g.input(Tensor::new(&[n], target.values.iter().map(|&v| lit(v)).collect())?)?;
    let d = g.sub(normed, t)?;
    let d = g.abs(d)?;
    let d = g.pow_const(d, lit(cfg.p))?;
    let total = g.sum_all(d)?;
    let eps = g.input(Tensor::new(&[1], vec![lit(cfg.epsilon(n))])?)?;
    g.div_scalar(total, eps)
}

fn residual<T: Scalar>(g: &mut Graph<T>, op: &'static str, pred: Var, mos: &[T]) -> Result<Var> {
    let n = g.value(pred).numel();
    check_pair(op, n, mos)?;
    let pred = g.reshape(pred, &[n])?;
    let t = g.input(Tensor::new(&[n], mos.to_vec())?)?;
    g.sub(pred, t)
}

pub fn mae<T: Scalar>(g: &mut Graph<T>, pred: Var, mos: &[T]) -> Result<Var> {
    let d = residual(g, "mae", pred, mos)?;
    let d = g.abs(d)?;
    g.mean_all(d)
}

pub fn mse<T: Scalar>(g: &mut Graph<T>, pred: Var, mos: &[T]) -> Result<Var> {
    let d = residual(g, "mse", pred, mos)?;
    let d = g.pow_const(d, lit(2.0))?;
    g.mean_all(d)
}

pub fn loss<T: Scalar>(g: &mut Graph<T>, kind: LossKind, cfg: &LossConfig, pred: Var, mos: &[T]) -> Result<Var> {
    match kind {
        LossKind::NormInNorm => norm_in_norm(g, pred, mos, cfg),
        LossKind::Mae => mae(g, pred, mos),
        LossKind::Mse => mse(g, pred, mos),
    }
}

/// Loss value for plain vectors.
pub fn norm_in_norm_loss(pred: &[f64], mos: &[f64], cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::<f64>::new(crate::ndgrad::Mode::Eval, 0);
    let p = g.input(Tensor::new(&[pred.len()], pred.to_vec())?)?;
    let l = norm_in_norm(&mut g, p, mos, cfg)?;
    Ok(g.value(l).item())
}
