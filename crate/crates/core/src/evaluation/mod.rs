//! PLCC / SRCC / RMSE with logistic remapping and per-condition breakdown.

mod logistic;

pub use logistic::{fit_logistic, identity_theta, initial_theta, logistic, LogisticFit, Theta, MAX_ITERATIONS, REL_TOL};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::ViewingCondition;

fn check_pair(op: &'static str, x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(op, format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(Error::pre(op, format!("need at least {min} pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("plcc", x, y, 3)?;
    pearson(x, y)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn has_ties(x: &[f64]) -> bool {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).any(|w| w[0] == w[1])
}

/// Spearman rank correlation: `1 − 6Σd²/(n(n²−1))` without ties, Pearson
/// correlation of average ranks otherwise.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("srcc", x, y, 3)?;
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    if has_ties(x) || has_ties(y) {
        return pearson(&rx, &ry);
    }
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("rmse", x, y, 1)?;
    Ok((x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub plcc: f64,
    pub srcc: f64,
    pub rmse: f64,
    pub theta: Theta,
    pub n: usize,
    /// Identity mapping used because the logistic could not be fitted.
    pub fit_fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_condition: Vec<ConditionReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: ViewingCondition,
    pub report: EvalReport,
}

/// Logistic fit, or identity when there are too few pairs to fit.
pub fn map_predictions(pred: &[f64], mos: &[f64]) -> Result<LogisticFit> {
    if pred.len() < 5 {
        let theta = identity_theta(pred);
        return Ok(LogisticFit { theta, mapped: pred.to_vec(), cost: f64::NAN, iterations: 0, fallback: true });
    }
    fit_logistic(pred, mos)
}

fn report(pred: &[f64], mos: &[f64]) -> Result<(EvalReport, Vec<f64>)> {
    check_pair("evaluate", pred, mos, 3)?;
    let fit = map_predictions(pred, mos)?;
    let plcc = match pearson(&fit.mapped, mos) {
        Ok(v) => v,
        // a fit that flattens the predictions carries no linear signal
        Err(Error::Degenerate(_)) if !has_constant(mos) => 0.0,
        Err(e) => return Err(e),
    };
    let r = EvalReport {
        plcc,
        srcc: srcc(pred, mos)?,
        rmse: rmse(&fit.mapped, mos)?,
        theta: fit.theta,
        n: pred.len(),
        fit_fallback: fit.fallback,
        per_condition: Vec::new(),
    };
    Ok((r, fit.mapped))
}

fn has_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Overall report plus one sub-report per condition present in `conditions`
/// whose subset can be scored.
pub fn evaluate(pred: &[f64], mos: &[f64], conditions: Option<&[ViewingCondition]>) -> Result<EvalReport> {
    Ok(evaluate_mapped(pred, mos, conditions)?.0)
}

/// Like [`evaluate`], also returning the overall mapped predictions.
pub fn evaluate_mapped(pred: &[f64], mos: &[f64], conditions: Option<&[ViewingCondition]>) -> Result<(EvalReport, Vec<f64>)> {
    let (mut overall, mapped) = report(pred, mos)?;
    if let Some(conds) = conditions {
        if conds.len() != pred.len() {
            return Err(Error::shape("evaluate", format!("{} condition labels for {} predictions", conds.len(), pred.len())));
        }
        for c in ViewingCondition::ALL {
            let idx: Vec<usize> = (0..conds.len()).filter(|&i| conds[i] == c).collect();
            if idx.is_empty() {
                continue;
            }
            let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
            let m: Vec<f64> = idx.iter().map(|&i| mos[i]).collect();
            match report(&p, &m) {
                Ok((r, _)) => overall.per_condition.push(ConditionReport { condition: c, report: r }),
                // a condition whose scores are all equal, or too few to rank, has no breakdown
                Err(Error::Degenerate(_) | Error::Precondition { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((overall, mapped))
}
