//! Five-parameter logistic mapping `f(x) = θ1(½ − 1/(1 + e^{θ2(x−θ3)})) + θ4·x + θ5`
//! fitted by Levenberg–Marquardt.

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 500;
pub const REL_TOL: f64 = 1e-10;
const LAMBDA0: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e16;

pub type Theta = [f64; 5];

/// Mapping with `θ1 = 0, θ4 = 1, θ5 = 0`.
pub fn identity_theta(x: &[f64]) -> Theta {
    let (lo, hi) = min_max(x);
    let span = hi - lo;
    let t2 = if span > 0.0 { 4.0 / span } else { 1.0 };
    [0.0, t2, mean(x), 1.0, 0.0]
}

pub fn logistic(theta: &Theta, x: f64) -> f64 {
    let z = theta[1] * (x - theta[2]);
    theta[0] * (sigmoid(z) - 0.5) + theta[3] * x + theta[4]
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn min_max(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    pub theta: Theta,
    pub mapped: Vec<f64>,
    /// Sum of squared residuals at `theta`.
    pub cost: f64,
    pub iterations: usize,
    /// Set when the normal equations could not be solved and the identity
    /// mapping was returned instead.
    pub fallback: bool,
}

fn cost(theta: &Theta, x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(&xi, &yi)| (logistic(theta, xi) - yi).powi(2)).sum()
}

/// Cholesky solve of a symmetric positive-definite 5x5 system.
fn solve_spd(a: &[[f64; 5]; 5], b: &[f64; 5]) -> Option<[f64; 5]> {
    let mut l = [[0.0; 5]; 5];
    for i in 0..5 {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut z = [0.0; 5];
    for i in 0..5 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * z[k];
        }
        z[i] = s / l[i][i];
    }
    let mut x = [0.0; 5];
    for i in (0..5).rev() {
        let mut s = z[i];
        for k in i + 1..5 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

struct Run {
    theta: Theta,
    cost: f64,
    iterations: usize,
    solved_any: bool,
}

/// Damped Gauss-Newton from `theta`; only cost-decreasing steps are taken.
fn levenberg_marquardt(mut theta: Theta, x: &[f64], y: &[f64]) -> Run {
    let mut c = cost(&theta, x, y);
    let mut lambda = LAMBDA0;
    let mut solved_any = false;
    let mut it = 0;
    while it < MAX_ITERATIONS && c > 0.0 {
        it += 1;
        let mut jtj = [[0.0; 5]; 5];
        let mut jtr = [0.0; 5];
        for (&xi, &yi) in x.iter().zip(y) {
            let z = theta[1] * (xi - theta[2]);
            let s = sigmoid(z);
            let dz = theta[0] * s * (1.0 - s);
            let j = [s - 0.5, dz * (xi - theta[2]), -dz * theta[1], xi, 1.0];
            let r = logistic(&theta, xi) - yi;
            for a in 0..5 {
                jtr[a] += j[a] * r;
                for b in 0..=a {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        for a in 0..5 {
            for b in 0..a {
                jtj[b][a] = jtj[a][b];
            }
        }
        let scale = (0..5).map(|i| jtj[i][i]).fold(0.0, f64::max).max(1e-300);
        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let mut a = jtj;
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += lambda * (row[i] + 1e-12 * scale);
            }
            let neg: [f64; 5] = jtr.map(|v| -v);
            if let Some(step) = solve_spd(&a, &neg) {
                solved_any = true;
                let cand: Theta = std::array::from_fn(|i| theta[i] + step[i]);
                let cc = cost(&cand, x, y);
                if cc.is_finite() && cc < c {
                    let rel = (c - cc) / c;
                    theta = cand;
                    c = cc;
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    if rel < REL_TOL {
                        return Run { theta, cost: c, iterations: it, solved_any };
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Run { theta, cost: c, iterations: it, solved_any }
}

/// Heuristic starting point: amplitude and centre from the data.
pub fn initial_theta(pred: &[f64], mos: &[f64]) -> Theta {
    let (plo, phi) = min_max(pred);
    let (mlo, mhi) = min_max(mos);
    let span = phi - plo;
    let t2 = if span > f64::EPSILON * phi.abs().max(1.0) { 4.0 / span } else { 1.0 };
    [mhi - mlo, t2, mean(pred), 0.0, mean(mos)]
}

/// Fits the logistic from the heuristic start and from the identity map and
/// keeps the lower residual.
pub fn fit_logistic(pred: &[f64], mos: &[f64]) -> Result<LogisticFit> {
    if pred.len() != mos.len() {
        return Err(Error::shape("fit_logistic", format!("{} predictions vs {} scores", pred.len(), mos.len())));
    }
    if pred.len() < 5 {
        return Err(Error::pre("fit_logistic", format!("need at least 5 pairs, got {}", pred.len())));
    }
    if pred.iter().chain(mos).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "fit_logistic" });
    }
    let (lo, hi) = min_max(pred);
    if lo == hi {
        return Err(Error::Degenerate("predictions are constant".into()));
    }
    let runs = [levenberg_marquardt(initial_theta(pred, mos), pred, mos), levenberg_marquardt(identity_theta(pred), pred, mos)];
    let iterations = runs.iter().map(|r| r.iterations).sum();
    if !runs.iter().any(|r| r.solved_any) {
        log::warn!("logistic fit: normal equations singular, using identity mapping");
        let theta = identity_theta(pred);
        return Ok(LogisticFit { theta, mapped: pred.to_vec(), cost: cost(&theta, pred, mos), iterations, fallback: true });
    }
    let best = if runs[1].cost < runs[0].cost { &runs[1] } else { &runs[0] };
    let mapped = pred.iter().map(|&x| logistic(&best.theta, x)).collect();
    Ok(LogisticFit { theta: best.theta, mapped, cost: best.cost, iterations, fallback: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_data_fits_exactly() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() * 2.0 + 3.0).collect();
        let fit = fit_logistic(&x, &x).unwrap();
        assert!(fit.cost.sqrt() <= 1e-8);
        assert!(!fit.fallback);
    }

    #[test]
    fn recovers_known_parameters() {
        let truth = [3.0, 2.5, 0.4, 0.3, 1.0];
        let x: Vec<f64> = (0..60).map(|i| ((i * 37 % 60) as f64) / 20.0 - 1.0).collect();
        let y: Vec<f64> = x.iter().map(|&v| logistic(&truth, v)).collect();
        let fit = fit_logistic(&x, &y).unwrap();
        let worst = fit.mapped.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "{worst} {:?}", fit.theta);
    }

    #[test]
    fn spd_solver() {
        let mut a = [[0.0; 5]; 5];
        for (i, row) in a.iter_mut().enumerate() {
            row[i] = (i + 1) as f64;
        }
        let x = solve_spd(&a, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(x.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}
