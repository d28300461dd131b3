use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-7, 1e-4]`.
    pub eps: f64,
    /// Check at most this many coordinates per parameter tensor (sampled
    /// deterministically); `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Test hook: multiplies analytic gradients before comparison.
    pub corrupt_analytic: Option<f64>,
    /// Check at most this many parameter tensors (sampled deterministically).
    pub max_params: Option<usize>,
    /// Entries excluded from the comparison because their gradient vanishes
    /// identically (e.g. a bias feeding a batch-statistics normalization).
    /// Their analytic gradients are reported in `skipped_max_abs`.
    pub skip: Vec<(String, Range<usize>)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-6, max_coords_per_param: None, seed: 0, corrupt_analytic: None, max_params: None, skip: Vec::new() }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
    /// Largest `|analytic|` among skipped entries.
    pub skipped_max_abs: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar computation against central
/// differences for every parameter in `store`.
///
/// `f` must build the computation deterministically from the store it is
/// given and return the graph together with its scalar output.
pub fn grad_check<F>(store: &ParamStore<f64>, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    if !(1e-7..=1e-4).contains(&opts.eps) {
        return Err(Error::pre("grad_check", format!("eps {} outside [1e-7, 1e-4]", opts.eps)));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let (g, out) = f(s)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check objective" });
        }
        Ok(v)
    };

    let (graph, out) = f(store)?;
    let grads = graph.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    grads.accumulate_into(&graph, &mut analytic)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut per_param = Vec::new();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut skipped_max_abs = 0.0f64;
    for (name, r) in &opts.skip {
        let g = analytic.get(name)?.grad.data();
        if r.end > g.len() {
            return Err(Error::pre("grad_check", format!("skip range {r:?} outside `{name}`")));
        }
        skipped_max_abs = g[r.clone()].iter().fold(skipped_max_abs, |m, v| m.max(v.abs()));
    }
    let skipped = |name: &str, i: usize| opts.skip.iter().any(|(n, r)| n == name && r.contains(&i));
    let mut names: Vec<String> = store.names().map(str::to_string).collect();
    if let Some(m) = opts.max_params.filter(|&m| m < names.len()) {
        let mut keep = sample(&mut rng, names.len(), m).into_vec();
        keep.sort_unstable();
        names = keep.into_iter().map(|i| names[i].clone()).collect();
    }
    for name in names {
        let candidates: Vec<usize> = (0..store.value(&name)?.numel()).filter(|&i| !skipped(&name, i)).collect();
        let n = candidates.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => {
                let mut c: Vec<usize> = sample(&mut rng, n, m).into_iter().map(|i| candidates[i]).collect();
                c.sort_unstable();
                c
            }
            _ => candidates,
        };
        let mut local = 0.0f64;
        for i in coords {
            let orig = work.value(&name)?.data()[i];
            work.get_mut(&name)?.value.data_mut()[i] = orig + opts.eps;
            let fp = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig - opts.eps;
            let fm = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let mut a = analytic.get(&name)?.grad.data()[i];
            if let Some(k) = opts.corrupt_analytic {
                a *= k;
            }
            local = local.max(relative_error(a, numeric));
            checked += 1;
        }
        worst = worst.max(local);
        per_param.push((name, local));
    }
    Ok(GradCheckReport { max_rel_error: worst, per_param, coords_checked: checked, skipped_max_abs })
}
