//! One test per acceptance criterion. Each writes a single PASS/FAIL line to
//! stderr (uncaptured) and runs alone so its wall time is measured cleanly.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use max360iq::backbone::{window_partition, window_unpartition, WindowLayout};
use max360iq::data::*;
use max360iq::evaluation::*;
use max360iq::gradsuite::{cases, run_case, run_suite, LOSS_TOL};
use max360iq::head::gem_pool;
use max360iq::model::ModelConfig;
use max360iq::ndgrad::Tensor;
use max360iq::objective::{norm_in_norm_loss, LossConfig};
use max360iq::sphere::*;
use max360iq::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

struct Checks(Vec<(String, bool)>);

impl Checks {
    fn new() -> Self {
        Checks(Vec::new())
    }

    fn check(&mut self, what: impl Into<String>, ok: bool) {
        self.0.push((what.into(), ok));
    }

    fn failed(&self) -> Vec<&str> {
        self.0.iter().filter(|(_, ok)| !ok).map(|(w, _)| w.as_str()).collect()
    }
}

fn finish(id: u32, title: &str, checks: Checks, detail: String, elapsed: Duration, budget: Duration) {
    let mut failed = checks.failed();
    let over = format!("took {:.1}s, budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64());
    if elapsed > budget {
        failed.push(&over);
    }
    let status = if failed.is_empty() { "PASS" } else { "FAIL" };
    let line = format!(
        "acceptance {id} {title}: {status} [{detail}; {:.1}s]{}\n",
        elapsed.as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!(" failed: {}", failed.join("; ")) }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(failed.is_empty(), "{}", line.trim_end());
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn criterion_1_gradient_suite() {
    let _g = lock();
    let t0 = Instant::now();
    let out = run_suite(20, None, None).unwrap();
    let mut checks = Checks::new();
    let (mut worst_prim, mut worst_comp) = (0.0f64, 0.0f64);
    for o in &out {
        if o.tol <= 1e-4 && !["stem", "mbconv", "descriptor"].contains(&o.name) {
            worst_prim = worst_prim.max(o.max_rel_error);
        } else {
            worst_comp = worst_comp.max(o.max_rel_error);
        }
        if !o.passed() {
            checks.check(format!("{} seed {}: {:.2e} > {:.0e}", o.name, o.seed, o.max_rel_error, o.tol), false);
        }
    }
    checks.check("model case present", out.iter().any(|o| o.name == "model"));
    let n_cases = cases().len();
    checks.check("20 seeds per case", out.len() == 20 * n_cases);
    let detail = format!("{n_cases} cases x 20 seeds, worst primitive {worst_prim:.1e}, worst composite {worst_comp:.1e}");
    finish(1, "gradient suite", checks, detail, t0.elapsed(), Duration::from_secs(120));
}

fn pearson_two_pass(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx.sqrt() * syy.sqrt())
}

fn ranks_by_counting(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let eq = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

#[test]
fn criterion_2_metric_oracles() {
    let _g = lock();
    let t0 = Instant::now();
    let mut checks = Checks::new();
    checks.check("SRCC hand case", srcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() == 0.5);
    checks.check("RMSE hand case", (rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() <= 1e-12);
    let p = plcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0]).unwrap();
    checks.check("PLCC hand case", (p - 6.5 / 43.75f64.sqrt()).abs() <= 1e-12 && (p - 0.98270).abs() < 1e-5);

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut monotone_ok) = (0.0f64, true);
    for _ in 0..100 {
        let n = rng.gen_range(3..60);
        // coarse grid so that ties occur
        let ties = rng.gen_bool(0.5);
        let draw = |rng: &mut ChaCha8Rng| if ties { rng.gen_range(0..8) as f64 } else { rng.gen_range(-5.0..5.0) };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
            continue;
        }
        let rm = (x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64).sqrt();
        worst = worst
            .max((plcc(&x, &y).unwrap() - pearson_two_pass(&x, &y)).abs())
            .max((srcc(&x, &y).unwrap() - pearson_two_pass(&ranks_by_counting(&x), &ranks_by_counting(&y))).abs())
            .max((rmse(&x, &y).unwrap() - rm).abs());
        let s = srcc(&x, &y).unwrap();
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v + 2.0 * v).collect();
        let expo: Vec<f64> = y.iter().map(|v| v.exp()).collect();
        monotone_ok &= srcc(&cubed, &y).unwrap() == s && srcc(&x, &expo).unwrap() == s;
    }
    checks.check(format!("oracle error {worst:.1e} <= 1e-12"), worst <= 1e-12);
    checks.check("SRCC exactly monotone invariant", monotone_ok);
    finish(2, "metric oracles", checks, format!("100 instances, worst deviation {worst:.1e}"), t0.elapsed(), Duration::from_secs(10));
}

#[test]
fn criterion_3_gem_properties() {
    let _g = lock();
    let t0 = Instant::now();
    let mut checks = Checks::new();
    let hand = gem_pool(&Tensor::<f64>::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), 3.0).unwrap().data()[0];
    checks.check("hand value 25^(1/3)", (hand - 25f64.cbrt()).abs() <= 1e-6 && (hand - 2.9240).abs() <= 5e-5);

    let rhos = [1.0, 1.5, 2.0, 3.0, 5.0, 8.0, 16.0, 32.0, 64.0];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut bounds, mut monotone, mut mean_ok) = (true, true, true);
    let (mut within, mut worst_gap, mut worst_n) = (0, 0.0f64, 0);
    let trials = 200;
    for _ in 0..trials {
        let n = rng.gen_range(1..=256);
        let mut xs: Vec<f64> = Vec::with_capacity(n);
        while xs.len() < n {
            let v = rng.gen_range(0.1..=1.0);
            if !xs.contains(&v) {
                xs.push(v);
            }
        }
        let f = Tensor::new(&[1, 1, n], xs.clone()).unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let max = xs.iter().cloned().fold(0.0, f64::max);
        let vals: Vec<f64> = rhos.iter().map(|&r| gem_pool(&f, r).unwrap().data()[0]).collect();
        bounds &= vals.iter().all(|&v| v >= mean * (1.0 - 1e-12) && v <= max * (1.0 + 1e-12));
        monotone &= vals.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12));
        mean_ok &= (vals[0] - mean).abs() <= 1e-12;
        let gap = 1.0 - vals[rhos.len() - 1] / max;
        if gap <= 0.05 {
            within += 1;
        }
        if gap > worst_gap {
            (worst_gap, worst_n) = (gap, n);
        }
    }
    checks.check("mean <= GeM <= max", bounds);
    checks.check("monotone in rho", monotone);
    checks.check("rho=1 equals mean", mean_ok);
    checks.check(
        format!("rho=64 within 5% of max on {within}/{trials} instances (worst {:.1}% at n={worst_n})", 100.0 * worst_gap),
        within == trials,
    );
    let detail = format!("{trials} instances, hand {hand:.6}, worst rho=64 gap {:.2}%", 100.0 * worst_gap);
    finish(3, "GeM properties", checks, detail, t0.elapsed(), Duration::from_secs(10));
}

#[test]
fn criterion_4_norm_in_norm() {
    let _g = lock();
    let t0 = Instant::now();
    let mut checks = Checks::new();
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (mut worst_affine, mut in_range) = (0.0f64, true);
    for _ in 0..200 {
        let n = rng.gen_range(2..40);
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mos: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..5.0)).collect();
        let l = norm_in_norm_loss(&pred, &mos, &cfg).unwrap();
        in_range &= (0.0..=1.0).contains(&l);
        let (a, b) = (rng.gen_range(0.01..100.0), rng.gen_range(-50.0..50.0));
        let moved: Vec<f64> = pred.iter().map(|v| a * v + b).collect();
        worst_affine = worst_affine.max((norm_in_norm_loss(&moved, &mos, &cfg).unwrap() - l).abs());
    }
    checks.check(format!("affine invariance {worst_affine:.1e} <= 1e-10"), worst_affine <= 1e-10);
    checks.check("loss in [0, 1] for p=1, q=2", in_range);
    let anti = norm_in_norm_loss(&[0.0, 1.0], &[1.0, 0.0], &cfg).unwrap();
    checks.check(format!("anti-correlated pair gives 1.0 (got {anti:?})"), anti == 1.0);
    let case = cases().into_iter().find(|c| c.name == "norm_in_norm").unwrap();
    let mut worst_grad = 0.0f64;
    for seed in 0..20 {
        worst_grad = worst_grad.max(run_case(&case, seed, None).unwrap().max_rel_error);
    }
    checks.check(format!("gradient check {worst_grad:.1e} <= 1e-5"), worst_grad <= LOSS_TOL);
    let detail = format!("affine {worst_affine:.1e}, grad {worst_grad:.1e}");
    finish(4, "Norm-in-Norm", checks, detail, t0.elapsed(), Duration::from_secs(10));
}

#[test]
fn criterion_5_geometry() {
    let _g = lock();
    let t0 = Instant::now();
    let mut checks = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let flat = ErpImage::constant(96, 48, 0.61f64).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = SphereCoord::new(rng.gen_range(-PI..PI), rng.gen_range(-FRAC_PI_2..=FRAC_PI_2)).unwrap();
        let spec = ViewportSpec::new(c, rng.gen_range(0.2..2.5), 16).unwrap();
        worst = worst.max(gnomonic_project(&flat, &spec).data().iter().map(|v| (v - 0.61).abs()).fold(0.0, f64::max));
    }
    checks.check(format!("constant image deviation {worst:.1e} <= 1e-12"), worst <= 1e-12);

    let img = ErpImage::from_fn(96, 48, |x, y, c| ((x * 7 + y * 13 + c * 29) % 97) as f64 / 96.0).unwrap();
    let mut periodic = true;
    for lon in [0.5, -1.25, 2.75, -3.0, 0.0] {
        let a = SphereCoord::new(lon, 0.4).unwrap();
        let b = SphereCoord::new(lon + TAU, 0.4).unwrap();
        let va = gnomonic_project(&img, &ViewportSpec::new(a, DEFAULT_FOV, 16).unwrap());
        let vb = gnomonic_project(&img, &ViewportSpec::new(b, DEFAULT_FOV, 16).unwrap());
        periodic &= va.data().iter().zip(vb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    checks.check("2pi longitude periodicity bit-exact", periodic);

    let s = 33;
    let vp = gnomonic_project(&img, &ViewportSpec::new(SphereCoord::new(FRAC_PI_2, 0.0).unwrap(), DEFAULT_FOV, s).unwrap());
    // lon pi/2 lands at u = 0.75 W = 72, lat 0 at v = 24
    let expect = sample_bilinear(&img, 72.0, 24.0);
    let centre_ok = (0..3).all(|c| (vp.data()[(c * s + s / 2) * s + s / 2] - expect[c]).abs() <= 1e-12);
    checks.check("centre pixel oracle", centre_ok);

    let mut round_trip = true;
    for _ in 0..40 {
        let (c, p) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let (h, w) = (p * rng.gen_range(1..5), p * rng.gen_range(1..5));
        let x = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0f64));
        for layout in [WindowLayout::Block, WindowLayout::Grid] {
            let back = window_unpartition(&window_partition(&x, layout, p).unwrap(), layout, c, h, w, p).unwrap();
            round_trip &= back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    checks.check("partition round trips bit-exact", round_trip);
    checks.check("T=300, K=7 sampling", scanpath_indices(300, 7).unwrap() == vec![0, 50, 100, 150, 199, 249, 299]);
    finish(5, "geometry", checks, format!("constant deviation {worst:.1e}"), t0.elapsed(), Duration::from_secs(30));
}

struct RunResult {
    srcc: f64,
    secs: f64,
}

/// Synthesize, split by scene, train for `steps` and score the held-out sequences.
fn scaled_run(spec: &SynthSpec, extraction: ExtractionConfig, use_gru: bool, steps: u64, seed: u64) -> RunResult {
    let t0 = Instant::now();
    let (header, entries, images) = synthesize(spec).unwrap();
    let ds = Dataset { header, entries, images };
    let (train_e, test_e) = split_train_test(&ds.entries, TRAIN_RATIO, seed).unwrap();
    let (train_d, test_d) = (ds.select(&train_e), ds.select(&test_e));
    let train_s: Vec<Sample<f32>> = build_samples(&train_d.entries, &train_d.images, &extraction).unwrap();
    let test_s: Vec<Sample<f32>> = build_samples(&test_d.entries, &test_d.images, &extraction).unwrap();
    let mut model = ModelConfig::tiny();
    model.head.use_gru = use_gru;
    let cfg = TrainConfig { lr: 1e-3, max_steps: Some(steps), epochs: usize::MAX, seed, ..TrainConfig::default() };
    let trainer = Trainer::<f32>::new(&model, &cfg, &extraction).unwrap();
    let out = train(trainer, &train_s, &[], &mut |_| Ok(())).unwrap();
    assert_eq!(out.last.step, steps);
    let pred: Vec<f64> = predict(&out.last.store, &model, &test_s, 16).unwrap().into_iter().map(f64::from).collect();
    let mos: Vec<f64> = test_s.iter().map(|s| s.mos).collect();
    RunResult { srcc: srcc(&pred, &mos).unwrap(), secs: t0.elapsed().as_secs_f64() }
}

#[test]
fn criterion_6_uniform_learning() {
    let _g = lock();
    let t0 = Instant::now();
    let mut checks = Checks::new();
    let extraction = ExtractionConfig { k: 3, size: 32, mode: ExtractionMode::Equator, ..ExtractionConfig::default() };
    let mut scores = Vec::new();
    for seed in 0..5 {
        let spec = SynthSpec { n_scenes: 40, mode: SynthMode::Uniform, seed, ..SynthSpec::default() };
        let r = scaled_run(&spec, extraction, false, 300, seed);
        checks.check(format!("seed {seed} under 10 min"), r.secs < 600.0);
        scores.push(r.srcc);
    }
    let good = scores.iter().filter(|&&s| s >= 0.80).count();
    checks.check(format!("{good}/5 seeds reach SRCC 0.80"), good >= 4);
    let detail = format!("test SRCC {}", scores.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>().join(" "));
    finish(6, "uniform learning", checks, detail, t0.elapsed(), Duration::from_secs(5 * 600));
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_7_recurrence_ablation() {
    let _g = lock();
    let t0 = Instant::now();
    let mut checks = Checks::new();
    let extraction = ExtractionConfig { k: 7, size: 32, mode: ExtractionMode::Scanpath, ..ExtractionConfig::default() };
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let spec = SynthSpec { n_scenes: 20, mode: SynthMode::Nonuniform, recency_weighting: Some(3.0), seed, ..SynthSpec::default() };
        with.push(scaled_run(&spec, extraction, true, 150, seed).srcc);
        without.push(scaled_run(&spec, extraction, false, 150, seed).srcc);
    }
    let (mw, mo) = (median(with.clone()), median(without.clone()));
    checks.check(format!("median gain {:.3} >= 0.05", mw - mo), mw - mo >= 0.05);
    let fmt = |v: &[f64]| v.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>().join(" ");
    let detail = format!("GRU {} (median {mw:.3}); no GRU {} (median {mo:.3})", fmt(&with), fmt(&without));
    finish(7, "recurrence ablation", checks, detail, t0.elapsed(), Duration::from_secs(30 * 60));
}

#[test]
fn criterion_8_logistic_fitting() {
    let _g = lock();
    let t0 = Instant::now();
    let mut checks = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_resid = 0.0f64;
    for _ in 0..20 {
        let theta = [rng.gen_range(1.0..4.0), rng.gen_range(0.5..3.0), rng.gen_range(-0.5..0.5), rng.gen_range(0.0..0.5), rng.gen_range(1.0..3.0)];
        let x: Vec<f64> = (0..60).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = x.iter().map(|&v| logistic(&theta, v)).collect();
        let fit = fit_logistic(&x, &y).unwrap();
        worst_resid = worst_resid.max(fit.mapped.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    checks.check(format!("recovery residual {worst_resid:.1e} <= 1e-6"), worst_resid <= 1e-6);

    let (mut never_worse, mut deterministic) = (true, true);
    for _ in 0..100 {
        let n = rng.gen_range(5..80);
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mos: Vec<f64> = pred.iter().map(|p| 3.0 + p.tanh() + rng.gen_range(-1.0..1.0)).collect();
        let fit = fit_logistic(&pred, &mos).unwrap();
        never_worse &= rmse(&fit.mapped, &mos).unwrap() <= rmse(&pred, &mos).unwrap();
        let again = fit_logistic(&pred, &mos).unwrap();
        deterministic &= again.theta.map(f64::to_bits) == fit.theta.map(f64::to_bits) && again.mapped == fit.mapped;
    }
    checks.check("mapped RMSE never exceeds unmapped", never_worse);
    checks.check("deterministic", deterministic);
    finish(8, "logistic fitting", checks, format!("residual {worst_resid:.1e}"), t0.elapsed(), Duration::from_secs(5));
}

#[test]
fn criterion_9_reproducibility() {
    let _g = lock();
    let t0 = Instant::now();
    let mut checks = Checks::new();
    let spec = SynthSpec { n_scenes: 4, width: 64, height: 32, mode: SynthMode::Nonuniform, recency_weighting: Some(3.0), scanpath_len: 60, seed: 9, ..SynthSpec::default() };
    let extraction = ExtractionConfig { k: 3, size: 32, mode: ExtractionMode::Scanpath, ..ExtractionConfig::default() };
    let (_, entries, images) = synthesize(&spec).unwrap();
    let samples: Vec<Sample<f32>> = build_samples(&entries, &images, &extraction).unwrap();
    let (train_s, val_s) = samples.split_at(samples.len() * 3 / 4);
    let cfg = TrainConfig { lr: 1e-3, batch_size: 8, epochs: 3, seed: 9, ..TrainConfig::default() };
    let run = || {
        let trainer = Trainer::<f32>::new(&ModelConfig::tiny(), &cfg, &extraction).unwrap();
        let mut log = String::new();
        let out = train(trainer, train_s, val_s, &mut |r| {
            log.push_str(&serde_json::to_string(r).unwrap());
            log.push('\n');
            Ok(())
        })
        .unwrap();
        (log, out.last.to_bytes().unwrap(), out.best.to_bytes().unwrap(), out.last.store)
    };
    let (log_a, last_a, best_a, store) = run();
    let (log_b, last_b, best_b, _) = run();
    checks.check("training logs identical", log_a == log_b && log_a.lines().count() == 3);
    checks.check("checkpoints identical", last_a == last_b && best_a == best_b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    std::fs::write(&path, &last_a).unwrap();
    let restored = Checkpoint::<f32>::load(&path).unwrap();
    let before = predict(&store, &ModelConfig::tiny(), &samples, 16).unwrap();
    let after = predict(&restored.store, &restored.model, &samples, 16).unwrap();
    checks.check("forward outputs bit-exact after round trip", before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    let detail = format!("{} log bytes, {} checkpoint bytes", log_a.len(), last_a.len());
    finish(9, "reproducibility", checks, detail, t0.elapsed(), Duration::from_secs(120));
}
