use max360iq::evaluation::*;
use max360iq::sphere::ViewingCondition;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

// rank = 1 + #smaller + (#equal - 1) / 2
fn rank_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let eq = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

#[test]
fn hand_cases() {
    assert!((plcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!((srcc(&[1.0, 2.0, 3.0, 4.0], &[10.0, 9.0, 8.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    assert!((srcc(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]).unwrap() - 0.8207826816681233).abs() < 1e-12);
    assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert!(plcc(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    assert!(srcc(&[1.0, 2.0, f64::NAN], &[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn null_correlation_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
    let y: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
    // four standard errors at n = 1000
    assert!(plcc(&x, &y).unwrap().abs() < 0.13);
    assert!(srcc(&x, &y).unwrap().abs() < 0.13);
}

#[test]
fn logistic_recovers_known_curve() {
    let theta = [3.0, 2.0, 0.5, 0.2, 2.5];
    let x: Vec<f64> = (0..80).map(|i| -2.0 + 5.0 * i as f64 / 79.0).collect();
    let y: Vec<f64> = x.iter().map(|&v| logistic(&theta, v)).collect();
    let fit = fit_logistic(&x, &y).unwrap();
    assert!(!fit.fallback);
    assert!(fit.cost < 1e-10, "cost {}", fit.cost);
    for (m, t) in fit.mapped.iter().zip(&y) {
        assert!((m - t).abs() < 1e-5);
    }
}

#[test]
fn per_condition_breakdown() {
    let conds: Vec<ViewingCondition> = (0..12).map(|i| ViewingCondition::ALL[i % 4]).collect();
    let pred: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() + i as f64 * 0.1).collect();
    let mos: Vec<f64> = (0..12).map(|i| 1.0 + i as f64 * 0.3).collect();
    let r = evaluate(&pred, &mos, Some(&conds)).unwrap();
    assert_eq!(r.n, 12);
    assert_eq!(r.per_condition.len(), 4);
    assert!(r.per_condition.iter().all(|c| c.report.n == 3 && c.report.fit_fallback));
    assert!(evaluate(&pred, &mos, Some(&conds[..5])).is_err());

    // one condition with a constant score: overall still defined, that breakdown omitted
    let flat: Vec<f64> = mos.iter().zip(&conds).map(|(&m, &c)| if c == ViewingCondition::Good5s { 5.0 } else { m }).collect();
    let r = evaluate(&pred, &flat, Some(&conds)).unwrap();
    assert_eq!(r.per_condition.iter().map(|c| c.condition).collect::<Vec<_>>(), ViewingCondition::ALL[1..].to_vec());
}

#[test]
fn small_sets_use_identity() {
    let r = evaluate(&[1.0, 2.0, 4.0], &[2.0, 3.0, 5.0], None).unwrap();
    assert!(r.fit_fallback);
    assert!((r.rmse - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn plcc_matches_oracle(xy in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40)) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        prop_assume!(x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]));
        prop_assert!((plcc(&x, &y).unwrap() - pearson_oracle(&x, &y)).abs() < 1e-9);
    }

    #[test]
    fn ranks_match_oracle(x in prop::collection::vec(0u8..6, 1..30)) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        prop_assert_eq!(average_ranks(&x), rank_oracle(&x));
    }

    #[test]
    fn srcc_is_monotone_invariant(xy in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 3..40)) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        prop_assume!(x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]));
        let s0 = srcc(&x, &y).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        prop_assert!((srcc(&tx, &y).unwrap() - s0).abs() < 1e-12);
        prop_assert!((s0 - pearson_oracle(&rank_oracle(&x), &rank_oracle(&y))).abs() < 1e-9);
    }

    #[test]
    fn mapping_never_increases_rmse(seed in 0u64..500, n in 6usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mos: Vec<f64> = pred.iter().map(|p| 3.0 + 1.5 * p.tanh() + rng.gen_range(-0.3..0.3)).collect();
        let fit = fit_logistic(&pred, &mos).unwrap();
        let start = initial_theta(&pred, &mos);
        let start_cost: f64 = pred.iter().zip(&mos).map(|(&p, &m)| (logistic(&start, p) - m).powi(2)).sum();
        prop_assert!(fit.cost <= start_cost + 1e-12);
        let mapped_rmse = rmse(&fit.mapped, &mos).unwrap();
        prop_assert!((mapped_rmse - (fit.cost / n as f64).sqrt()).abs() < 1e-9);
    }
}
