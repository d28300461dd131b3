use max360iq::gradsuite::{cases, run_case, run_suite, summarize};
use max360iq::ndgrad::ops::{conv2d, depthwise_conv2d, gru_cell, linear, softmax, GruCellNames};
use max360iq::ndgrad::{grad_check, GradCheckOptions, Graph, Mode, ParamKind, ParamStore, Tensor};
use max360iq::objective::{norm_in_norm, LossConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * cin + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let y = conv2d(&x, &w, &b, stride, pad).unwrap();
        close(y.data(), &conv_oracle(&x, &w, b.data(), stride, pad), 1e-12);
    }
}

#[test]
fn depthwise_matches_per_channel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 3, 6, 5]);
    let w = rand_tensor(&mut rng, &[3, 1, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let y = depthwise_conv2d(&x, &w, &b, 1, 1).unwrap();
    // block-diagonal full kernel reproduces the grouped convolution
    let mut full = Tensor::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        for k in 0..9 {
            full.data_mut()[(c * 3 + c) * 9 + k] = w.data()[c * 9 + k];
        }
    }
    close(y.data(), &conv_oracle(&x, &full, b.data(), 1, 1), 1e-12);
}

#[test]
fn linear_hand_case() {
    let x = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
    let w = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 1.0, 2.0, 0.0]).unwrap();
    let b = Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap();
    assert_eq!(linear(&x, &w, &b).unwrap().data(), &[4.0, 1.0]);
}

#[test]
fn softmax_hand_case() {
    let x = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let expect: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
    close(softmax(&x, 0).unwrap().data(), &expect, 1e-12);
}

#[test]
fn gru_cell_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (din, dh) = (2, 3);
    let names = GruCellNames::new("g");
    let mut store = ParamStore::new();
    for part in GruCellNames::PARTS {
        let shape = match &part[..1] {
            "w" => vec![dh, din],
            "u" => vec![dh, dh],
            _ => vec![dh],
        };
        store.insert(names.name(part), rand_tensor(&mut rng, &shape), ParamKind::Weight).unwrap();
    }
    let x = rand_tensor(&mut rng, &[1, din]);
    let h = rand_tensor(&mut rng, &[1, dh]);
    let y = gru_cell(&x, &h, &store, &names).unwrap();

    let p = |n: &str| store.value(&names.name(n)).unwrap().data().to_vec();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (xd, hd) = (x.data(), h.data());
    let affine = |w: &[f64], u: &[f64], b: &[f64], hin: &[f64], i: usize| {
        let mut s = b[i];
        for j in 0..din {
            s += w[i * din + j] * xd[j];
        }
        for j in 0..dh {
            s += u[i * dh + j] * hin[j];
        }
        s
    };
    let z: Vec<f64> = (0..dh).map(|i| sig(affine(&p("w_z"), &p("u_z"), &p("b_z"), hd, i))).collect();
    let r: Vec<f64> = (0..dh).map(|i| sig(affine(&p("w_r"), &p("u_r"), &p("b_r"), hd, i))).collect();
    let rh: Vec<f64> = (0..dh).map(|i| r[i] * hd[i]).collect();
    let c: Vec<f64> = (0..dh).map(|i| affine(&p("w_h"), &p("u_h"), &p("b_h"), &rh, i).tanh()).collect();
    let expect: Vec<f64> = (0..dh).map(|i| (1.0 - z[i]) * hd[i] + z[i] * c[i]).collect();
    close(y.data(), &expect, 1e-12);
}

#[test]
fn every_primitive_passes_over_twenty_seeds() {
    let prims: Vec<&str> = cases().iter().filter(|c| c.max_coords.is_none()).map(|c| c.name).collect();
    let out = run_suite(20, Some(&prims), None).unwrap();
    for o in &out {
        assert!(o.passed(), "{} seed {}: {:e} > {:e}", o.name, o.seed, o.max_rel_error, o.tol);
    }
    assert_eq!(summarize(&out).len(), prims.len());
}

#[test]
fn corrupted_backward_is_detected() {
    for name in ["linear", "conv2d", "gru_cell", "attention"] {
        let case = cases().into_iter().find(|c| c.name == name).unwrap();
        let o = run_case(&case, 0, Some(1.01)).unwrap();
        assert!(!o.passed(), "{name} passed with corrupted gradients");
    }
}

#[test]
fn loss_of_two_layer_linear_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    store.insert("w1", rand_tensor(&mut rng, &[4, 3]), ParamKind::Weight).unwrap();
    store.insert("b1", rand_tensor(&mut rng, &[4]), ParamKind::Bias).unwrap();
    store.insert("w2", rand_tensor(&mut rng, &[1, 4]), ParamKind::Weight).unwrap();
    store.insert("b2", rand_tensor(&mut rng, &[1]), ParamKind::Bias).unwrap();
    let x = rand_tensor(&mut rng, &[6, 3]);
    let mos: Vec<f64> = (0..6).map(|_| rng.gen_range(1.0..5.0)).collect();
    let cfg = LossConfig::default();
    // the loss is shift invariant, so both biases (which only shift the
    // output) have identically zero gradient
    let opts = GradCheckOptions { skip: vec![("b1".into(), 0..4), ("b2".into(), 0..1)], ..Default::default() };
    let report = grad_check(&store, &opts, |s| {
        let mut g = Graph::new(Mode::Train, 0);
        let xv = g.input(x.clone())?;
        let (w1, b1, w2, b2) = (g.param(s, "w1")?, g.param(s, "b1")?, g.param(s, "w2")?, g.param(s, "b2")?);
        let hdn = g.linear(xv, w1, Some(b1))?;
        let y = g.linear(hdn, w2, Some(b2))?;
        let y = g.reshape(y, &[6])?;
        let l = norm_in_norm(&mut g, y, &mos, &cfg)?;
        Ok((g, l))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{:e}", report.max_rel_error);
    assert!(report.skipped_max_abs <= 1e-12, "{:e}", report.skipped_max_abs);
}

#[test]
fn grad_check_rejects_bad_eps() {
    let store = ParamStore::<f64>::new();
    let opts = GradCheckOptions { eps: 1e-2, ..Default::default() };
    assert!(grad_check(&store, &opts, |_| unreachable!()).is_err());
}

#[test]
fn dropout_is_inverted_and_eval_identity() {
    let x = Tensor::full(&[200_000], 1.0f64);
    let mut g = Graph::new(Mode::Train, 9);
    let xv = g.input(x.clone()).unwrap();
    let y = g.dropout(xv, 0.25).unwrap();
    let d = g.value(y).data();
    let kept = d.iter().filter(|&&v| v != 0.0).count() as f64 / d.len() as f64;
    assert!((kept - 0.75).abs() < 0.005, "keep rate {kept}");
    assert!(d.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");

    let mut e = Graph::new(Mode::Eval, 9);
    let xv = e.input(x.clone()).unwrap();
    let y = e.dropout(xv, 0.25).unwrap();
    assert_eq!(e.value(y).data(), x.data());
}

#[test]
fn dropout_masks_follow_the_graph_seed() {
    let x = Tensor::full(&[64], 1.0f32);
    let mask = |seed| {
        let mut g = Graph::new(Mode::Train, seed);
        let xv = g.input(x.clone()).unwrap();
        let y = g.dropout(xv, 0.5).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(mask(5), mask(5));
    assert_ne!(mask(5), mask(6));
}

#[test]
fn batch_norm_stages_running_statistics() {
    let mut store = ParamStore::new();
    store.insert("bn.weight", Tensor::full(&[2], 1.0), ParamKind::Norm).unwrap();
    store.insert("bn.bias", Tensor::zeros(&[2]), ParamKind::Norm).unwrap();
    store.insert_buffer("bn.running_mean", Tensor::zeros(&[2])).unwrap();
    store.insert_buffer("bn.running_var", Tensor::full(&[2], 1.0)).unwrap();
    let x = Tensor::<f64>::from_f64(&[2, 2, 1, 1], &[1.0, 10.0, 3.0, 20.0]).unwrap();
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.input(x.clone()).unwrap();
    g.batch_norm_layer(&store, "bn", xv).unwrap();
    assert_eq!(store.buffer("bn.running_mean").unwrap().data(), &[0.0, 0.0]);
    g.commit_buffers(&mut store).unwrap();
    let rm = store.buffer("bn.running_mean").unwrap().data().to_vec();
    assert!(rm[0] > 0.0 && rm[1] > rm[0]);

    let mut e = Graph::new(Mode::Eval, 0);
    let xv = e.input(x).unwrap();
    e.batch_norm_layer(&store, "bn", xv).unwrap();
    e.commit_buffers(&mut store).unwrap();
    assert_eq!(store.buffer("bn.running_mean").unwrap().data(), &rm[..]);
}

#[test]
fn single_and_double_precision_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let y64 = conv2d(&x, &w, &b, 1, 1).unwrap();
    let y32 = conv2d(&x.cast::<f32>(), &w.cast(), &b.cast(), 1, 1).unwrap();
    close(&y32.to_f64_vec(), y64.data(), 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let n = v.len();
        let s = softmax(&Tensor::<f64>::from_f64(&[n], &v).unwrap(), 0).unwrap();
        prop_assert!((s.sum() - 1.0).abs() < 1e-12);
        prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn conv_is_linear_in_input(seed in 0u64..1000, a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let x2 = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let zero = Tensor::zeros(&[2]);
        let mix = Tensor::new(&[1, 2, 4, 4], x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + q).collect()).unwrap();
        let y = conv2d(&mix, &w, &zero, 1, 1).unwrap();
        let y1 = conv2d(&x1, &w, &zero, 1, 1).unwrap();
        let y2 = conv2d(&x2, &w, &zero, 1, 1).unwrap();
        for i in 0..y.numel() {
            prop_assert!((y.data()[i] - (a * y1.data()[i] + y2.data()[i])).abs() < 1e-12);
        }
    }
}
