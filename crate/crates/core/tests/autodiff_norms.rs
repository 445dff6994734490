mod common;

use common::*;
use proptest::prelude::*;
use segpretext::autodiff::grad_check;
use segpretext::nn::norm::{self, Affine, RunningStats, DEFAULT_MOMENTUM};
use segpretext::nn::{build_model, Mode, ModelConfig, NormKind};
use segpretext::{Error, Tape, Task, Tensor};

fn report(failures: &[SuiteFailure]) -> String {
    failures
        .iter()
        .map(|f| format!("{} seed {}: {}", f.name, f.seed, f.detail))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn every_op_passes_finite_differences() {
    let (n, worst, failures) = run_grad_suite(op_cases, GRAD_SEEDS);
    assert!(n >= 20 * 23);
    assert!(failures.is_empty(), "worst {worst:e}\n{}", report(&failures));
}

#[test]
fn every_norm_passes_finite_differences() {
    let (n, worst, failures) = run_grad_suite(norm_cases, GRAD_SEEDS);
    assert!(n >= 20 * 9);
    assert!(failures.is_empty(), "worst {worst:e}\n{}", report(&failures));
}

#[test]
fn mse_gradient_against_fixed_target() {
    let target = Tensor::from_vec(vec![0.2, -1.0, 0.5]);
    let x = Tensor::from_vec(vec![1.0, 2.0, -0.3]);
    let r = grad_check(
        |t, v| {
            let c = t.constant(target.clone());
            segpretext::losses::mse_loss(t, v, c)
        },
        &x,
        GRAD_H,
        GRAD_TOL,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn norm_identities_hold() {
    let rep = norm_identities(30);
    assert!(rep.gn1_vs_ln <= 1e-12, "gn(1) vs ln {:e}", rep.gn1_vs_ln);
    assert!(rep.gnc_vs_in <= 1e-12, "gn(C) vs in {:e}", rep.gnc_vs_in);
    for (name, m, v) in &rep.moments {
        assert!(*m <= 1e-10, "{name} mean {m:e}");
        assert!(*v <= 1e-6, "{name} variance deviation {v:e}");
    }
    assert!(rep.switch_sum_err <= 1e-12);
    assert!(rep.saturated_vs_bn <= 1e-6, "saturated switchable vs bn {:e}", rep.saturated_vs_bn);
}

#[test]
fn instance_norm_ignores_per_channel_affine_rescaling() {
    let mut r = rng(3);
    let x = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    let scales = uniform(&mut r, &[2, 3], 0.5, 4.0);
    let shifts = uniform(&mut r, &[2, 3], -2.0, 2.0);
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        let nc = i / 16;
        *v = *v * scales.data()[nc] + shifts.data()[nc];
    }
    let tape = Tape::new();
    let a = Affine {
        gamma: tape.constant(Tensor::ones(&[3])),
        beta: tape.constant(Tensor::zeros(&[3])),
    };
    let (vx, vy) = (tape.constant(x), tape.constant(y));
    let nx = tape.value(norm::instance_norm(&tape, vx, a, 1e-12).unwrap()).unwrap();
    let ny = tape.value(norm::instance_norm(&tape, vy, a, 1e-12).unwrap()).unwrap();
    assert!(nx.max_abs_diff(&ny) <= 1e-6);
}

#[test]
fn norm_errors() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4, 1, 1]));
    let a = Affine {
        gamma: tape.constant(Tensor::ones(&[4])),
        beta: tape.constant(Tensor::zeros(&[4])),
    };
    let running = RunningStats::new(4, DEFAULT_MOMENTUM).unwrap();
    assert!(matches!(norm::batch_norm(&tape, x, a, 1e-5, &running, true), Err(Error::Data(_))));
    assert!(norm::batch_norm(&tape, x, a, 0.0, &running, false).is_err());
    assert!(matches!(norm::group_norm(&tape, x, a, 3, 1e-5), Err(Error::Param(_))));
    assert!(RunningStats::new(4, 1.0).is_err());
}

#[test]
fn default_model_shapes_and_shared_encoder() {
    let cfg = ModelConfig {
        tasks: Task::ALL.to_vec(),
        nb_classes: 4,
        ..ModelConfig::default()
    };
    let model = build_model(&cfg, 11).unwrap();
    assert_eq!(model.tasks().count(), 5);
    let x = uniform(&mut rng(1), &[2, 3, 32, 32], 0.0, 1.0);
    assert_eq!(model.predict(Task::Segmentation, &x).unwrap().shape(), &[2, 4, 32, 32]);
    assert_eq!(model.predict(Task::Jigsaw, &x).unwrap().shape(), &[2, 9, 9]);
    assert_eq!(model.predict(Task::Inpainting, &x).unwrap().shape(), &[2, 3, 32, 32]);
    // encoder parameters are registered once, not per head
    let enc = model.encoder_param_ids();
    for t in Task::ALL {
        let head = model.head_param_ids(t).unwrap();
        assert!(head.iter().all(|h| !enc.contains(h)));
    }
}

#[test]
fn every_norm_kind_trains_through_a_model() {
    for kind in [
        NormKind::Batch,
        NormKind::Layer,
        NormKind::Instance,
        NormKind::Group,
        NormKind::Switchable,
        NormKind::None,
    ] {
        let cfg = ModelConfig {
            tasks: vec![Task::Segmentation],
            encoder_channels: vec![4, 8],
            norm: kind,
            groups: 2,
            nb_classes: 3,
            ..ModelConfig::default()
        };
        let model = build_model(&cfg, 5).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let x = tape.constant(uniform(&mut rng(2), &[2, 3, 8, 8], 0.0, 1.0));
        let mut stats = Vec::new();
        let y = model.forward(&tape, &bound, Task::Segmentation, x, Mode::Train, &mut stats).unwrap();
        let loss = project(&tape, y, 4).unwrap();
        tape.backward(loss).unwrap();
        let grads = model.gradients(&tape, &bound).unwrap();
        assert_eq!(grads.len(), model.params().len());
        assert!(grads.iter().all(Tensor::all_finite), "{kind:?}");
        assert!(grads.iter().any(|g| g.data().iter().any(|&v| v != 0.0)), "{kind:?}");
    }
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [f, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[ni, ci, iy as usize, ix as usize]) * w.at(&[fi, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[ni, fi, oy, ox], acc);
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_loop_oracle(
        seed in any::<u64>(),
        n in 1usize..3, c in 1usize..4, f in 1usize..4,
        h in 3usize..8, w in 3usize..8, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2,
    ) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        let wt = uniform(&mut r, &[f, c, k, k], -1.0, 1.0);
        let b = uniform(&mut r, &[f], -1.0, 1.0);
        let tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.value(tape.conv2d(vx, vw, vb, stride, pad).unwrap()).unwrap();
        let want = conv_oracle(&x, &wt, &b, stride, pad);
        prop_assert_eq!(y.shape(), want.shape());
        prop_assert!(y.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn reuse_accumulates_single_use_gradients(seed in any::<u64>(), k in 1usize..6) {
        let x = uniform(&mut rng(seed), &[3], -1.0, 1.0);
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.square(v).unwrap();
        let mut acc = tape.sum(sq).unwrap();
        for _ in 1..k {
            let sq = tape.square(v).unwrap();
            let s = tape.sum(sq).unwrap();
            acc = tape.add(acc, s).unwrap();
        }
        tape.backward(acc).unwrap();
        let g = tape.grad(v).unwrap().unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            prop_assert!((gi - 2.0 * k as f64 * xi).abs() <= 1e-12);
        }
    }

    #[test]
    fn shapes_depend_only_on_input_shapes(
        s1 in any::<u64>(), s2 in any::<u64>(),
        n in 1usize..3, c in 1usize..4, h in 2usize..6, w in 2usize..6,
    ) {
        let shape_of = |seed: u64| {
            let mut r = rng(seed);
            let tape = Tape::new();
            let x = tape.constant(uniform(&mut r, &[n, c, h, w], -1.0, 1.0));
            let wt = tape.constant(uniform(&mut r, &[2, c, 3, 3], -1.0, 1.0));
            let b = tape.constant(uniform(&mut r, &[2], -1.0, 1.0));
            let y = tape.conv2d(x, wt, b, 1, 1).unwrap();
            let y = tape.upsample_nearest(y, 2).unwrap();
            let y = tape.relu(y).unwrap();
            let p = tape.global_avg_pool(y).unwrap();
            (tape.shape(y).unwrap(), tape.shape(p).unwrap())
        };
        prop_assert_eq!(shape_of(s1), shape_of(s2));
    }

    #[test]
    fn switch_weights_are_a_simplex_point(a in -30.0f64..30.0, b in -30.0f64..30.0, c in -30.0f64..30.0) {
        let w = norm::switch_weights(&Tensor::from_vec(vec![a, b, c])).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
