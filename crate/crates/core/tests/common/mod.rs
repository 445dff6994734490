//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segpretext::autodiff::grad_check_many;
use segpretext::losses;
use segpretext::nn::norm::{self, Affine, RunningStats, SwitchLogits, DEFAULT_MOMENTUM};
use segpretext::{LabelTensor, Result, Tape, Tensor, Var};

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;

pub type ScalarFn = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: ScalarFn,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform in `[-hi, -lo] ∪ [lo, hi]`, keeping clear of kinks at zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn labels(rng: &mut ChaCha8Rng, shape: &[usize], k: usize) -> LabelTensor {
    let n = shape.iter().product();
    LabelTensor::new(shape, (0..n).map(|_| rng.gen_range(0..k)).collect()).unwrap()
}

/// `sum(y ⊙ R)` for a fixed pseudo-random `R`, so every output element
/// carries a distinct weight (plain sums hide errors in ops like softmax).
pub fn project(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y)?;
    let mut r = rng(seed ^ 0x9e37_79b9);
    let w = tape.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// One instance of every differentiable primitive and loss.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let s = seed;
    let mut out = Vec::new();
    out.push(case(
        "add (broadcast)",
        vec![uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[1, 3], -1.0, 1.0)],
        move |t, v| project(t, t.add(v[0], v[1])?, s),
    ));
    out.push(case(
        "sub (broadcast)",
        vec![uniform(&mut r, &[2, 1, 3], -1.0, 1.0), uniform(&mut r, &[4, 1], -1.0, 1.0)],
        move |t, v| project(t, t.sub(v[0], v[1])?, s),
    ));
    out.push(case(
        "mul",
        vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[3, 4], -1.0, 1.0)],
        move |t, v| project(t, t.mul(v[0], v[1])?, s),
    ));
    out.push(case(
        "div",
        vec![uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[2, 3], 0.5, 2.0)],
        move |t, v| project(t, t.div(v[0], v[1])?, s),
    ));
    out.push(case("scale", vec![uniform(&mut r, &[5], -1.0, 1.0)], move |t, v| {
        project(t, t.scale(v[0], -1.7)?, s)
    }));
    out.push(case("add_scalar", vec![uniform(&mut r, &[5], -1.0, 1.0)], move |t, v| {
        project(t, t.add_scalar(v[0], 0.3)?, s)
    }));
    out.push(case("square", vec![uniform(&mut r, &[2, 2], -2.0, 2.0)], move |t, v| {
        project(t, t.square(v[0])?, s)
    }));
    out.push(case("sqrt", vec![uniform(&mut r, &[2, 3], 0.5, 3.0)], move |t, v| {
        project(t, t.sqrt(v[0])?, s)
    }));
    out.push(case("relu", vec![away_from_zero(&mut r, &[3, 3], 0.05, 1.0)], move |t, v| {
        project(t, t.relu(v[0])?, s)
    }));
    out.push(case("sum", vec![uniform(&mut r, &[2, 3], -1.0, 1.0)], move |t, v| {
        let y = t.sum(v[0])?;
        t.square(y).and_then(|q| t.sum(q))
    }));
    out.push(case("mean", vec![uniform(&mut r, &[2, 3], -1.0, 1.0)], move |t, v| {
        let y = t.mean(v[0])?;
        t.square(y).and_then(|q| t.sum(q))
    }));
    out.push(case("mean_axes", vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0)], move |t, v| {
        project(t, t.mean_axes(v[0], &[0, 2])?, s)
    }));
    out.push(case("reshape", vec![uniform(&mut r, &[2, 6], -1.0, 1.0)], move |t, v| {
        project(t, t.reshape(v[0], &[3, 1, 4])?, s)
    }));
    out.push(case("softmax", vec![uniform(&mut r, &[3, 4], -2.0, 2.0)], move |t, v| {
        project(t, t.softmax(v[0])?, s)
    }));
    let idx = r.gen_range(0..6);
    out.push(case("select", vec![uniform(&mut r, &[6], -1.0, 1.0)], move |t, v| {
        let y = t.select(v[0], idx)?;
        let q = t.square(y)?;
        t.sum(q)
    }));
    out.push(case(
        "conv2d stride 1 pad 1",
        vec![
            uniform(&mut r, &[2, 2, 5, 5], -1.0, 1.0),
            uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(&mut r, &[3], -1.0, 1.0),
        ],
        move |t, v| project(t, t.conv2d(v[0], v[1], v[2], 1, 1)?, s),
    ));
    out.push(case(
        "conv2d stride 2 pad 1",
        vec![
            uniform(&mut r, &[1, 2, 6, 6], -1.0, 1.0),
            uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0),
            uniform(&mut r, &[2], -1.0, 1.0),
        ],
        move |t, v| project(t, t.conv2d(v[0], v[1], v[2], 2, 1)?, s),
    ));
    out.push(case("upsample_nearest", vec![uniform(&mut r, &[1, 2, 3, 3], -1.0, 1.0)], move |t, v| {
        project(t, t.upsample_nearest(v[0], 2)?, s)
    }));
    out.push(case(
        "linear",
        vec![
            uniform(&mut r, &[2, 3], -1.0, 1.0),
            uniform(&mut r, &[3, 4], -1.0, 1.0),
            uniform(&mut r, &[4], -1.0, 1.0),
        ],
        move |t, v| project(t, t.linear(v[0], v[1], v[2])?, s),
    ));
    out.push(case("global_avg_pool", vec![uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0)], move |t, v| {
        project(t, t.global_avg_pool(v[0])?, s)
    }));
    let ce_target = labels(&mut r, &[2, 2, 2], 3);
    out.push(case("cross_entropy", vec![uniform(&mut r, &[2, 3, 2, 2], -2.0, 2.0)], move |t, v| {
        losses::cross_entropy(t, v[0], &ce_target)
    }));
    let mse_target = uniform(&mut r, &[2, 3], -1.0, 1.0);
    out.push(case("mse_loss", vec![uniform(&mut r, &[2, 3], -1.0, 1.0)], move |t, v| {
        let target = t.constant(mse_target.clone());
        losses::mse_loss(t, v[0], target)
    }));
    let seg_target = labels(&mut r, &[2, 4, 4], 3);
    out.push(case(
        "composite conv-norm-relu-upsample-conv-ce",
        vec![
            uniform(&mut r, &[2, 2, 4, 4], -1.0, 1.0),
            uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(&mut r, &[3], -0.1, 0.1),
            uniform(&mut r, &[3, 3, 3, 3], -1.0, 1.0),
            uniform(&mut r, &[3], -0.1, 0.1),
        ],
        move |t, v| {
            let h = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            let aff = Affine {
                gamma: t.constant(Tensor::ones(&[3])),
                beta: t.constant(Tensor::zeros(&[3])),
            };
            let h = norm::instance_norm(t, h, aff, 1e-5)?;
            let h = t.relu(h)?;
            let h = t.upsample_nearest(h, 2)?;
            let y = t.conv2d(h, v[3], v[4], 1, 1)?;
            losses::cross_entropy(t, y, &seg_target)
        },
    ));
    out
}

/// Every norm variant in training mode, differentiated through x, γ, β and
/// (for switchable) both logit triples.
pub fn norm_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed.wrapping_add(1000));
    let s = seed;
    let eps = 1e-5;
    let x_shape = [3, 4, 2, 2];
    let base = |r: &mut ChaCha8Rng| {
        vec![
            uniform(r, &x_shape, -2.0, 2.0),
            uniform(r, &[4], 0.5, 1.5),
            uniform(r, &[4], -0.5, 0.5),
        ]
    };
    let affine = |_: &Tape, v: &[Var]| Affine { gamma: v[1], beta: v[2] };
    let running = RunningStats::new(4, DEFAULT_MOMENTUM).unwrap();
    let running_eval = RunningStats {
        mean: Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0]),
        var: Tensor::from_vec(vec![1.5, 0.7, 1.0, 2.0]),
        momentum: DEFAULT_MOMENTUM,
    };
    let mut out = Vec::new();
    let rb = running.clone();
    out.push(case("batch_norm train", base(&mut r), move |t, v| {
        let (y, _) = norm::batch_norm(t, v[0], affine(t, v), eps, &rb, true)?;
        project(t, y, s)
    }));
    let re = running_eval.clone();
    out.push(case("batch_norm eval", base(&mut r), move |t, v| {
        let (y, _) = norm::batch_norm(t, v[0], affine(t, v), eps, &re, false)?;
        project(t, y, s)
    }));
    out.push(case("layer_norm", base(&mut r), move |t, v| {
        project(t, norm::layer_norm(t, v[0], affine(t, v), eps)?, s)
    }));
    out.push(case("instance_norm", base(&mut r), move |t, v| {
        project(t, norm::instance_norm(t, v[0], affine(t, v), eps)?, s)
    }));
    for (name, groups) in [("group_norm g=1", 1), ("group_norm g=2", 2), ("group_norm g=4", 4)] {
        out.push(case(name, base(&mut r), move |t, v| {
            project(t, norm::group_norm(t, v[0], affine(t, v), groups, eps)?, s)
        }));
    }
    let mut inputs = base(&mut r);
    inputs.push(uniform(&mut r, &[3], -1.0, 1.0));
    inputs.push(uniform(&mut r, &[3], -1.0, 1.0));
    let rs = running.clone();
    out.push(case("switchable_norm train", inputs, move |t, v| {
        let logits = SwitchLogits { mean: v[3], var: v[4] };
        let (y, _) = norm::switchable_norm(t, v[0], affine(t, v), logits, eps, &rs, true)?;
        project(t, y, s)
    }));
    let mut inputs = base(&mut r);
    inputs.push(uniform(&mut r, &[3], -1.0, 1.0));
    inputs.push(uniform(&mut r, &[3], -1.0, 1.0));
    out.push(case("switchable_norm eval", inputs, move |t, v| {
        let logits = SwitchLogits { mean: v[3], var: v[4] };
        let (y, _) = norm::switchable_norm(t, v[0], affine(t, v), logits, eps, &running_eval, false)?;
        project(t, y, s)
    }));
    out
}

#[derive(Debug)]
pub struct SuiteFailure {
    pub name: &'static str,
    pub seed: u64,
    pub detail: String,
}

/// Runs `cases(seed)` for seeds `0..seeds`; returns (checks run, worst error, failures).
pub fn run_grad_suite(cases: fn(u64) -> Vec<Case>, seeds: u64) -> (usize, f64, Vec<SuiteFailure>) {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut count = 0;
    for seed in 0..seeds {
        for c in cases(seed) {
            count += 1;
            match grad_check_many(&c.f, &c.inputs, GRAD_H, GRAD_TOL) {
                Ok(rep) => {
                    worst = worst.max(rep.max_rel_error);
                    if !rep.passed {
                        failures.push(SuiteFailure {
                            name: c.name,
                            seed,
                            detail: format!("max rel error {:e} at {:?}", rep.max_rel_error, rep.worst),
                        });
                    }
                }
                Err(e) => failures.push(SuiteFailure {
                    name: c.name,
                    seed,
                    detail: e.to_string(),
                }),
            }
        }
    }
    (count, worst, failures)
}

fn unit_affine(tape: &Tape, c: usize) -> Affine {
    Affine {
        gamma: tape.constant(Tensor::ones(&[c])),
        beta: tape.constant(Tensor::zeros(&[c])),
    }
}

/// Largest |mean| and |var - 1| over groups of `x` sharing every index
/// except the ones in `axes`.
pub fn axis_moments(x: &Tensor, axes: &[usize]) -> (f64, f64) {
    let shape = x.shape().to_vec();
    let mut groups: std::collections::BTreeMap<Vec<usize>, Vec<f64>> = Default::default();
    let mut idx = vec![0; shape.len()];
    for &v in x.data() {
        let key: Vec<usize> = idx
            .iter()
            .enumerate()
            .map(|(d, &i)| if axes.contains(&d) { 0 } else { i })
            .collect();
        groups.entry(key).or_default().push(v);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for vals in groups.values() {
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        worst_mean = worst_mean.max(m.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    (worst_mean, worst_var)
}

pub struct NormIdentityReport {
    pub gn1_vs_ln: f64,
    pub gnc_vs_in: f64,
    /// (name, worst |mean|, worst |var-1|)
    pub moments: Vec<(&'static str, f64, f64)>,
    pub switch_sum_err: f64,
    pub saturated_vs_bn: f64,
}

/// Worst-case deviations over `seeds` random inputs.
pub fn norm_identities(seeds: u64) -> NormIdentityReport {
    let mut rep = NormIdentityReport {
        gn1_vs_ln: 0.0,
        gnc_vs_in: 0.0,
        moments: vec![("batch", 0.0, 0.0), ("layer", 0.0, 0.0), ("instance", 0.0, 0.0)],
        switch_sum_err: 0.0,
        saturated_vs_bn: 0.0,
    };
    for seed in 0..seeds {
        let mut r = rng(seed.wrapping_add(77));
        let c = 2 * r.gen_range(1..4);
        let shape = [r.gen_range(2..4), c, r.gen_range(2..5), r.gen_range(2..5)];
        let xt = uniform(&mut r, &shape, -3.0, 5.0);
        let tape = Tape::new();
        let x = tape.constant(xt);
        let a = unit_affine(&tape, c);
        let val = |v: Var| tape.value(v).unwrap();

        let eps = 1e-5;
        let ln = val(norm::layer_norm(&tape, x, a, eps).unwrap());
        let gn1 = val(norm::group_norm(&tape, x, a, 1, eps).unwrap());
        rep.gn1_vs_ln = rep.gn1_vs_ln.max(gn1.max_abs_diff(&ln));
        let inn = val(norm::instance_norm(&tape, x, a, eps).unwrap());
        let gnc = val(norm::group_norm(&tape, x, a, c, eps).unwrap());
        rep.gnc_vs_in = rep.gnc_vs_in.max(gnc.max_abs_diff(&inn));

        let tiny = 1e-12;
        let running = RunningStats::new(c, DEFAULT_MOMENTUM).unwrap();
        let outs = [
            (val(norm::batch_norm(&tape, x, a, tiny, &running, true).unwrap().0), vec![0, 2, 3]),
            (val(norm::layer_norm(&tape, x, a, tiny).unwrap()), vec![1, 2, 3]),
            (val(norm::instance_norm(&tape, x, a, tiny).unwrap()), vec![2, 3]),
        ];
        for (slot, (y, axes)) in rep.moments.iter_mut().zip(&outs) {
            let (m, v) = axis_moments(y, axes);
            slot.1 = slot.1.max(m);
            slot.2 = slot.2.max(v);
        }

        let logits = uniform(&mut r, &[3], -5.0, 5.0);
        let w = norm::switch_weights(&logits).unwrap();
        rep.switch_sum_err = rep.switch_sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
        if w.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            rep.switch_sum_err = f64::INFINITY;
        }

        let sat = tape.constant(Tensor::from_vec(vec![20.0, -20.0, -20.0]));
        let logits = SwitchLogits { mean: sat, var: sat };
        let sn = val(norm::switchable_norm(&tape, x, a, logits, eps, &running, true).unwrap().0);
        let bn = val(norm::batch_norm(&tape, x, a, eps, &running, true).unwrap().0);
        rep.saturated_vs_bn = rep.saturated_vs_bn.max(sn.max_abs_diff(&bn));
    }
    rep
}
