//! Batch, layer, instance, group and switchable normalization over
//! `[N,C,H,W]` activations, built from differentiable tape primitives so
//! every statistic participates in backpropagation.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel scale and shift, both `[C]`.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub gamma: Var,
    pub beta: Var,
}

/// Mixing logits over {batch, instance, layer} statistics, each `[3]`.
#[derive(Clone, Copy, Debug)]
pub struct SwitchLogits {
    pub mean: Var,
    pub var: Var,
}

/// Batch-statistic estimates used in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub momentum: f64,
}

impl RunningStats {
    /// Cold start: mean 0, variance 1.
    pub fn new(channels: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::param(format!("running-stat momentum {momentum} not in (0,1)")));
        }
        Ok(RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            momentum,
        })
    }

    /// `running <- (1 - m) * running + m * batch`
    pub fn update(&mut self, batch_mean: &Tensor, batch_var: &Tensor) {
        let m = self.momentum;
        for (r, b) in self.mean.data_mut().iter_mut().zip(batch_mean.data()) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.data_mut().iter_mut().zip(batch_var.data()) {
            *r = ((1.0 - m) * *r + m * b).max(0.0);
        }
    }
}

/// Per-channel batch mean and (biased) variance from a training forward pass.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Tensor,
    pub var: Tensor,
}

fn dims(tape: &Tape, x: Var) -> Result<[usize; 4]> {
    let s = tape.shape(x)?;
    match s[..] {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(format!("normalization expects [N,C,H,W], got {s:?}"))),
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("epsilon must be > 0, got {eps}")))
    }
}

/// Mean and biased variance over `axes`, kept as extent-1 axes.
fn moments(tape: &Tape, x: Var, axes: &[usize]) -> Result<(Var, Var)> {
    let mean = tape.mean_axes(x, axes)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered)?;
    let var = tape.mean_axes(sq, axes)?;
    Ok((mean, var))
}

fn standardize(tape: &Tape, x: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
    let centered = tape.sub(x, mean)?;
    let shifted = tape.add_scalar(var, eps)?;
    let std = tape.sqrt(shifted)?;
    tape.div(centered, std)
}

fn apply_affine(tape: &Tape, xhat: Var, affine: Affine, channels: usize) -> Result<Var> {
    for (name, v) in [("gamma", affine.gamma), ("beta", affine.beta)] {
        let s = tape.shape(v)?;
        if s != [channels] {
            return Err(Error::shape(format!("{name} has shape {s:?}, expected [{channels}]")));
        }
    }
    let g = tape.reshape(affine.gamma, &[1, channels, 1, 1])?;
    let b = tape.reshape(affine.beta, &[1, channels, 1, 1])?;
    let scaled = tape.mul(xhat, g)?;
    tape.add(scaled, b)
}

fn channel_vector(tape: &Tape, v: Var) -> Result<Tensor> {
    let t = tape.value(v)?;
    let c = t.len();
    t.into_reshaped(&[c])
}

fn require_batch(n: usize, h: usize, w: usize) -> Result<()> {
    if n * h * w < 2 {
        return Err(Error::data(
            "degenerate batch: batch statistics need at least 2 values per channel",
        ));
    }
    Ok(())
}

/// Batch normalization. In training mode statistics are taken over N,H,W per
/// channel and returned for the caller to fold into `running`; in evaluation
/// mode `running` is used as constants.
pub fn batch_norm(
    tape: &Tape,
    x: Var,
    affine: Affine,
    eps: f64,
    running: &RunningStats,
    training: bool,
) -> Result<(Var, Option<BatchMoments>)> {
    check_eps(eps)?;
    let [n, c, h, w] = dims(tape, x)?;
    if training {
        require_batch(n, h, w)?;
        let (mean, var) = moments(tape, x, &[0, 2, 3])?;
        let xhat = standardize(tape, x, mean, var, eps)?;
        let stats = BatchMoments {
            mean: channel_vector(tape, mean)?,
            var: channel_vector(tape, var)?,
        };
        Ok((apply_affine(tape, xhat, affine, c)?, Some(stats)))
    } else {
        let (mean, var) = running_vars(tape, running, c)?;
        let xhat = standardize(tape, x, mean, var, eps)?;
        Ok((apply_affine(tape, xhat, affine, c)?, None))
    }
}

fn running_vars(tape: &Tape, running: &RunningStats, c: usize) -> Result<(Var, Var)> {
    if running.mean.len() != c {
        return Err(Error::shape(format!(
            "running stats have {} channels, input has {c}",
            running.mean.len()
        )));
    }
    Ok((
        tape.constant(running.mean.reshape(&[1, c, 1, 1])?),
        tape.constant(running.var.reshape(&[1, c, 1, 1])?),
    ))
}

/// Statistics over C,H,W per sample.
pub fn layer_norm(tape: &Tape, x: Var, affine: Affine, eps: f64) -> Result<Var> {
    check_eps(eps)?;
    let [_, c, _, _] = dims(tape, x)?;
    let (mean, var) = moments(tape, x, &[1, 2, 3])?;
    let xhat = standardize(tape, x, mean, var, eps)?;
    apply_affine(tape, xhat, affine, c)
}

/// Statistics over H,W per (sample, channel).
pub fn instance_norm(tape: &Tape, x: Var, affine: Affine, eps: f64) -> Result<Var> {
    check_eps(eps)?;
    let [_, c, _, _] = dims(tape, x)?;
    let (mean, var) = moments(tape, x, &[2, 3])?;
    let xhat = standardize(tape, x, mean, var, eps)?;
    apply_affine(tape, xhat, affine, c)
}

/// Statistics over (C/groups, H, W) per (sample, group).
pub fn group_norm(tape: &Tape, x: Var, affine: Affine, groups: usize, eps: f64) -> Result<Var> {
    check_eps(eps)?;
    let [n, c, h, w] = dims(tape, x)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::param(format!(
            "group count {groups} does not divide {c} channels"
        )));
    }
    let grouped = tape.reshape(x, &[n, groups, c / groups * h * w])?;
    let (mean, var) = moments(tape, grouped, &[2])?;
    let xhat = standardize(tape, grouped, mean, var, eps)?;
    let xhat = tape.reshape(xhat, &[n, c, h, w])?;
    apply_affine(tape, xhat, affine, c)
}

fn mix(tape: &Tape, logits: Var, parts: [Var; 3]) -> Result<Var> {
    let s = tape.shape(logits)?;
    if s != [3] {
        return Err(Error::shape(format!("switchable logits must be [3], got {s:?}")));
    }
    let weights = tape.softmax(logits)?;
    let mut acc: Option<Var> = None;
    for (k, part) in parts.into_iter().enumerate() {
        let wk = tape.select(weights, k)?;
        let term = tape.mul(part, wk)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("three parts"))
}

/// Switchable normalization: mean and variance are convex mixtures (softmax
/// of learnable logits) of the batch, instance and layer statistics, in that
/// order. Batch statistics come from `running` in evaluation mode.
pub fn switchable_norm(
    tape: &Tape,
    x: Var,
    affine: Affine,
    logits: SwitchLogits,
    eps: f64,
    running: &RunningStats,
    training: bool,
) -> Result<(Var, Option<BatchMoments>)> {
    check_eps(eps)?;
    let [n, c, h, w] = dims(tape, x)?;
    let (bn_mean, bn_var, stats) = if training {
        require_batch(n, h, w)?;
        let (m, v) = moments(tape, x, &[0, 2, 3])?;
        let stats = BatchMoments {
            mean: channel_vector(tape, m)?,
            var: channel_vector(tape, v)?,
        };
        (m, v, Some(stats))
    } else {
        let (m, v) = running_vars(tape, running, c)?;
        (m, v, None)
    };
    let (in_mean, in_var) = moments(tape, x, &[2, 3])?;
    let (ln_mean, ln_var) = moments(tape, x, &[1, 2, 3])?;
    let mean = mix(tape, logits.mean, [bn_mean, in_mean, ln_mean])?;
    let var = mix(tape, logits.var, [bn_var, in_var, ln_var])?;
    let xhat = standardize(tape, x, mean, var, eps)?;
    Ok((apply_affine(tape, xhat, affine, c)?, stats))
}

/// Softmax of a 3-logit vector, computed the same way as on the tape.
pub fn switch_weights(logits: &Tensor) -> Result<[f64; 3]> {
    let tape = Tape::new();
    let v = tape.constant(logits.clone());
    let w = tape.value(tape.softmax(v)?)?;
    match w.data() {
        &[a, b, c] => Ok([a, b, c]),
        _ => Err(Error::shape(format!("switch logits must be [3], got {:?}", logits.shape()))),
    }
}
