//! Per-task losses and their weighted combination.
//!
//! Reconstruction tasks (inpainting, denoising) use mean squared error;
//! classification tasks (jigsaw, colorization, segmentation) use
//! cross-entropy. The mapping is fixed; only the weights are configurable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::task::Task;
use crate::tensor::LabelTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

impl LossKind {
    pub fn for_task(task: Task) -> LossKind {
        match task {
            Task::Inpainting | Task::Denoising => LossKind::Mse,
            Task::Jigsaw | Task::Colorization | Task::Segmentation => LossKind::CrossEntropy,
        }
    }
}

/// Mean over all elements of `(pred - target)^2`.
pub fn mse_loss(tape: &Tape, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (tape.shape(pred)?, tape.shape(target)?);
    if ps != ts {
        return Err(Error::shape(format!(
            "mse_loss: prediction {ps:?} and target {ts:?} differ"
        )));
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Mean over batch and positions of `-log softmax(logits)[target]`, class
/// axis 1. `target` has the logits' shape with the class axis removed.
pub fn cross_entropy(tape: &Tape, logits: Var, target: &LabelTensor) -> Result<Var> {
    let ls = tape.shape(logits)?;
    if ls.len() < 2 {
        return Err(Error::shape(format!("cross_entropy logits need [N,K,...], got {ls:?}")));
    }
    let mut want = vec![ls[0]];
    want.extend_from_slice(&ls[2..]);
    if target.shape() != want.as_slice() {
        return Err(Error::shape(format!(
            "cross_entropy: target shape {:?} does not match logits {ls:?}",
            target.shape()
        )));
    }
    target.check_below(ls[1])?;
    tape.cross_entropy(logits, target.data())
}

/// Non-negative weight per active task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLossSpec {
    weights: BTreeMap<Task, f64>,
}

impl TaskLossSpec {
    pub fn new(weights: BTreeMap<Task, f64>) -> Result<Self> {
        if let Some((t, w)) = weights.iter().find(|(_, &w)| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::config(format!("weight for {t} must be finite and >= 0, got {w}")));
        }
        Ok(TaskLossSpec { weights })
    }

    /// Weight 1 for each task.
    pub fn uniform(tasks: &[Task]) -> Self {
        TaskLossSpec {
            weights: tasks.iter().map(|&t| (t, 1.0)).collect(),
        }
    }

    pub fn weight(&self, task: Task) -> Option<f64> {
        self.weights.get(&task).copied()
    }

    pub fn kind(&self, task: Task) -> LossKind {
        LossKind::for_task(task)
    }

    pub fn tasks(&self) -> impl Iterator<Item = Task> + '_ {
        self.weights.keys().copied()
    }
}

/// `sum_task weight_task * loss_task` over every task in `spec`.
pub fn combine_losses(tape: &Tape, per_task: &BTreeMap<Task, Var>, spec: &TaskLossSpec) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&task, &w) in &spec.weights {
        let loss = *per_task
            .get(&task)
            .ok_or_else(|| Error::config(format!("no loss computed for task {task}")))?;
        let term = tape.scale(loss, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::config("loss spec names no tasks"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).unwrap().item().unwrap()
    }

    #[test]
    fn task_mapping() {
        assert_eq!(LossKind::for_task(Task::Inpainting), LossKind::Mse);
        assert_eq!(LossKind::for_task(Task::Denoising), LossKind::Mse);
        for t in [Task::Jigsaw, Task::Colorization, Task::Segmentation] {
            assert_eq!(LossKind::for_task(t), LossKind::CrossEntropy);
        }
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![0.3, -1.0]));
        assert_eq!(scalar(&tape, mse_loss(&tape, a, a).unwrap()), 0.0);
        let p = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let t = tape.constant(Tensor::from_vec(vec![1.0, 3.0]));
        assert_eq!(scalar(&tape, mse_loss(&tape, p, t).unwrap()), 5.0);
        let bad = tape.constant(Tensor::from_vec(vec![1.0, 3.0, 4.0]));
        assert!(matches!(mse_loss(&tape, p, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        let target = LabelTensor::new(&[1], vec![2]).unwrap();
        let l = scalar(&tape, cross_entropy(&tape, logits, &target).unwrap());
        assert!((l - 4f64.ln()).abs() < 1e-15);

        let mut sat = Tensor::zeros(&[1, 4]);
        sat.set(&[0, 2], 30.0);
        let l = scalar(&tape, cross_entropy(&tape, tape.constant(sat), &target).unwrap());
        assert!(l < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 3, 2]));
        let oob = LabelTensor::new(&[2, 2], vec![0, 1, 3, 0]).unwrap();
        assert!(matches!(cross_entropy(&tape, logits, &oob), Err(Error::Data(_))));
        let wrong = LabelTensor::new(&[2, 3], vec![0; 6]).unwrap();
        assert!(matches!(cross_entropy(&tape, logits, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn combine_examples() {
        let tape = Tape::new();
        let two = tape.constant(Tensor::scalar(2.0));
        let four = tape.constant(Tensor::scalar(4.0));
        let per: BTreeMap<_, _> = [(Task::Inpainting, two), (Task::Jigsaw, four)].into();

        let single = TaskLossSpec::uniform(&[Task::Jigsaw]);
        assert_eq!(scalar(&tape, combine_losses(&tape, &per, &single).unwrap()), 4.0);

        let half = TaskLossSpec::new([(Task::Inpainting, 0.5), (Task::Jigsaw, 0.5)].into()).unwrap();
        assert_eq!(scalar(&tape, combine_losses(&tape, &per, &half).unwrap()), 3.0);

        let zeroed = TaskLossSpec::new([(Task::Inpainting, 0.0), (Task::Jigsaw, 1.0)].into()).unwrap();
        assert_eq!(scalar(&tape, combine_losses(&tape, &per, &zeroed).unwrap()), 4.0);

        let missing = TaskLossSpec::uniform(&[Task::Segmentation]);
        assert!(matches!(combine_losses(&tape, &per, &missing), Err(Error::Config(_))));
        assert!(TaskLossSpec::new([(Task::Jigsaw, -1.0)].into()).is_err());
    }

    fn naive_ce(logits: &Tensor, target: &LabelTensor) -> f64 {
        let s = logits.shape();
        let (n, k) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let mut total = 0.0;
        for b in 0..n {
            for q in 0..inner {
                let at = |c: usize| logits.data()[(b * k + c) * inner + q];
                let probs: Vec<f64> = (0..k).map(|c| at(c).exp()).collect();
                let z: f64 = probs.iter().sum();
                let t = target.data()[b * inner + q];
                total -= (probs[t] / z).ln();
            }
        }
        total / (n * inner) as f64
    }

    #[test]
    fn cross_entropy_matches_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        for seed in 0..20 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::from_fn(&[2, 3, 2, 2], |_| rng.gen_range(-3.0..3.0));
            let labels = LabelTensor::new(&[2, 2, 2], (0..8).map(|_| rng.gen_range(0..3)).collect()).unwrap();
            let tape = Tape::new();
            let l = scalar(&tape, cross_entropy(&tape, tape.constant(logits.clone()), &labels).unwrap());
            assert!((l - naive_ce(&logits, &labels)).abs() < 1e-10);

            let shifted = logits.map(|v| v + 17.5);
            let ls = scalar(&tape, cross_entropy(&tape, tape.constant(shifted), &labels).unwrap());
            assert!((l - ls).abs() < 1e-10);
        }
    }

    #[test]
    fn combined_gradient_is_weighted_sum() {
        let x0 = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let grad_of = |wa: f64, wb: f64| {
            let tape = Tape::new();
            let x = tape.param(x0.clone());
            let t = tape.constant(Tensor::from_vec(vec![1.0, 1.0, 1.0]));
            let a = mse_loss(&tape, x, t).unwrap();
            let sq = tape.square(x).unwrap();
            let b = tape.sum(sq).unwrap();
            let per: BTreeMap<_, _> = [(Task::Inpainting, a), (Task::Denoising, b)].into();
            let spec = TaskLossSpec::new([(Task::Inpainting, wa), (Task::Denoising, wb)].into()).unwrap();
            let total = combine_losses(&tape, &per, &spec).unwrap();
            tape.backward(total).unwrap();
            tape.grad(x).unwrap().unwrap()
        };
        let ga = grad_of(1.0, 0.0);
        let gb = grad_of(0.0, 1.0);
        let g = grad_of(0.3, 2.0);
        for i in 0..3 {
            let want = 0.3 * ga.data()[i] + 2.0 * gb.data()[i];
            assert!((g.data()[i] - want).abs() < 1e-12);
        }
    }
}
