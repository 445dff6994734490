//! Semi-supervised multi-task training loop.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod report;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ArchConfig, BatchSizes, CombineMode, TrainConfig};
pub use eval::{evaluate, evaluate_with, EvalResult, SegPredictor};
pub use report::{ReportRow, TrainReport};

use crate::autodiff::{Tape, Var};
use crate::data::{Batch, BatchConfig, BatchSampler, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{combine_losses, cross_entropy, mse_loss, LossKind, TaskLossSpec};
use crate::nn::{build_model, Bound, Mode, Model, StatUpdate};
use crate::optim::{sgd_step, OptimState};
use crate::pretext::{PretextContext, PretextSample};
use crate::task::Task;
use crate::tensor::{LabelTensor, Tensor};

fn samples_for(batch: &Batch, task: Task) -> &[PretextSample] {
    match task {
        Task::Segmentation => &batch.labeled,
        t => batch.unlabeled.get(&t).map_or(&[], Vec::as_slice),
    }
}

fn one_task_loss(
    model: &Model,
    tape: &Tape,
    bound: &Bound,
    task: Task,
    samples: &[PretextSample],
    stats: &mut Vec<StatUpdate>,
) -> Result<Var> {
    let inputs: Vec<Tensor> = samples.iter().map(|s| s.input.clone()).collect();
    let x = tape.constant(Tensor::stack(&inputs)?);
    let out = model.forward(tape, bound, task, x, Mode::Train, stats)?;
    match LossKind::for_task(task) {
        LossKind::Mse => {
            let targets = samples
                .iter()
                .map(|s| s.target.image().cloned().ok_or_else(|| Error::state("expected an image target")))
                .collect::<Result<Vec<_>>>()?;
            mse_loss(tape, out, tape.constant(Tensor::stack(&targets)?))
        }
        LossKind::CrossEntropy => {
            let targets = samples
                .iter()
                .map(|s| s.target.labels().cloned().ok_or_else(|| Error::state("expected a label target")))
                .collect::<Result<Vec<_>>>()?;
            cross_entropy(tape, out, &LabelTensor::stack(&targets)?)
        }
    }
}

/// Loss node per task. Each task's sub-batch runs through the shared
/// encoder once; batch statistics are per sub-batch.
pub fn task_losses(
    model: &Model,
    tape: &Tape,
    bound: &Bound,
    batch: &Batch,
    tasks: impl IntoIterator<Item = Task>,
    stats: &mut Vec<StatUpdate>,
) -> Result<BTreeMap<Task, Var>> {
    let mut out = BTreeMap::new();
    for task in tasks {
        let samples = samples_for(batch, task);
        if samples.is_empty() {
            return Err(Error::config(format!("batch holds no samples for task {task}")));
        }
        let loss = one_task_loss(model, tape, bound, task, samples, stats).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("task {task}: {m}")),
            e => e,
        })?;
        out.insert(task, loss);
    }
    Ok(out)
}

/// Result of differentiating the weighted loss on one batch.
pub struct BatchGradients {
    pub grads: Vec<Tensor>,
    pub losses: BTreeMap<Task, f64>,
    pub stats: Vec<StatUpdate>,
}

pub fn batch_gradients(model: &Model, batch: &Batch, spec: &TaskLossSpec) -> Result<BatchGradients> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let mut stats = Vec::new();
    let per_task = task_losses(model, &tape, &bound, batch, spec.tasks(), &mut stats)?;
    let mut losses = BTreeMap::new();
    for (&t, &v) in &per_task {
        let l = tape.value(v)?.item()?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("task {t}: loss is {l}")));
        }
        losses.insert(t, l);
    }
    let total = combine_losses(&tape, &per_task, spec)?;
    tape.backward(total).map_err(|e| match e {
        Error::NonFinite(m) => {
            let names: Vec<String> = per_task.keys().map(Task::to_string).collect();
            Error::NonFinite(format!("task {} (backward): {m}", names.join("+")))
        }
        e => e,
    })?;
    Ok(BatchGradients {
        grads: model.gradients(&tape, &bound)?,
        losses,
        stats,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub lr: f64,
    pub losses: BTreeMap<Task, f64>,
}

/// Forward, backward, one SGD update and a running-statistics commit. A
/// non-finite value aborts with the step, task and learning rate.
pub fn train_step(model: &mut Model, optim: &mut OptimState, batch: &Batch, spec: &TaskLossSpec) -> Result<StepOutcome> {
    let step = optim.step_count;
    let lr = optim.lr();
    let diag = |e: Error| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("step {step}, lr {lr:?}, {m}")),
        e => e,
    };
    let BatchGradients { mut grads, losses, stats } = batch_gradients(model, batch, spec).map_err(diag)?;
    sgd_step(model.params_mut().iter_mut().map(|p| &mut p.value), &mut grads, optim).map_err(diag)?;
    model.commit_stats(stats);
    Ok(StepOutcome { step, lr, losses })
}

#[derive(Clone, Debug, Default)]
struct EpochAccum {
    sums: BTreeMap<Task, (f64, u64)>,
    lr: Option<f64>,
}

const ACCUM_SUM: &str = "train.epoch_loss_sum.";
const ACCUM_COUNT: &str = "train.epoch_loss_count.";
const ACCUM_LR: &str = "train.epoch_lr";

/// Owns the model, optimizer, data and sampling state of one run.
pub struct Trainer {
    cfg: TrainConfig,
    dataset: Dataset,
    ctx: PretextContext,
    sampler: BatchSampler,
    model: Model,
    optim: OptimState,
    spec: TaskLossSpec,
    report: TrainReport,
    steps_per_epoch: usize,
    accum: EpochAccum,
    eval_threads: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = Dataset::open(&cfg.data)?;
        Self::with_dataset(cfg, dataset)
    }

    pub fn with_dataset(cfg: TrainConfig, dataset: Dataset) -> Result<Self> {
        cfg.validate()?;
        let tasks = cfg.sorted_tasks();
        let model_cfg = cfg.model_config(dataset.nb_classes());
        model_cfg.validate()?;
        let [h, w] = dataset.manifest().image_size;
        let f = model_cfg.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::config(format!(
                "{h}x{w} images are not divisible by the encoder downsampling factor {f}"
            )));
        }
        let g = cfg.pretext.jigsaw_grid;
        if tasks.contains(&Task::Jigsaw) && (h % g != 0 || w % g != 0) {
            return Err(Error::config(format!("{h}x{w} images cannot be cut into a {g}x{g} jigsaw grid")));
        }

        let mut ctx = PretextContext::new(cfg.pretext.clone())?;
        let corpus: Vec<&Tensor> = dataset.indices(Split::Train).into_iter().map(|i| dataset.image(i)).collect();
        ctx.prepare(&tasks, &corpus, cfg.seed)?;

        let batch_cfg = BatchConfig {
            labeled: if tasks.contains(&Task::Segmentation) { cfg.batch.labeled } else { 0 },
            unlabeled: if cfg.pretext_tasks().is_empty() { 0 } else { cfg.batch.unlabeled },
            pretext_tasks: cfg.pretext_tasks(),
        };
        let sampler = BatchSampler::new(&dataset, batch_cfg, cfg.seed)?;
        let steps_per_epoch = cfg.steps_per_epoch.unwrap_or_else(|| sampler.steps_per_epoch());

        let model = build_model(&model_cfg, cfg.seed)?;
        let optim = OptimState::new(cfg.optim, model.params().iter().map(|p| p.value.shape()))?;
        let spec = TaskLossSpec::new(tasks.iter().map(|&t| (t, cfg.weight(t))).collect())?;
        Ok(Trainer {
            report: TrainReport::new(tasks),
            cfg,
            dataset,
            ctx,
            sampler,
            model,
            optim,
            spec,
            steps_per_epoch,
            accum: EpochAccum::default(),
            eval_threads: 1,
        })
    }

    /// Worker threads for validation; results do not depend on it.
    pub fn set_eval_threads(&mut self, n: usize) {
        self.eval_threads = n.max(1);
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn context(&self) -> &PretextContext {
        &self.ctx
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn optim(&self) -> &OptimState {
        &self.optim
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn into_report(self) -> TrainReport {
        self.report
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step_count
    }

    pub fn epochs_done(&self) -> usize {
        (self.optim.step_count / self.steps_per_epoch as u64) as usize
    }

    /// Batch the sampler produces at `step`.
    pub fn batch_at(&self, step: u64) -> Result<Batch> {
        self.sampler.batch(&self.dataset, &self.ctx, step)
    }

    fn step_spec(&self, step: u64) -> TaskLossSpec {
        match self.cfg.mode {
            CombineMode::Sum => self.spec.clone(),
            CombineMode::Alternate => {
                let active: Vec<Task> = self.spec.tasks().filter(|&t| self.spec.weight(t) != Some(0.0)).collect();
                let t = active[(step % active.len() as u64) as usize];
                TaskLossSpec::new([(t, self.spec.weight(t).unwrap())].into()).unwrap()
            }
        }
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let step = self.optim.step_count;
        let batch = self.batch_at(step)?;
        let spec = self.step_spec(step);
        let out = train_step(&mut self.model, &mut self.optim, &batch, &spec)?;
        self.accum.lr.get_or_insert(out.lr);
        for (&t, &l) in &out.losses {
            let e = self.accum.sums.entry(t).or_insert((0.0, 0));
            e.0 += l;
            e.1 += 1;
        }
        Ok(out)
    }

    pub fn validate_now(&self) -> Result<Option<EvalResult>> {
        if !self.model.has_head(Task::Segmentation) || self.dataset.indices(Split::Val).is_empty() {
            return Ok(None);
        }
        evaluate_with(&self.model, &self.dataset, Split::Val, self.eval_threads).map(Some)
    }

    /// Runs to the end of the current epoch and appends its report row.
    pub fn run_epoch(&mut self) -> Result<&ReportRow> {
        let started = Instant::now();
        let spe = self.steps_per_epoch as u64;
        let epoch = self.epochs_done() + 1;
        while self.optim.step_count < epoch as u64 * spe {
            self.step()?;
        }
        let accum = std::mem::take(&mut self.accum);
        let losses = self
            .report
            .tasks
            .iter()
            .map(|&t| (t, accum.sums.get(&t).map(|&(s, n)| s / n as f64)))
            .collect();
        let due = self.cfg.eval_every > 0 && epoch.is_multiple_of(self.cfg.eval_every);
        let eval = if due { self.validate_now()? } else { None };
        self.report.rows.push(ReportRow {
            epoch,
            lr: accum.lr.unwrap_or_else(|| self.cfg.optim.lr_at((epoch as u64 - 1) * spe)),
            losses,
            val_miou: eval.as_ref().map(|e| e.miou),
            val_pixacc: eval.as_ref().map(|e| e.pixel_accuracy),
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(self.report.rows.last().unwrap())
    }

    /// Trains until `epochs` epochs are complete.
    pub fn run(&mut self) -> Result<&TrainReport> {
        while self.epochs_done() < self.cfg.epochs {
            self.run_epoch()?;
        }
        Ok(&self.report)
    }

    /// Checkpoint tensors plus the partial-epoch loss accumulators.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = checkpoint::checkpoint_tensors(&self.model, &self.optim);
        for (t, &(s, n)) in &self.accum.sums {
            tensors.push((format!("{ACCUM_SUM}{t}"), Tensor::scalar(s)));
            tensors.push((format!("{ACCUM_COUNT}{t}"), Tensor::scalar(n as f64)));
        }
        if let Some(lr) = self.accum.lr {
            tensors.push((ACCUM_LR.to_string(), Tensor::scalar(lr)));
        }
        let path = path.as_ref();
        std::fs::write(path, checkpoint::encode_tensors(&tensors)).map_err(|e| Error::io(path, e))
    }

    /// Restores model, optimizer and step from a checkpoint of this same
    /// configuration; the run continues exactly where it stopped.
    pub fn resume(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let map = checkpoint::read_tensors(path)?;
        let model = checkpoint::model_from_tensors(&map)?;
        if model.config() != self.model.config() {
            return Err(Error::config("checkpoint was written for a different model configuration"));
        }
        let optim = checkpoint::optim_from_tensors(&map, &model)?;
        let mut accum = EpochAccum::default();
        for t in &self.report.tasks {
            if let (Some(s), Some(n)) = (map.get(&format!("{ACCUM_SUM}{t}")), map.get(&format!("{ACCUM_COUNT}{t}"))) {
                accum.sums.insert(*t, (s.item()?, n.item()? as u64));
            }
        }
        accum.lr = map.get(ACCUM_LR).map(Tensor::item).transpose()?;
        self.model = model;
        self.optim = optim;
        self.accum = accum;
        Ok(())
    }

    /// Copies matching weights from a checkpoint (for fine-tuning); heads
    /// the checkpoint lacks keep their initialisation. Optimizer state is
    /// not touched.
    pub fn init_from(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let map = checkpoint::read_tensors(path)?;
        self.model.load_state(&map, false)
    }

    pub fn save_model(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.model, &self.optim)
    }
}
