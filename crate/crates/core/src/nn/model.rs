//! Shared convolutional encoder with one head per task.
//!
//! The encoder is a stack of conv → norm → relu blocks; the first keeps the
//! input resolution and every later block halves it. Dense heads mirror the
//! encoder with nearest-neighbour upsampling followed by conv blocks and a
//! final 1x1 projection, so their output matches the input resolution. The
//! jigsaw head pools the encoder output globally and maps it to `T x T`
//! logits laid out as `[N, position class, tile]`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::norm::{self, Affine, BatchMoments, RunningStats, SwitchLogits};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::task::Task;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Layer,
    Instance,
    Group,
    #[default]
    Switchable,
    None,
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "batch" => NormKind::Batch,
            "layer" => NormKind::Layer,
            "instance" => NormKind::Instance,
            "group" => NormKind::Group,
            "switchable" => NormKind::Switchable,
            "none" => NormKind::None,
            _ => return Err(Error::config(format!("unknown norm kind {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub tasks: Vec<Task>,
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub norm: NormKind,
    pub groups: usize,
    pub eps: f64,
    pub norm_momentum: f64,
    /// One switchable logit pair for the whole network instead of one per
    /// norm layer.
    pub switch_shared: bool,
    pub nb_classes: usize,
    pub palette_size: usize,
    pub jigsaw_grid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tasks: vec![Task::Segmentation],
            in_channels: 3,
            encoder_channels: vec![16, 32, 64],
            norm: NormKind::Switchable,
            groups: 4,
            eps: norm::DEFAULT_EPS,
            norm_momentum: norm::DEFAULT_MOMENTUM,
            switch_shared: false,
            nb_classes: 4,
            palette_size: 16,
            jigsaw_grid: 3,
        }
    }
}

impl ModelConfig {
    /// Channels emitted by a dense head.
    pub fn dense_channels(&self, task: Task) -> Option<usize> {
        match task {
            Task::Inpainting | Task::Denoising => Some(3),
            Task::Colorization => Some(self.palette_size),
            Task::Segmentation => Some(self.nb_classes),
            Task::Jigsaw => None,
        }
    }

    /// Each spatial extent must be divisible by this.
    pub fn downsample_factor(&self) -> usize {
        1 << self.encoder_channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("model needs at least one task"));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::config("encoder_channels must be non-empty and positive"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps must be > 0"));
        }
        if self.norm == NormKind::Group {
            if let Some(c) = self.encoder_channels.iter().find(|&&c| self.groups == 0 || c % self.groups != 0) {
                return Err(Error::config(format!(
                    "group count {} does not divide encoder width {c}",
                    self.groups
                )));
            }
        }
        if self.tasks.contains(&Task::Segmentation) && self.nb_classes < 2 {
            return Err(Error::config("nb_classes must be >= 2"));
        }
        if self.tasks.contains(&Task::Colorization) && self.palette_size < 2 {
            return Err(Error::config("palette_size must be >= 2"));
        }
        if self.tasks.contains(&Task::Jigsaw) && self.jigsaw_grid < 2 {
            return Err(Error::config("jigsaw_grid must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// uniform(-b, b), b = sqrt(6 / (fan_in + fan_out))
    Uniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    init: Init,
}

impl Param {
    /// The uniform bound for weight tensors, `None` for constant-initialized
    /// parameters.
    pub fn init_bound(&self) -> Option<f64> {
        match self.init {
            Init::Uniform { fan_in, fan_out } => Some((6.0 / (fan_in + fan_out) as f64).sqrt()),
            _ => None,
        }
    }
}

/// Every learnable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.params.push(Param {
            name,
            value: Tensor::zeros(shape),
            init,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Parameters recorded as tracked leaves on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics produced by a training forward pass, to be folded into
/// running estimates with [`Model::commit_stats`].
#[derive(Clone, Debug)]
pub struct StatUpdate {
    norm: usize,
    moments: BatchMoments,
}

#[derive(Clone, Debug)]
struct NormLayer {
    name: String,
    kind: NormKind,
    gamma: ParamId,
    beta: ParamId,
    switch: Option<(ParamId, ParamId)>,
    running: Option<RunningStats>,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    conv: Conv,
    norm: Option<usize>,
}

#[derive(Clone, Debug)]
enum Head {
    Dense { blocks: Vec<ConvBlock>, out: Conv },
    Jigsaw { weight: ParamId, bias: ParamId, tiles: usize },
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    norms: Vec<NormLayer>,
    encoder: Vec<ConvBlock>,
    heads: BTreeMap<Task, Head>,
    shared_switch: Option<(ParamId, ParamId)>,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    params: ParamStore,
    norms: Vec<NormLayer>,
    shared_switch: Option<(ParamId, ParamId)>,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let weight = self.params.add(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            Init::Uniform {
                fan_in: cin * k * k,
                fan_out: cout * k * k,
            },
        );
        let bias = self.params.add(format!("{name}.bias"), &[cout], Init::Zeros);
        Conv {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    fn switch_logits(&mut self, name: &str) -> (ParamId, ParamId) {
        if self.cfg.switch_shared {
            if let Some(ids) = self.shared_switch {
                return ids;
            }
            let ids = (
                self.params.add("switch.mean_logits".into(), &[3], Init::Zeros),
                self.params.add("switch.var_logits".into(), &[3], Init::Zeros),
            );
            self.shared_switch = Some(ids);
            return ids;
        }
        (
            self.params.add(format!("{name}.mean_logits"), &[3], Init::Zeros),
            self.params.add(format!("{name}.var_logits"), &[3], Init::Zeros),
        )
    }

    fn norm(&mut self, name: &str, channels: usize) -> Result<Option<usize>> {
        let kind = self.cfg.norm;
        if kind == NormKind::None {
            return Ok(None);
        }
        let gamma = self.params.add(format!("{name}.gamma"), &[channels], Init::Ones);
        let beta = self.params.add(format!("{name}.beta"), &[channels], Init::Zeros);
        let switch = (kind == NormKind::Switchable).then(|| self.switch_logits(name));
        let running = match kind {
            NormKind::Batch | NormKind::Switchable => {
                Some(RunningStats::new(channels, self.cfg.norm_momentum)?)
            }
            _ => None,
        };
        self.norms.push(NormLayer {
            name: name.to_string(),
            kind,
            gamma,
            beta,
            switch,
            running,
        });
        Ok(Some(self.norms.len() - 1))
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Result<ConvBlock> {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3, stride);
        let norm = self.norm(&format!("{name}.norm"), cout)?;
        Ok(ConvBlock { conv, norm })
    }
}

/// Builds the model topology for `cfg` and initializes it from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut b = Builder {
        cfg,
        params: ParamStore::default(),
        norms: Vec::new(),
        shared_switch: None,
    };
    let widths = &cfg.encoder_channels;
    let mut encoder = Vec::with_capacity(widths.len());
    let mut cin = cfg.in_channels;
    for (i, &cout) in widths.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        encoder.push(b.block(&format!("encoder.{i}"), cin, cout, stride)?);
        cin = cout;
    }
    let deepest = *widths.last().expect("validated non-empty");

    let mut tasks = cfg.tasks.clone();
    tasks.sort();
    tasks.dedup();
    let mut heads = BTreeMap::new();
    for task in tasks {
        let prefix = format!("heads.{task}");
        let head = match cfg.dense_channels(task) {
            Some(out_channels) => {
                let mut blocks = Vec::new();
                for i in (0..widths.len() - 1).rev() {
                    let up = widths.len() - 2 - i;
                    blocks.push(b.block(&format!("{prefix}.up{up}"), widths[i + 1], widths[i], 1)?);
                }
                let out = b.conv(&format!("{prefix}.out"), widths[0], out_channels, 1, 1);
                Head::Dense { blocks, out }
            }
            None => {
                let tiles = cfg.jigsaw_grid * cfg.jigsaw_grid;
                let weight = b.params.add(
                    format!("{prefix}.linear.weight"),
                    &[deepest, tiles * tiles],
                    Init::Uniform {
                        fan_in: deepest,
                        fan_out: tiles * tiles,
                    },
                );
                let bias = b.params.add(format!("{prefix}.linear.bias"), &[tiles * tiles], Init::Zeros);
                Head::Jigsaw { weight, bias, tiles }
            }
        };
        heads.insert(task, head);
    }
    let mut model = Model {
        config: cfg.clone(),
        params: b.params,
        norms: b.norms,
        encoder,
        heads,
        shared_switch: b.shared_switch,
    };
    model.init_params(seed);
    Ok(model)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tasks(&self) -> impl Iterator<Item = Task> + '_ {
        self.heads.keys().copied()
    }

    pub fn has_head(&self, task: Task) -> bool {
        self.heads.contains_key(&task)
    }

    /// Re-draws every parameter: weights uniform in (-b, b) with
    /// b = sqrt(6 / (fan_in + fan_out)), scales 1, shifts/biases/logits 0.
    /// Running statistics are reset to mean 0, variance 1.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.iter_mut() {
            let bound = p.init_bound();
            match (p.init, bound) {
                (Init::Uniform { .. }, Some(b)) => {
                    for v in p.value.data_mut() {
                        *v = loop {
                            let x = rng.gen_range(-b..b);
                            if x != -b {
                                break x;
                            }
                        };
                    }
                }
                (Init::Ones, _) => p.value.data_mut().fill(1.0),
                _ => p.value.data_mut().fill(0.0),
            }
        }
        for n in &mut self.norms {
            if let Some(r) = &mut n.running {
                r.mean.data_mut().fill(0.0);
                r.var.data_mut().fill(1.0);
            }
        }
    }

    /// Parameter ids owned by the shared encoder (including a shared
    /// switchable logit pair).
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for blk in &self.encoder {
            self.block_param_ids(blk, &mut ids);
        }
        if let Some((a, b)) = self.shared_switch {
            ids.retain(|&i| i != a && i != b);
        }
        ids
    }

    /// Parameter ids owned by one head.
    pub fn head_param_ids(&self, task: Task) -> Option<Vec<ParamId>> {
        let mut ids = Vec::new();
        match self.heads.get(&task)? {
            Head::Dense { blocks, out } => {
                for blk in blocks {
                    self.block_param_ids(blk, &mut ids);
                }
                ids.extend([out.weight, out.bias]);
            }
            Head::Jigsaw { weight, bias, .. } => ids.extend([*weight, *bias]),
        }
        if let Some((a, b)) = self.shared_switch {
            ids.retain(|&i| i != a && i != b);
        }
        Some(ids)
    }

    fn block_param_ids(&self, blk: &ConvBlock, ids: &mut Vec<ParamId>) {
        ids.extend([blk.conv.weight, blk.conv.bias]);
        if let Some(n) = blk.norm {
            let layer = &self.norms[n];
            ids.extend([layer.gamma, layer.beta]);
            if let Some((a, b)) = layer.switch {
                ids.extend([a, b]);
            }
        }
    }

    /// Records every parameter on `tape` as a tracked leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    /// Gradients for every parameter after `tape.backward`, in store order.
    pub fn gradients(&self, tape: &Tape, bound: &Bound) -> Result<Vec<Tensor>> {
        bound
            .vars
            .iter()
            .map(|&v| {
                tape.grad(v)?
                    .ok_or_else(|| Error::state("parameter leaf lost its gradient"))
            })
            .collect()
    }

    fn apply_norm(
        &self,
        tape: &Tape,
        bound: &Bound,
        idx: usize,
        x: Var,
        mode: Mode,
        stats: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let layer = &self.norms[idx];
        let affine = Affine {
            gamma: bound.var(layer.gamma),
            beta: bound.var(layer.beta),
        };
        let eps = self.config.eps;
        let training = mode == Mode::Train;
        let (y, moments) = match layer.kind {
            NormKind::Batch => norm::batch_norm(
                tape,
                x,
                affine,
                eps,
                layer.running.as_ref().expect("batch norm keeps running stats"),
                training,
            )?,
            NormKind::Switchable => {
                let (m, v) = layer.switch.expect("switchable norm has logits");
                norm::switchable_norm(
                    tape,
                    x,
                    affine,
                    SwitchLogits {
                        mean: bound.var(m),
                        var: bound.var(v),
                    },
                    eps,
                    layer.running.as_ref().expect("switchable norm keeps running stats"),
                    training,
                )?
            }
            NormKind::Layer => (norm::layer_norm(tape, x, affine, eps)?, None),
            NormKind::Instance => (norm::instance_norm(tape, x, affine, eps)?, None),
            NormKind::Group => (norm::group_norm(tape, x, affine, self.config.groups, eps)?, None),
            NormKind::None => unreachable!("no layer is built for NormKind::None"),
        };
        if let Some(moments) = moments {
            stats.push(StatUpdate { norm: idx, moments });
        }
        Ok(y)
    }

    fn conv(&self, tape: &Tape, bound: &Bound, c: &Conv, x: Var) -> Result<Var> {
        tape.conv2d(x, bound.var(c.weight), bound.var(c.bias), c.stride, c.pad)
    }

    fn block(
        &self,
        tape: &Tape,
        bound: &Bound,
        blk: &ConvBlock,
        x: Var,
        mode: Mode,
        stats: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let mut y = self.conv(tape, bound, &blk.conv, x)?;
        if let Some(n) = blk.norm {
            y = self.apply_norm(tape, bound, n, y, mode, stats)?;
        }
        tape.relu(y)
    }

    /// Shared encoder. Single-channel input is replicated across the
    /// configured input channels.
    pub fn encode(
        &self,
        tape: &Tape,
        bound: &Bound,
        x: Var,
        mode: Mode,
        stats: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let shape = tape.shape(x)?;
        if shape.len() != 4 {
            return Err(Error::shape(format!("model input must be [N,C,H,W], got {shape:?}")));
        }
        let f = self.config.downsample_factor();
        if shape[2] % f != 0 || shape[3] % f != 0 {
            return Err(Error::shape(format!(
                "input {}x{} is not divisible by the encoder downsampling factor {f}",
                shape[2], shape[3]
            )));
        }
        let mut h = x;
        let cin = self.config.in_channels;
        if shape[1] == 1 && cin > 1 {
            let zeros = tape.constant(Tensor::zeros(&[1, cin, 1, 1]));
            h = tape.add(h, zeros)?;
        }
        for blk in &self.encoder {
            h = self.block(tape, bound, blk, h, mode, stats)?;
        }
        Ok(h)
    }

    /// Runs one head on encoder features.
    pub fn decode(
        &self,
        tape: &Tape,
        bound: &Bound,
        task: Task,
        features: Var,
        mode: Mode,
        stats: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let head = self
            .heads
            .get(&task)
            .ok_or_else(|| Error::config(format!("model has no {task} head")))?;
        match head {
            Head::Dense { blocks, out } => {
                let mut h = features;
                for blk in blocks {
                    h = tape.upsample_nearest(h, 2)?;
                    h = self.block(tape, bound, blk, h, mode, stats)?;
                }
                self.conv(tape, bound, out, h)
            }
            Head::Jigsaw { weight, bias, tiles } => {
                let n = tape.shape(features)?[0];
                let pooled = tape.global_avg_pool(features)?;
                let logits = tape.linear(pooled, bound.var(*weight), bound.var(*bias))?;
                tape.reshape(logits, &[n, *tiles, *tiles])
            }
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        task: Task,
        x: Var,
        mode: Mode,
        stats: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let features = self.encode(tape, bound, x, mode, stats)?;
        self.decode(tape, bound, task, features, mode, stats)
    }

    /// Evaluation-mode forward pass on a fresh tape.
    pub fn predict(&self, task: Task, input: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = Bound {
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        };
        let x = tape.constant(input.clone());
        let mut stats = Vec::new();
        let y = self.forward(&tape, &bound, task, x, Mode::Eval, &mut stats)?;
        tape.value(y)
    }

    pub fn commit_stats(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            if let Some(r) = &mut self.norms[u.norm].running {
                r.update(&u.moments.mean, &u.moments.var);
            }
        }
    }

    /// All persistent tensors by name: parameters then running statistics.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for n in &self.norms {
            if let Some(r) = &n.running {
                out.push((format!("{}.running_mean", n.name), r.mean.clone()));
                out.push((format!("{}.running_var", n.name), r.var.clone()));
            }
        }
        out
    }

    /// Restores tensors by name. With `strict`, every model tensor must be
    /// present; otherwise missing names keep their current values. Names the
    /// model does not know are ignored.
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, strict: bool) -> Result<usize> {
        let mut loaded = 0;
        let mut restore = |name: &str, slot: &mut Tensor| -> Result<()> {
            match state.get(name) {
                Some(t) if t.shape() == slot.shape() => {
                    *slot = t.clone();
                    loaded += 1;
                    Ok(())
                }
                Some(t) => Err(Error::shape(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                ))),
                None if strict => Err(Error::data(format!("checkpoint is missing tensor {name}"))),
                None => Ok(()),
            }
        };
        for p in self.params.iter_mut() {
            restore(&p.name, &mut p.value)?;
        }
        for n in &mut self.norms {
            if let Some(r) = &mut n.running {
                restore(&format!("{}.running_mean", n.name), &mut r.mean)?;
                restore(&format!("{}.running_var", n.name), &mut r.var)?;
            }
        }
        Ok(loaded)
    }
}
