use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segpretext::data::{generate_synthetic, read_pgm, read_ppm, write_pgm, write_ppm, Dataset, Split, SyntheticConfig};
use segpretext::metrics::report_csv;
use segpretext::nn::NormKind;
use segpretext::pretext::{
    build_catalogue, make_segmentation, ColorPalette, Meta, PretextConfig, PretextContext, Target,
};
use segpretext::train::{evaluate, load_checkpoint, CombineMode, TrainConfig, Trainer};
use segpretext::{Error, Task};

/// Semi-supervised segmentation with self-supervised pretext tasks.
#[derive(Parser)]
#[command(name = "segpretext", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData(GenData),
    /// Train a model and write the per-epoch report.
    Train(Box<Train>),
    /// Evaluate a checkpoint's segmentation head on a split.
    Eval(Eval),
    /// Write one pretext (input, target) pair for inspection.
    Transform(Transform),
    /// Print a jigsaw permutation catalogue.
    Perms(Perms),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    labeled_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 3)]
    max_shapes: usize,
}

#[derive(Args)]
struct Train {
    /// TOML config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a checkpoint here when training ends.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Start from the weights of this checkpoint (fine-tuning).
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue an interrupted run from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    eval_threads: Option<usize>,

    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    mode: Option<CombineMode>,
    /// Comma-separated task list.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<Task>>,
    /// Loss weight as task=value; repeatable.
    #[arg(long = "weight", value_parser = parse_weight)]
    weights: Vec<(Task, f64)>,

    #[arg(long)]
    batch_labeled: Option<usize>,
    #[arg(long)]
    batch_unlabeled: Option<usize>,

    #[arg(long)]
    norm: Option<NormKind>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    encoder_channels: Option<Vec<usize>>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    norm_momentum: Option<f64>,
    #[arg(long)]
    switch_shared: Option<bool>,

    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    decay_gamma: Option<f64>,
    #[arg(long)]
    decay_step: Option<u64>,

    #[arg(long)]
    inpaint_side: Option<usize>,
    #[arg(long)]
    inpaint_fill: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    palette_size: Option<usize>,
    #[arg(long)]
    lattice_bins: Option<usize>,
    #[arg(long)]
    jigsaw_grid: Option<usize>,
    #[arg(long)]
    jigsaw_count: Option<usize>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    /// CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Transform {
    #[arg(long)]
    task: Task,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Label mask, required for segmentation.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Args)]
struct Perms {
    #[arg(long, default_value_t = 3)]
    grid: usize,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_weight(s: &str) -> Result<(Task, f64), String> {
    let (t, w) = s.split_once('=').ok_or("expected task=value")?;
    let task = t.parse::<Task>().map_err(|e| e.to_string())?;
    let w = w.parse::<f64>().map_err(|e| e.to_string())?;
    Ok((task, w))
}

fn write_text(path: &Path, text: &str) -> segpretext::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn emit(out: Option<&Path>, text: &str) -> segpretext::Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(a: GenData) -> segpretext::Result<()> {
    let cfg = SyntheticConfig {
        nb_classes: a.classes,
        height: a.size,
        width: a.size,
        val_fraction: a.val_fraction,
        labeled_fraction: a.labeled_fraction,
        max_shapes: a.max_shapes,
    };
    let m = generate_synthetic(&a.out, a.n, &cfg, a.seed)?;
    eprintln!(
        "wrote {} images ({} train, {} labeled, {} val) to {}",
        m.entries.len(),
        m.count(Split::Train, None),
        m.count(Split::Train, Some(true)),
        m.count(Split::Val, None),
        a.out.display()
    );
    Ok(())
}

fn train_config(a: &Train) -> segpretext::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { cfg.$($field).+ = v; })*
        };
    }
    set! {
        data => data, seed => seed, epochs => epochs, eval_every => eval_every, mode => mode,
        tasks => tasks, batch_labeled => batch.labeled, batch_unlabeled => batch.unlabeled,
        norm => model.norm, groups => model.groups, encoder_channels => model.encoder_channels,
        eps => model.eps, norm_momentum => model.norm_momentum, switch_shared => model.switch_shared,
        lr0 => optim.lr0, momentum => optim.momentum, decay_gamma => optim.decay_gamma,
        decay_step => optim.decay_step, inpaint_fill => pretext.inpaint_fill,
        noise_sigma => pretext.noise_sigma, palette_size => pretext.palette_size,
        lattice_bins => pretext.lattice_bins, jigsaw_grid => pretext.jigsaw_grid,
        jigsaw_count => pretext.jigsaw_count,
    }
    if a.steps_per_epoch.is_some() {
        cfg.steps_per_epoch = a.steps_per_epoch;
    }
    if a.inpaint_side.is_some() {
        cfg.pretext.inpaint_side = a.inpaint_side;
    }
    cfg.weights.extend(a.weights.iter().copied());
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: Train) -> segpretext::Result<()> {
    let cfg = train_config(&a)?;
    if !cfg.data.join("manifest.json").exists() {
        return Err(Error::Io {
            path: cfg.data.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset manifest not found"),
        });
    }
    let mut trainer = Trainer::new(cfg)?;
    if let Some(n) = a.eval_threads {
        trainer.set_eval_threads(n);
    }
    if let Some(p) = &a.init {
        let n = trainer.init_from(p)?;
        eprintln!("initialised {n} tensors from {}", p.display());
    }
    if let Some(p) = &a.resume {
        trainer.resume(p)?;
        eprintln!("resumed at step {}", trainer.step_count());
    }
    let total = trainer.config().epochs;
    while trainer.epochs_done() < total {
        let row = trainer.run_epoch()?;
        let mut line = format!("epoch {}/{total} lr {}", row.epoch, row.lr);
        for (t, l) in &row.losses {
            if let Some(l) = l {
                write!(line, " {t} {l:.4}").unwrap();
            }
        }
        if let Some(m) = row.val_miou {
            write!(line, " val_miou {m:.4}").unwrap();
        }
        eprintln!("{line}");
    }
    emit(a.out.as_deref(), &trainer.report().to_csv())?;
    if let Some(p) = &a.save {
        trainer.save(p)?;
    }
    Ok(())
}

fn eval(a: Eval) -> segpretext::Result<()> {
    let (model, _) = load_checkpoint(&a.model)?;
    let ds = Dataset::open(&a.data)?;
    if ds.nb_classes() != model.config().nb_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model predicts {}",
            ds.nb_classes(),
            model.config().nb_classes
        )));
    }
    let res = evaluate(&model, &ds, a.split)?;
    emit(a.out.as_deref(), &report_csv(&res.confusion)?)
}

fn transform(a: Transform) -> segpretext::Result<()> {
    let img = read_ppm(&a.input)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let mut cfg = PretextConfig::default();
    if let Some(g) = a.grid {
        cfg.jigsaw_grid = g;
    }
    if let Some(c) = a.count {
        cfg.jigsaw_count = c;
    }
    if let Some(s) = a.sigma {
        cfg.noise_sigma = s;
    }
    cfg.inpaint_side = a.side.or(cfg.inpaint_side);
    let mut ctx = PretextContext::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);

    let sample = if a.task == Task::Segmentation {
        let path = a
            .mask
            .as_ref()
            .ok_or_else(|| Error::Config("segmentation needs --mask".into()))?;
        make_segmentation(&img, &read_pgm(path)?, a.classes)?
    } else {
        ctx.prepare(&[a.task], &[&img], a.seed)?;
        ctx.transform(a.task, &img, &mut rng)?
    };

    let input = if sample.input.shape()[0] == 1 {
        let s = sample.input.shape();
        let plane = sample.input.data();
        segpretext::Tensor::from_fn(&[3, s[1], s[2]], |i| plane[i % plane.len()])
    } else {
        sample.input.clone()
    };
    write_ppm(a.out.join("input.ppm"), &input)?;
    match &sample.target {
        Target::Image(t) => write_ppm(a.out.join("target.ppm"), t)?,
        Target::Labels(l) if a.task == Task::Jigsaw => {
            let text: Vec<String> = l.data().iter().map(usize::to_string).collect();
            write_text(&a.out.join("target.txt"), &(text.join(" ") + "\n"))?;
        }
        Target::Labels(l) => write_pgm(a.out.join("target.pgm"), l)?,
    }
    let meta = match &sample.meta {
        Meta::Inpainting { top, left, side } => format!("top {top}\nleft {left}\nside {side}\n"),
        Meta::Denoising { noise_seed, sigma } => format!("noise_seed {noise_seed}\nsigma {sigma}\n"),
        Meta::Jigsaw { perm_index, .. } => format!("perm_index {perm_index}\n"),
        Meta::Colorization => {
            let p: &ColorPalette = ctx.palette.as_ref().expect("palette was prepared");
            let mut s = String::new();
            for k in 0..p.len() {
                let [r, g, b] = p.centroid(k);
                writeln!(s, "class {k} {r} {g} {b}").unwrap();
            }
            s
        }
        Meta::Segmentation => String::new(),
    };
    write_text(&a.out.join("meta.txt"), &format!("task {}\n{meta}", a.task))?;
    Ok(())
}

fn perms(a: Perms) -> segpretext::Result<()> {
    let cat = build_catalogue(a.grid, a.count, a.seed)?;
    let mut out = String::new();
    for p in cat.perms() {
        let row: Vec<String> = p.iter().map(usize::to_string).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
    print!("{out}");
    if let Some(d) = cat.min_pairwise_distance() {
        eprintln!("{} permutations of {} tiles, min Hamming distance {d}", cat.len(), cat.tiles());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::State(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(*a),
        Command::Eval(a) => eval(a),
        Command::Transform(a) => transform(a),
        Command::Perms(a) => perms(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
