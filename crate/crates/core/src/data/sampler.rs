//! Labeled/unlabeled batch assembly.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::Dataset;
use crate::error::{Error, Result};
use crate::pretext::{make_segmentation, PretextContext, PretextSample};
use crate::task::Task;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchConfig {
    pub labeled: usize,
    pub unlabeled: usize,
    /// Pretext tasks applied to every unlabeled entry.
    pub pretext_tasks: Vec<Task>,
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labeled + self.unlabeled == 0 {
            return Err(Error::config("batch sizes b_l + b_u must be >= 1"));
        }
        if let Some(t) = self.pretext_tasks.iter().find(|t| !t.is_pretext()) {
            return Err(Error::config(format!("{t} is not a pretext task")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub labeled: Vec<PretextSample>,
    pub unlabeled: BTreeMap<Task, Vec<PretextSample>>,
}

impl Batch {
    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty() && self.unlabeled.values().all(Vec::is_empty)
    }
}

fn check_pools(ds: &Dataset, cfg: &BatchConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    cfg.validate()?;
    let lab = ds.labeled_pool();
    let unl = ds.unlabeled_pool();
    if cfg.labeled > 0 && lab.is_empty() {
        return Err(Error::config("batch wants labeled samples but the dataset has no labeled train entries"));
    }
    if cfg.unlabeled > 0 && unl.is_empty() {
        return Err(Error::config("batch wants unlabeled samples but the dataset has no unlabeled train entries"));
    }
    Ok((lab, unl))
}

/// `count` draws from `pool`: without replacement when the pool is big
/// enough, with replacement otherwise.
fn draw(pool: &[usize], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if count <= pool.len() {
        index::sample(rng, pool.len(), count).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..count).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

fn assemble(
    ds: &Dataset,
    labeled: &[usize],
    unlabeled: &[usize],
    cfg: &BatchConfig,
    ctx: &PretextContext,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let mut batch = Batch::default();
    for &i in labeled {
        let mask = ds.mask(i).expect("labeled pool entries carry a mask");
        batch.labeled.push(make_segmentation(ds.image(i), mask, ds.nb_classes())?);
    }
    if !unlabeled.is_empty() {
        for &task in &cfg.pretext_tasks {
            let samples = unlabeled
                .iter()
                .map(|&i| ctx.transform(task, ds.image(i), rng))
                .collect::<Result<Vec<_>>>()?;
            batch.unlabeled.insert(task, samples);
        }
    }
    Ok(batch)
}

/// One batch drawn from `rng`.
pub fn sample_batch(ds: &Dataset, cfg: &BatchConfig, ctx: &PretextContext, rng: &mut impl Rng) -> Result<Batch> {
    let (lab, unl) = check_pools(ds, cfg)?;
    let l = if cfg.labeled > 0 { draw(&lab, cfg.labeled, rng) } else { Vec::new() };
    let u = if cfg.unlabeled > 0 { draw(&unl, cfg.unlabeled, rng) } else { Vec::new() };
    assemble(ds, &l, &u, cfg, ctx, rng)
}

const LABELED_STREAM: u64 = 1 << 56;
const UNLABELED_STREAM: u64 = 2 << 56;
const STEP_STREAM: u64 = 3 << 56;

/// Epoch-style sampler: each pool is walked through successive seeded
/// shuffles, so every entry is seen once per pass. The batch for step `t`
/// depends only on (seed, t), which makes resuming a run a matter of
/// knowing the step count.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    cfg: BatchConfig,
    seed: u64,
    labeled_pool: Vec<usize>,
    unlabeled_pool: Vec<usize>,
    train_len: usize,
}

impl BatchSampler {
    pub fn new(ds: &Dataset, cfg: BatchConfig, seed: u64) -> Result<Self> {
        let (labeled_pool, unlabeled_pool) = check_pools(ds, &cfg)?;
        Ok(BatchSampler {
            cfg,
            seed,
            labeled_pool,
            unlabeled_pool,
            train_len: ds.labeled_pool().len() + ds.unlabeled_pool().len(),
        })
    }

    pub fn config(&self) -> &BatchConfig {
        &self.cfg
    }

    /// `ceil(|train| / max(b_l, b_u))`, raised if needed so each active
    /// pool is fully visited.
    pub fn steps_per_epoch(&self) -> usize {
        let b = self.cfg.labeled.max(self.cfg.unlabeled);
        let mut steps = self.train_len.div_ceil(b);
        if self.cfg.labeled > 0 {
            steps = steps.max(self.labeled_pool.len().div_ceil(self.cfg.labeled));
        }
        if self.cfg.unlabeled > 0 {
            steps = steps.max(self.unlabeled_pool.len().div_ceil(self.cfg.unlabeled));
        }
        steps.max(1)
    }

    fn walk(&self, pool: &[usize], per_step: usize, step: u64, stream: u64) -> Vec<usize> {
        let n = pool.len() as u64;
        let start = step * per_step as u64;
        let mut out = Vec::with_capacity(per_step);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for k in start..start + per_step as u64 {
            let (cycle, pos) = (k / n, (k % n) as usize);
            if cached.as_ref().is_none_or(|(c, _)| *c != cycle) {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(stream | cycle);
                let mut order = pool.to_vec();
                order.shuffle(&mut rng);
                cached = Some((cycle, order));
            }
            out.push(cached.as_ref().unwrap().1[pos]);
        }
        out
    }

    /// Dataset indices used at `step`: (labeled, unlabeled).
    pub fn indices(&self, step: u64) -> (Vec<usize>, Vec<usize>) {
        let l = if self.cfg.labeled > 0 {
            self.walk(&self.labeled_pool, self.cfg.labeled, step, LABELED_STREAM)
        } else {
            Vec::new()
        };
        let u = if self.cfg.unlabeled > 0 {
            self.walk(&self.unlabeled_pool, self.cfg.unlabeled, step, UNLABELED_STREAM)
        } else {
            Vec::new()
        };
        (l, u)
    }

    pub fn batch(&self, ds: &Dataset, ctx: &PretextContext, step: u64) -> Result<Batch> {
        let (l, u) = self.indices(step);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(STEP_STREAM | step);
        assemble(ds, &l, &u, &self.cfg, ctx, &mut rng)
    }
}
