//! Pretext transforms: each turns an unlabeled RGB image into an
//! (input, target) pair. All randomness comes from the caller's rng, so a
//! transform is a pure function of (image, rng state, config).

pub mod catalogue;
pub mod palette;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use catalogue::{build_catalogue, hamming, PermutationCatalogue};
pub use palette::ColorPalette;

use crate::error::{Error, Result};
use crate::task::Task;
use crate::tensor::{LabelTensor, Tensor};
use palette::check_rgb;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretextConfig {
    /// Erase square side; `None` means a quarter of the shorter image side.
    pub inpaint_side: Option<usize>,
    pub inpaint_fill: f64,
    pub noise_sigma: f64,
    pub palette_size: usize,
    pub lattice_bins: usize,
    pub jigsaw_grid: usize,
    pub jigsaw_count: usize,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            inpaint_side: None,
            inpaint_fill: 0.5,
            noise_sigma: 0.1,
            palette_size: 16,
            lattice_bins: palette::DEFAULT_LATTICE_BINS,
            jigsaw_grid: 3,
            jigsaw_count: 64,
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.inpaint_fill) {
            return Err(Error::config("inpaint_fill must lie in [0,1]"));
        }
        if self.inpaint_side == Some(0) {
            return Err(Error::config("inpaint_side must be >= 1"));
        }
        if self.jigsaw_grid == 0 || self.jigsaw_count == 0 {
            return Err(Error::config("jigsaw grid and count must be >= 1"));
        }
        Ok(())
    }

    pub fn side_for(&self, h: usize, w: usize) -> usize {
        self.inpaint_side.unwrap_or((h.min(w) / 4).max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Image(Tensor),
    Labels(LabelTensor),
}

impl Target {
    pub fn image(&self) -> Option<&Tensor> {
        match self {
            Target::Image(t) => Some(t),
            Target::Labels(_) => None,
        }
    }

    pub fn labels(&self) -> Option<&LabelTensor> {
        match self {
            Target::Labels(l) => Some(l),
            Target::Image(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Meta {
    Inpainting { top: usize, left: usize, side: usize },
    Denoising { noise_seed: u64, sigma: f64 },
    Colorization,
    Jigsaw { perm_index: usize, perm: Vec<usize> },
    Segmentation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretextSample {
    pub task: Task,
    pub input: Tensor,
    pub target: Target,
    pub meta: Meta,
}

fn check_image(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("expected an image [C,H,W], got {:?}", img.shape()))),
    }
}

/// Copy of `img` with a `side`×`side` square, placed uniformly at random,
/// set to `fill`.
pub fn make_inpainting(img: &Tensor, side: usize, fill: f64, rng: &mut impl Rng) -> Result<PretextSample> {
    let (c, h, w) = check_image(img)?;
    if side == 0 || side > h || side > w {
        return Err(Error::param(format!("erase square side {side} does not fit a {h}x{w} image")));
    }
    let top = rng.gen_range(0..=h - side);
    let left = rng.gen_range(0..=w - side);
    let mut input = img.clone();
    let d = input.data_mut();
    for ch in 0..c {
        for y in top..top + side {
            let row = (ch * h + y) * w;
            d[row + left..row + left + side].fill(fill);
        }
    }
    Ok(PretextSample {
        task: Task::Inpainting,
        input,
        target: Target::Image(img.clone()),
        meta: Meta::Inpainting { top, left, side },
    })
}

/// Zero-mean gaussian field of standard deviation `sigma`, replayable from
/// `noise_seed`.
pub fn noise_field(shape: &[usize], sigma: f64, noise_seed: u64) -> Result<Tensor> {
    if sigma == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::param(format!("noise sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    Ok(Tensor::from_fn(shape, |_| dist.sample(&mut rng)))
}

/// `clamp(img + N(0, sigma^2), 0, 1)`; the target is `img` itself.
pub fn make_denoising(img: &Tensor, sigma: f64, rng: &mut impl Rng) -> Result<PretextSample> {
    check_image(img)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let noise_seed: u64 = rng.gen();
    let noise = noise_field(img.shape(), sigma, noise_seed)?;
    let data = img
        .data()
        .iter()
        .zip(noise.data())
        .map(|(x, n)| (x + n).clamp(0.0, 1.0))
        .collect();
    Ok(PretextSample {
        task: Task::Denoising,
        input: Tensor::new(img.shape(), data)?,
        target: Target::Image(img.clone()),
        meta: Meta::Denoising { noise_seed, sigma },
    })
}

/// `0.299 R + 0.587 G + 0.114 B` as a `[1,H,W]` image.
pub fn luminance(img: &Tensor) -> Result<Tensor> {
    let plane = check_rgb(img)?;
    let d = img.data();
    let y = (0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .collect();
    let s = img.shape();
    Tensor::new(&[1, s[1], s[2]], y)
}

/// Grayscale input, palette class map target.
pub fn make_colorization(img: &Tensor, palette: Option<&ColorPalette>) -> Result<PretextSample> {
    let palette = palette.ok_or_else(|| Error::state("colorization palette has not been built"))?;
    Ok(PretextSample {
        task: Task::Colorization,
        input: luminance(img)?,
        target: Target::Labels(palette.quantize(img)?),
        meta: Meta::Colorization,
    })
}

/// Rearranges tiles so that output position `i` holds source tile `perm[i]`.
pub fn apply_tile_permutation(img: &Tensor, grid: usize, perm: &[usize]) -> Result<Tensor> {
    let (c, h, w) = check_image(img)?;
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::param(format!("{h}x{w} image is not divisible into a {grid}x{grid} grid")));
    }
    let t = grid * grid;
    let mut seen = vec![false; t];
    if perm.len() != t || perm.iter().any(|&p| p >= t || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::param(format!("{perm:?} is not a permutation of 0..{t}")));
    }
    let (th, tw) = (h / grid, w / grid);
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for (pos, &from) in perm.iter().enumerate() {
        let (py, px) = (pos / grid * th, pos % grid * tw);
        let (sy, sx) = (from / grid * th, from % grid * tw);
        for ch in 0..c {
            for y in 0..th {
                let o = (ch * h + py + y) * w + px;
                let s = (ch * h + sy + y) * w + sx;
                out[o..o + tw].copy_from_slice(&src[s..s + tw]);
            }
        }
    }
    Tensor::new(img.shape(), out)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Shuffled image; the target for tile position `i` is the source tile it
/// came from.
pub fn make_jigsaw(img: &Tensor, cat: &PermutationCatalogue, rng: &mut impl Rng) -> Result<PretextSample> {
    if cat.is_empty() {
        return Err(Error::param("empty permutation catalogue"));
    }
    let perm_index = rng.gen_range(0..cat.len());
    let perm = cat.get(perm_index).unwrap().to_vec();
    let input = apply_tile_permutation(img, cat.grid(), &perm)?;
    Ok(PretextSample {
        task: Task::Jigsaw,
        input,
        target: Target::Labels(LabelTensor::new(&[perm.len()], perm.clone())?),
        meta: Meta::Jigsaw { perm_index, perm },
    })
}

pub fn make_segmentation(img: &Tensor, mask: &LabelTensor, nb_classes: usize) -> Result<PretextSample> {
    let (_, h, w) = check_image(img)?;
    if mask.shape() != [h, w] {
        return Err(Error::shape(format!(
            "mask {:?} does not match image {:?}",
            mask.shape(),
            img.shape()
        )));
    }
    mask.check_below(nb_classes)?;
    Ok(PretextSample {
        task: Task::Segmentation,
        input: img.clone(),
        target: Target::Labels(mask.clone()),
        meta: Meta::Segmentation,
    })
}

/// Everything a pretext transform may need beyond the image.
#[derive(Clone, Debug)]
pub struct PretextContext {
    pub config: PretextConfig,
    pub palette: Option<ColorPalette>,
    pub catalogue: Option<PermutationCatalogue>,
}

impl PretextContext {
    pub fn new(config: PretextConfig) -> Result<Self> {
        config.validate()?;
        Ok(PretextContext {
            config,
            palette: None,
            catalogue: None,
        })
    }

    /// Builds what `tasks` need: the palette from `corpus` and the jigsaw
    /// catalogue from `seed`.
    pub fn prepare(&mut self, tasks: &[Task], corpus: &[&Tensor], seed: u64) -> Result<()> {
        if tasks.contains(&Task::Colorization) && self.palette.is_none() {
            self.palette = Some(ColorPalette::build(
                corpus,
                self.config.lattice_bins,
                self.config.palette_size,
            )?);
        }
        if tasks.contains(&Task::Jigsaw) && self.catalogue.is_none() {
            self.catalogue = Some(build_catalogue(self.config.jigsaw_grid, self.config.jigsaw_count, seed)?);
        }
        Ok(())
    }

    /// Applies the pretext transform for `task` (not segmentation).
    pub fn transform(&self, task: Task, img: &Tensor, rng: &mut impl Rng) -> Result<PretextSample> {
        match task {
            Task::Inpainting => {
                let (_, h, w) = check_image(img)?;
                make_inpainting(img, self.config.side_for(h, w), self.config.inpaint_fill, rng)
            }
            Task::Denoising => make_denoising(img, self.config.noise_sigma, rng),
            Task::Colorization => make_colorization(img, self.palette.as_ref()),
            Task::Jigsaw => {
                let cat = self
                    .catalogue
                    .as_ref()
                    .ok_or_else(|| Error::state("jigsaw catalogue has not been built"))?;
                make_jigsaw(img, cat, rng)
            }
            Task::Segmentation => Err(Error::param("segmentation pairs need a mask; use make_segmentation")),
        }
    }
}
