//! Synthetic shapes dataset: coloured rectangles, disks and triangles on a
//! textured background. Class k >= 1 always uses the same shape kind and a
//! jittered version of the same base colour; class 0 is background.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry, Split, MANIFEST_VERSION};
use super::netpbm::{write_pgm, write_ppm};
use crate::error::{Error, Result};
use crate::tensor::{LabelTensor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub nb_classes: usize,
    pub height: usize,
    pub width: usize,
    pub val_fraction: f64,
    pub labeled_fraction: f64,
    pub max_shapes: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            nb_classes: 4,
            height: 32,
            width: 32,
            val_fraction: 0.2,
            labeled_fraction: 0.1,
            max_shapes: 3,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nb_classes < 2 || self.nb_classes > 256 {
            return Err(Error::config(format!("nb_classes {} outside 2..=256", self.nb_classes)));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::config("images must be at least 4x4"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must lie in [0,1)"));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::config("labeled_fraction must lie in (0,1]"));
        }
        if self.max_shapes == 0 {
            return Err(Error::config("max_shapes must be >= 1"));
        }
        Ok(())
    }
}

/// Shape geometry in pixel-index coordinates; a pixel `(x, y)` is tested as
/// the integer point itself.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Covers `x0 <= x < x0 + w`, `y0 <= y < y0 + h`.
    Rectangle { x0: i64, y0: i64, w: i64, h: i64 },
    /// Covers `(x-cx)^2 + (y-cy)^2 <= r^2`.
    Disk { cx: i64, cy: i64, r: i64 },
    /// Closed triangle.
    Triangle { vertices: [[i64; 2]; 3] },
}

impl Shape {
    pub fn contains(&self, x: i64, y: i64) -> bool {
        match *self {
            Shape::Rectangle { x0, y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            Shape::Disk { cx, cy, r } => (x - cx).pow(2) + (y - cy).pow(2) <= r * r,
            Shape::Triangle { vertices: [a, b, c] } => {
                let edge = |p: [i64; 2], q: [i64; 2]| (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]);
                let (e0, e1, e2) = (edge(a, b), edge(b, c), edge(c, a));
                (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub class: usize,
    pub shape: Shape,
    /// Colour actually painted (base colour plus jitter).
    pub color: [f64; 3],
}

/// Base colour of class `k`: background grey for 0, evenly spaced hues for
/// the rest.
pub fn class_color(k: usize, nb_classes: usize) -> [f64; 3] {
    if k == 0 {
        return [0.45, 0.45, 0.45];
    }
    let hue = (k - 1) as f64 / (nb_classes - 1) as f64 * 6.0;
    let (s, v) = (0.85, 0.9);
    let f = hue.fract();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match hue as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_shape(class: usize, h: i64, w: i64, rng: &mut impl Rng) -> Shape {
    let lo = (h.min(w) / 5).max(2);
    let hi = (h.min(w) / 2).max(lo + 1);
    match (class - 1) % 3 {
        0 => {
            let (sw, sh) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
            Shape::Rectangle {
                x0: rng.gen_range(0..=w - sw),
                y0: rng.gen_range(0..=h - sh),
                w: sw,
                h: sh,
            }
        }
        1 => {
            let r = rng.gen_range(lo / 2..=hi / 2).max(1);
            Shape::Disk {
                cx: rng.gen_range(r..w - r),
                cy: rng.gen_range(r..h - r),
                r,
            }
        }
        _ => {
            let s = rng.gen_range(lo..=hi);
            let (x0, y0) = (rng.gen_range(0..=w - s), rng.gen_range(0..=h - s));
            let apex = x0 + rng.gen_range(0..=s);
            Shape::Triangle {
                vertices: [[x0, y0 + s - 1], [x0 + s - 1, y0 + s - 1], [apex, y0]],
            }
        }
    }
}

/// Image `index` of the dataset for `seed`: pixels, mask and placement log.
/// Later placements paint over earlier ones.
pub fn render(index: u64, cfg: &SyntheticConfig, seed: u64) -> (Tensor, LabelTensor, Vec<Placement>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;

    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let freq: f64 = rng.gen_range(0.2..0.6);
    let bg = class_color(0, cfg.nb_classes);
    let mut img = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let tex = 0.08 * ((x as f64 * freq + phase).sin() * (y as f64 * freq * 0.7).cos());
            for c in 0..3 {
                img[c * plane + y * w + x] = bg[c] + tex + rng.gen_range(-0.03..0.03);
            }
        }
    }
    let mut mask = vec![0usize; plane];
    let nshapes = rng.gen_range(1..=cfg.max_shapes);
    let mut placements = Vec::with_capacity(nshapes);
    for _ in 0..nshapes {
        let class = rng.gen_range(1..cfg.nb_classes);
        let shape = random_shape(class, h as i64, w as i64, &mut rng);
        let base = class_color(class, cfg.nb_classes);
        let color = base.map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x as i64, y as i64) {
                    mask[y * w + x] = class;
                    for c in 0..3 {
                        img[c * plane + y * w + x] = color[c] + rng.gen_range(-0.03..0.03);
                    }
                }
            }
        }
        placements.push(Placement { class, shape, color });
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    (
        Tensor::new(&[3, h, w], img).unwrap(),
        LabelTensor::new(&[h, w], mask).unwrap(),
        placements,
    )
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `n` image/mask pairs plus `manifest.json` under `out`.
///
/// A seeded shuffle picks `round(n * val_fraction)` validation entries
/// (at least 1), then `round(train * labeled_fraction)` labeled train entries
/// (at least 1). Unlabeled train entries get no mask file.
pub fn generate_synthetic(out: impl AsRef<Path>, n: usize, cfg: &SyntheticConfig, seed: u64) -> Result<DatasetManifest> {
    cfg.validate()?;
    if n < 2 {
        return Err(Error::config(format!("need at least 2 images, got {n}")));
    }
    let out = out.as_ref();
    create_dir(&out.join("images"))?;
    create_dir(&out.join("masks"))?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let n_train = n - n_val;
    let n_lab = ((n_train as f64 * cfg.labeled_fraction).round() as usize).clamp(1, n_train);
    let mut role = vec![(Split::Train, false); n];
    for (rank, &i) in order.iter().enumerate() {
        role[i] = if rank < n_val {
            (Split::Val, true)
        } else {
            (Split::Train, rank < n_val + n_lab)
        };
    }

    let mut entries = Vec::with_capacity(n);
    for (i, &(split, labeled)) in role.iter().enumerate() {
        let (img, mask, placements) = render(i as u64, cfg, seed);
        let image = format!("images/{i:05}.ppm");
        write_ppm(out.join(&image), &img)?;
        let mask_path = if labeled {
            let p = format!("masks/{i:05}.pgm");
            write_pgm(out.join(&p), &mask)?;
            Some(p)
        } else {
            None
        };
        entries.push(ManifestEntry {
            image,
            mask: mask_path,
            split,
            placements,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        nb_classes: cfg.nb_classes,
        image_size: [cfg.height, cfg.width],
        labeled_fraction: cfg.labeled_fraction,
        entries,
    };
    manifest.validate()?;
    manifest.write(out)?;
    Ok(manifest)
}
