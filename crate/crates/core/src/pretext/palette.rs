//! Colour palette for colourisation targets.
//!
//! RGB is cut into a uniform lattice of `bins^3` cells. The palette keeps the
//! `size` cells that occur most often in a corpus; a pixel's class is its
//! cell's rank in the palette, or the nearest palette centroid if its cell
//! did not make the cut.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelTensor, Tensor};

pub const DEFAULT_LATTICE_BINS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorPalette {
    bins: usize,
    /// lattice cell id for each class
    cells: Vec<usize>,
}

fn axis_bin(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

impl ColorPalette {
    pub fn lattice_cell(rgb: [f64; 3], bins: usize) -> usize {
        let [r, g, b] = rgb.map(|v| axis_bin(v, bins));
        (r * bins + g) * bins + b
    }

    pub fn cell_center(cell: usize, bins: usize) -> [f64; 3] {
        let w = 1.0 / bins as f64;
        let idx = [cell / (bins * bins), (cell / bins) % bins, cell % bins];
        idx.map(|i| (i as f64 + 0.5) * w)
    }

    /// Frequency-ranked palette over `images` (each `[3,H,W]`). Ties and
    /// unseen cells fall back to ascending cell id, so the palette always
    /// has exactly `size` entries.
    pub fn build(images: &[&Tensor], bins: usize, size: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::param("lattice bins must be >= 1"));
        }
        let ncells = bins * bins * bins;
        if size == 0 || size > ncells {
            return Err(Error::param(format!(
                "palette size {size} must be in 1..={ncells} for {bins} bins per axis"
            )));
        }
        let mut freq = vec![0u64; ncells];
        for img in images {
            let plane = check_rgb(img)?;
            let d = img.data();
            for i in 0..plane {
                freq[Self::lattice_cell([d[i], d[plane + i], d[2 * plane + i]], bins)] += 1;
            }
        }
        let mut order: Vec<usize> = (0..ncells).collect();
        order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
        order.truncate(size);
        Ok(ColorPalette { bins, cells: order })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn bin_width(&self) -> f64 {
        1.0 / self.bins as f64
    }

    pub fn centroid(&self, class: usize) -> [f64; 3] {
        Self::cell_center(self.cells[class], self.bins)
    }

    pub fn classify(&self, rgb: [f64; 3]) -> usize {
        let cell = Self::lattice_cell(rgb, self.bins);
        if let Some(k) = self.cells.iter().position(|&c| c == cell) {
            return k;
        }
        let mut best = (f64::INFINITY, 0);
        for k in 0..self.cells.len() {
            let c = self.centroid(k);
            let d: f64 = (0..3).map(|i| (c[i] - rgb[i]).powi(2)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    /// Per-pixel class map `[H,W]` of an RGB image.
    pub fn quantize(&self, img: &Tensor) -> Result<LabelTensor> {
        let plane = check_rgb(img)?;
        let d = img.data();
        let labels = (0..plane)
            .map(|i| self.classify([d[i], d[plane + i], d[2 * plane + i]]))
            .collect();
        LabelTensor::new(&img.shape()[1..], labels)
    }
}

pub(crate) fn check_rgb(img: &Tensor) -> Result<usize> {
    match img.shape() {
        [3, h, w] => Ok(h * w),
        s => Err(Error::shape(format!("expected an RGB image [3,H,W], got {s:?}"))),
    }
}
