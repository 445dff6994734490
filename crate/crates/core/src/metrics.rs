//! Confusion-matrix mIoU and a brute-force reference.
//!
//! Rows of the confusion matrix are ground-truth classes, columns predicted.

use crate::error::{Error, Result};

fn check_labels(labels: &[usize], nb_classes: usize, what: &str) -> Result<()> {
    match labels.iter().position(|&l| l >= nb_classes) {
        Some(i) => Err(Error::data(format!(
            "{what} label {} at index {i} is outside 0..{nb_classes}",
            labels[i]
        ))),
        None => Ok(()),
    }
}

/// Per-element code `nb_classes * gt + pred`, flattened.
pub fn category_matrix(gt: &[usize], pred: &[usize], nb_classes: usize) -> Result<Vec<usize>> {
    if gt.len() != pred.len() {
        return Err(Error::shape(format!(
            "category_matrix: {} ground-truth vs {} predicted labels",
            gt.len(),
            pred.len()
        )));
    }
    if nb_classes == 0 {
        return Err(Error::param("nb_classes must be positive"));
    }
    check_labels(gt, nb_classes, "ground-truth")?;
    check_labels(pred, nb_classes, "predicted")?;
    Ok(gt.iter().zip(pred).map(|(&g, &p)| nb_classes * g + p).collect())
}

/// Frequency count of category codes over `nb_classes^2` bins.
pub fn confusion_from_categories(categ: &[usize], nb_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(nb_classes);
    let bins = nb_classes * nb_classes;
    for &c in categ {
        if c >= bins {
            return Err(Error::state(format!("category code {c} exceeds {bins} bins")));
        }
        cm.counts[c] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    nb_classes: usize,
    counts: Vec<u64>,
}

/// Per-class intersection and union counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub intersection: u64,
    pub union: u64,
}

impl ConfusionMatrix {
    pub fn new(nb_classes: usize) -> Self {
        ConfusionMatrix {
            nb_classes,
            counts: vec![0; nb_classes * nb_classes],
        }
    }

    pub fn from_counts(nb_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != nb_classes * nb_classes {
            return Err(Error::shape(format!(
                "{} counts for {nb_classes} classes",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { nb_classes, counts })
    }

    pub fn nb_classes(&self) -> usize {
        self.nb_classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Count at (ground truth `g`, prediction `p`).
    pub fn get(&self, g: usize, p: usize) -> u64 {
        self.counts[g * self.nb_classes + p]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one labelled image (or any flat set of pixels).
    pub fn accumulate(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        let categ = category_matrix(gt, pred, self.nb_classes)?;
        let part = confusion_from_categories(&categ, self.nb_classes)?;
        self.merge(&part)
    }

    /// Entrywise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.nb_classes != self.nb_classes {
            return Err(Error::shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.nb_classes, other.nb_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<ClassCounts> {
        let k = self.nb_classes;
        (0..k)
            .map(|c| {
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let inter = self.get(c, c);
                ClassCounts {
                    intersection: inter,
                    union: row + col - inter,
                }
            })
            .collect()
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let diag: u64 = (0..self.nb_classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| diag as f64 / total as f64)
    }
}

/// IoU per class; `None` when the class appears in neither ground truth nor
/// prediction.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    cm.class_counts()
        .into_iter()
        .map(|c| (c.union > 0).then(|| c.intersection as f64 / c.union as f64))
        .collect()
}

/// Mean IoU over present classes, or over all classes with absent ones
/// scored 0 when `absent_as_zero` is set.
pub fn miou_with(cm: &ConfusionMatrix, absent_as_zero: bool) -> Result<f64> {
    let ious = iou_per_class(cm);
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::data("mIoU undefined: no class present in ground truth or prediction"));
    }
    let denom = if absent_as_zero { ious.len() } else { present.len() };
    Ok(present.iter().sum::<f64>() / denom as f64)
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    miou_with(cm, false)
}

/// Reference mIoU by scanning pixel sets directly, no confusion matrix.
pub fn miou_oracle(gt: &[usize], pred: &[usize], nb_classes: usize) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(Error::shape("miou_oracle: length mismatch"));
    }
    check_labels(gt, nb_classes, "ground-truth")?;
    check_labels(pred, nb_classes, "predicted")?;
    let mut sum = 0.0;
    let mut present = 0usize;
    for k in 0..nb_classes {
        let inter = gt.iter().zip(pred).filter(|(&g, &p)| g == k && p == k).count();
        let union = gt.iter().zip(pred).filter(|(&g, &p)| g == k || p == k).count();
        if union > 0 {
            sum += inter as f64 / union as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::data("mIoU undefined: no class present"));
    }
    Ok(sum / present as f64)
}

/// Evaluation report as CSV: one row per class, then `mean` and
/// `pixel_accuracy` summary rows. Absent classes have an empty iou cell.
pub fn report_csv(cm: &ConfusionMatrix) -> Result<String> {
    use std::fmt::Write;
    let mut out = String::from("class_id,intersection,union,iou\n");
    let counts = cm.class_counts();
    let (mut inter_sum, mut union_sum) = (0u64, 0u64);
    for (k, (c, iou)) in counts.iter().zip(iou_per_class(cm)).enumerate() {
        inter_sum += c.intersection;
        union_sum += c.union;
        let iou = iou.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(out, "{k},{},{},{iou}", c.intersection, c.union).unwrap();
    }
    writeln!(out, "mean,{inter_sum},{union_sum},{:.6}", miou(cm)?).unwrap();
    let acc = cm.pixel_accuracy().unwrap_or(0.0);
    writeln!(out, "pixel_accuracy,{},{},{acc:.6}", inter_sum, cm.total()).unwrap();
    Ok(out)
}
