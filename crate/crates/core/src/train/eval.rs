//! Segmentation evaluation over a dataset split.

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{iou_per_class, miou, ConfusionMatrix};
use crate::nn::Model;
use crate::task::Task;
use crate::tensor::{LabelTensor, Tensor};

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

/// Anything that maps a batch of images `[N,3,H,W]` to label maps `[N,H,W]`.
pub trait SegPredictor: Sync {
    fn predict_labels(&self, images: &Tensor) -> Result<LabelTensor>;
}

impl SegPredictor for Model {
    fn predict_labels(&self, images: &Tensor) -> Result<LabelTensor> {
        if !self.has_head(Task::Segmentation) {
            return Err(Error::config("model has no segmentation head"));
        }
        LabelTensor::argmax_classes(&self.predict(Task::Segmentation, images)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub confusion: ConfusionMatrix,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

fn chunk_confusion<P: SegPredictor + ?Sized>(
    predictor: &P,
    ds: &Dataset,
    chunk: &[usize],
) -> Result<ConfusionMatrix> {
    let images: Vec<Tensor> = chunk.iter().map(|&i| ds.image(i).clone()).collect();
    let pred = predictor.predict_labels(&Tensor::stack(&images)?)?;
    let mut cm = ConfusionMatrix::new(ds.nb_classes());
    let plane = pred.len() / chunk.len();
    for (k, &i) in chunk.iter().enumerate() {
        let gt = ds
            .mask(i)
            .ok_or_else(|| Error::data(format!("entry {i} has no mask to evaluate against")))?;
        if gt.len() != plane {
            return Err(Error::shape("prediction and mask sizes differ"));
        }
        cm.accumulate(gt.data(), &pred.data()[k * plane..(k + 1) * plane])?;
    }
    Ok(cm)
}

/// Accumulates one confusion matrix over `split`. Chunks are spread over
/// `threads` workers; partial matrices are merged, so the result does not
/// depend on the thread count.
pub fn evaluate_with<P: SegPredictor + ?Sized>(
    predictor: &P,
    ds: &Dataset,
    split: Split,
    threads: usize,
) -> Result<EvalResult> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::data(format!("split {split:?} is empty")));
    }
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_CHUNK).collect();
    let threads = threads.clamp(1, chunks.len());
    let mut cm = ConfusionMatrix::new(ds.nb_classes());
    if threads == 1 {
        for c in &chunks {
            cm.merge(&chunk_confusion(predictor, ds, c)?)?;
        }
    } else {
        let partials: Vec<Result<ConfusionMatrix>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let chunks = &chunks;
                    s.spawn(move || {
                        let mut part = ConfusionMatrix::new(ds.nb_classes());
                        for c in chunks.iter().skip(w).step_by(threads) {
                            part.merge(&chunk_confusion(predictor, ds, c)?)?;
                        }
                        Ok(part)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        for p in partials {
            cm.merge(&p?)?;
        }
    }
    Ok(EvalResult {
        iou: iou_per_class(&cm),
        miou: miou(&cm)?,
        pixel_accuracy: cm.pixel_accuracy().unwrap_or(0.0),
        confusion: cm,
    })
}

pub fn evaluate(model: &Model, ds: &Dataset, split: Split) -> Result<EvalResult> {
    if !model.has_head(Task::Segmentation) {
        return Err(Error::config("model has no segmentation head"));
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get().min(8));
    evaluate_with(model, ds, split, threads)
}
