//! C interface to `segpretext`.
//!
//! Every function returns an [`SpStatus`]; results come back through out
//! pointers. Objects are opaque handles created by `*_new`/`*_load`/`*_build`
//! and released with the matching `*_free`. After a failing call,
//! [`sp_last_error`] copies a message describing it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use segpretext::metrics::{self, ConfusionMatrix};
use segpretext::nn::Model;
use segpretext::pretext::{build_catalogue, PermutationCatalogue};
use segpretext::train::{load_checkpoint, SegPredictor};
use segpretext::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    Param = 3,
    Data = 4,
    Config = 5,
    State = 6,
    Format = 7,
    NonFinite = 8,
    Io = 9,
    /// A Rust panic was caught at the boundary.
    Internal = 10,
}

/// Accumulating confusion matrix.
pub struct SpConfusion(ConfusionMatrix);

/// Model loaded from a checkpoint, used for segmentation inference.
pub struct SpModel(Model);

/// Jigsaw permutation catalogue.
pub struct SpCatalogue(PermutationCatalogue);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> SpStatus {
    match err {
        Error::Shape(_) => SpStatus::Shape,
        Error::Param(_) => SpStatus::Param,
        Error::Data(_) => SpStatus::Data,
        Error::Config(_) => SpStatus::Config,
        Error::State(_) => SpStatus::State,
        Error::Format { .. } => SpStatus::Format,
        Error::NonFinite(_) => SpStatus::NonFinite,
        Error::Io { .. } => SpStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SpStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(_) => {
            set_error("internal panic".to_string());
            SpStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn widen(labels: &[u32]) -> Vec<usize> {
    labels.iter().map(|&v| v as usize).collect()
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn sp_confusion_new(nb_classes: usize, out: *mut *mut SpConfusion) -> SpStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        if nb_classes == 0 {
            return Err(Error::param("nb_classes must be at least 1").into());
        }
        *out = Box::into_raw(Box::new(SpConfusion(ConfusionMatrix::new(nb_classes))));
        Ok(())
    })
}

/// Adds `len` (ground truth, prediction) label pairs.
///
/// # Safety
/// `cm` must come from [`sp_confusion_new`]; `gt` and `pred` must each point
/// to `len` readable values.
#[no_mangle]
pub unsafe extern "C" fn sp_confusion_accumulate(
    cm: *mut SpConfusion,
    gt: *const u32,
    pred: *const u32,
    len: usize,
) -> SpStatus {
    guard(|| {
        let cm = deref_mut(cm, "cm")?;
        let gt = widen(slice(gt, len, "gt")?);
        let pred = widen(slice(pred, len, "pred")?);
        cm.0.accumulate(&gt, &pred)?;
        Ok(())
    })
}

/// Copies the K*K counts, row-major with rows indexed by ground truth.
///
/// # Safety
/// `cm` must be a live handle; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn sp_confusion_counts(cm: *const SpConfusion, out: *mut u64, len: usize) -> SpStatus {
    guard(|| {
        let cm = deref(cm, "cm")?;
        let counts = cm.0.counts();
        if len != counts.len() {
            return Err(Error::shape(format!("buffer holds {len} counts, matrix has {}", counts.len())).into());
        }
        slice_mut(out, len, "out")?.copy_from_slice(counts);
        Ok(())
    })
}

/// Mean IoU over classes present in either labelling.
///
/// # Safety
/// `cm` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_confusion_miou(cm: *const SpConfusion, out: *mut f64) -> SpStatus {
    guard(|| {
        let cm = deref(cm, "cm")?;
        let out = deref_mut(out, "out")?;
        *out = metrics::miou(&cm.0)?;
        Ok(())
    })
}

/// # Safety
/// `cm` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_confusion_pixel_accuracy(cm: *const SpConfusion, out: *mut f64) -> SpStatus {
    guard(|| {
        let cm = deref(cm, "cm")?;
        let out = deref_mut(out, "out")?;
        *out = cm
            .0
            .pixel_accuracy()
            .ok_or_else(|| Error::state("no pixels accumulated"))?;
        Ok(())
    })
}

/// # Safety
/// `cm` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_confusion_free(cm: *mut SpConfusion) {
    if !cm.is_null() {
        drop(Box::from_raw(cm));
    }
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn sp_model_load(path: *const c_char, out: *mut *mut SpModel) -> SpStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::param("path is not valid UTF-8"))?;
        let (model, _) = load_checkpoint(path)?;
        *out = Box::into_raw(Box::new(SpModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_model_nb_classes(model: *const SpModel, out: *mut usize) -> SpStatus {
    guard(|| {
        let model = deref(model, "model")?;
        *deref_mut(out, "out")? = model.0.config().nb_classes;
        Ok(())
    })
}

/// Predicts per-pixel classes for `n` RGB images laid out as [n,3,h,w]
/// floats in [0,1]. Writes n*h*w labels to `out`.
///
/// # Safety
/// `images` must hold n*3*h*w values and `out` room for n*h*w.
#[no_mangle]
pub unsafe extern "C" fn sp_model_predict(
    model: *const SpModel,
    images: *const f64,
    n: usize,
    h: usize,
    w: usize,
    out: *mut u32,
) -> SpStatus {
    guard(|| {
        let model = deref(model, "model")?;
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::shape("empty image batch").into());
        }
        let data = slice(images, n * 3 * h * w, "images")?.to_vec();
        let labels = model.0.predict_labels(&Tensor::new(&[n, 3, h, w], data)?)?;
        let out = slice_mut(out, n * h * w, "out")?;
        for (o, &l) in out.iter_mut().zip(labels.data()) {
            *o = l as u32;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_model_free(model: *mut SpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Builds the seeded jigsaw catalogue of `count` permutations of grid*grid
/// tiles.
///
/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn sp_catalogue_build(
    grid: usize,
    count: usize,
    seed: u64,
    out: *mut *mut SpCatalogue,
) -> SpStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = Box::into_raw(Box::new(SpCatalogue(build_catalogue(grid, count, seed)?)));
        Ok(())
    })
}

/// # Safety
/// `cat` must be a live handle; `len` and `tiles` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_catalogue_size(cat: *const SpCatalogue, len: *mut usize, tiles: *mut usize) -> SpStatus {
    guard(|| {
        let cat = deref(cat, "cat")?;
        *deref_mut(len, "len")? = cat.0.len();
        *deref_mut(tiles, "tiles")? = cat.0.tiles();
        Ok(())
    })
}

/// Copies permutation `index` into `out`, which must hold exactly `tiles`
/// values.
///
/// # Safety
/// `cat` must be a live handle and `out` point to `tiles` writable values.
#[no_mangle]
pub unsafe extern "C" fn sp_catalogue_get(
    cat: *const SpCatalogue,
    index: usize,
    out: *mut u32,
    tiles: usize,
) -> SpStatus {
    guard(|| {
        let cat = deref(cat, "cat")?;
        let perm = cat
            .0
            .get(index)
            .ok_or_else(|| Error::param(format!("index {index} outside catalogue of {}", cat.0.len())))?;
        if tiles != perm.len() {
            return Err(Error::shape(format!("buffer holds {tiles} tiles, permutation has {}", perm.len())).into());
        }
        for (o, &p) in slice_mut(out, tiles, "out")?.iter_mut().zip(perm) {
            *o = p as u32;
        }
        Ok(())
    })
}

/// # Safety
/// `cat` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_catalogue_free(cat: *mut SpCatalogue) {
    if !cat.is_null() {
        drop(Box::from_raw(cat));
    }
}
