//! C ABI over the xmic library.
//!
//! Every function returns an [`XmicStatus`]; on failure the message is
//! available from [`xmic_last_error`] on the same thread. Handles are opaque
//! and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use xmic::adapters::{condition_rows, load_checkpoint, Model, ModelConfig, NormFlags, TextSide};
use xmic::cli::{load_clip_set, load_text};
use xmic::data::{partition_shared_novel, ClassVocabulary, ClipSet, FrameSampling, Task};
use xmic::eval::{classify_clip, harmonic_mean, set_accuracy};
use xmic::{Graph, Tensor, XmicError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XmicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Vocabulary = 6,
    InvalidArgument = 7,
    OutOfRange = 8,
    Panic = 9,
}

/// Bit flags for `xmic_condition`.
pub const XMIC_NORM_N1: u32 = 1;
pub const XMIC_NORM_N2: u32 = 2;
pub const XMIC_NORM_N3: u32 = 4;

pub const XMIC_TASK_NOUN: u32 = 0;
pub const XMIC_TASK_VERB: u32 = 1;

/// Clips, their vocabulary and the frozen class-text embeddings.
pub struct XmicDataset {
    set: ClipSet,
    text: TextSide,
}

/// A trained (or freshly initialized) model loaded from a checkpoint.
pub struct XmicModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

enum Failure {
    Status(XmicStatus, String),
    Lib(XmicError),
}

impl From<XmicError> for Failure {
    fn from(e: XmicError) -> Self {
        Failure::Lib(e)
    }
}

fn status_of(e: &XmicError) -> XmicStatus {
    use XmicError::*;
    match e {
        Io { .. } => XmicStatus::Io,
        Format(_) | Json(_) => XmicStatus::Format,
        BadShape(_) | NotScalar(_) | ShapeMismatch(_) | DimMismatch(_) => XmicStatus::Shape,
        TaskMismatch(..) | EmptyClassName | MissingLabel(_) | UnknownLabel { .. } | VocabularyMismatch(_)
        | BadLabel { .. } => XmicStatus::Vocabulary,
        _ => XmicStatus::InvalidArgument,
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, converting errors and panics into a status code.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> XmicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            XmicStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            XmicStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(XmicStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(XmicStatus::InvalidUtf8, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn opt_path_arg(p: *const c_char, what: &str) -> Result<Option<PathBuf>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        path_arg(p, what).map(Some)
    }
}

fn task_arg(task: u32) -> Result<Task, Failure> {
    match task {
        XMIC_TASK_NOUN => Ok(Task::Noun),
        XMIC_TASK_VERB => Ok(Task::Verb),
        t => Err(Failure::Status(XmicStatus::InvalidArgument, format!("unknown task {t}"))),
    }
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next xmic call on this thread.
#[no_mangle]
pub extern "C" fn xmic_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// `2ab / (a + b)` in percent; 0 when both are 0.
///
/// # Safety
/// `out_hm` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn xmic_harmonic_mean(a: f64, b: f64, out_hm: *mut f64) -> XmicStatus {
    guard(|| {
        *out(out_hm, "out_hm")? = harmonic_mean(a, b)?;
        Ok(())
    })
}

/// Shared and novel class counts between two vocabulary files.
///
/// # Safety
/// Paths must be NUL-terminated strings; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn xmic_partition_counts(
    vocab_a: *const c_char,
    vocab_b: *const c_char,
    task: u32,
    out_shared: *mut usize,
    out_novel_a: *mut usize,
    out_novel_b: *mut usize,
) -> XmicStatus {
    guard(|| {
        let task = task_arg(task)?;
        let a = ClassVocabulary::read(&path_arg(vocab_a, "vocab_a")?, task)?;
        let b = ClassVocabulary::read(&path_arg(vocab_b, "vocab_b")?, task)?;
        let (s, na, nb) = partition_shared_novel(&a, &b)?.counts();
        *out(out_shared, "out_shared")? = s;
        *out(out_novel_a, "out_novel_a")? = na;
        *out(out_novel_b, "out_novel_b")? = nb;
        Ok(())
    })
}

/// Opens a clip store with its manifest, vocabulary and text embeddings.
/// `store2` and `text` may be null: the second stream then reuses `store`,
/// and class texts come from the built-in toy encoder.
///
/// # Safety
/// Non-null paths must be NUL-terminated strings; `out_dataset` must be valid.
#[no_mangle]
pub unsafe extern "C" fn xmic_dataset_open(
    store: *const c_char,
    store2: *const c_char,
    manifest: *const c_char,
    vocab: *const c_char,
    text: *const c_char,
    task: u32,
    out_dataset: *mut *mut XmicDataset,
) -> XmicStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        *slot = ptr::null_mut();
        let task = task_arg(task)?;
        let vocab = ClassVocabulary::read(&path_arg(vocab, "vocab")?, task)?;
        let store2 = opt_path_arg(store2, "store2")?;
        let set = load_clip_set(&path_arg(store, "store")?, store2.as_deref(), &path_arg(manifest, "manifest")?, &vocab)?;
        let model = ModelConfig { dim: set.dim(), ..ModelConfig::default() };
        let classifier = load_text(opt_path_arg(text, "text")?.as_deref(), &vocab, &model)?;
        let text = TextSide::new(classifier, None)?;
        *slot = Box::into_raw(Box::new(XmicDataset { set, text }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from `xmic_dataset_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xmic_dataset_free(dataset: *mut XmicDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of clips, embedding width and class count.
///
/// # Safety
/// `dataset` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn xmic_dataset_info(
    dataset: *const XmicDataset,
    out_clips: *mut usize,
    out_dim: *mut usize,
    out_classes: *mut usize,
) -> XmicStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        if let Some(p) = out_clips.as_mut() {
            *p = d.set.len();
        }
        if let Some(p) = out_dim.as_mut() {
            *p = d.set.dim();
        }
        if let Some(p) = out_classes.as_mut() {
            *p = d.set.vocab().len();
        }
        Ok(())
    })
}

/// Ground-truth class index of clip `index`.
///
/// # Safety
/// `dataset` must be a live handle and `out_label` valid.
#[no_mangle]
pub unsafe extern "C" fn xmic_dataset_label(dataset: *const XmicDataset, index: usize, out_label: *mut usize) -> XmicStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let label = d.set.labels().get(index).ok_or_else(|| {
            Failure::Status(XmicStatus::OutOfRange, format!("clip {index} of {}", d.set.len()))
        })?;
        *out(out_label, "out_label")? = *label;
        Ok(())
    })
}

/// Loads a checkpoint written by `xmic train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` valid.
#[no_mangle]
pub unsafe extern "C" fn xmic_model_load(path: *const c_char, out_model: *mut *mut XmicModel) -> XmicStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = ptr::null_mut();
        let model = load_checkpoint(&path_arg(path, "path")?)?;
        *slot = Box::into_raw(Box::new(XmicModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `xmic_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xmic_model_free(model: *mut XmicModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Classifies clip `index` from `frames` uniformly sampled frames. When
/// `scores` is non-null it receives one score per class and
/// `scores_len` must be at least the class count.
///
/// # Safety
/// Handles must be live; `out_class` valid; `scores` null or valid for
/// `scores_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn xmic_classify(
    model: *const XmicModel,
    dataset: *const XmicDataset,
    index: usize,
    frames: usize,
    out_class: *mut usize,
    scores: *mut f64,
    scores_len: usize,
) -> XmicStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        let d = handle(dataset, "dataset")?;
        let slot = out(out_class, "out_class")?;
        if index >= d.set.len() {
            return Err(Failure::Status(XmicStatus::OutOfRange, format!("clip {index} of {}", d.set.len())));
        }
        let classes = d.set.vocab().len();
        if !scores.is_null() && scores_len < classes {
            return Err(Failure::Status(
                XmicStatus::OutOfRange,
                format!("score buffer holds {scores_len} of {classes} classes"),
            ));
        }
        let clip = d.set.tensors(index, frames, FrameSampling::Uniform)?;
        let p = classify_clip(m, &d.text, &clip, None)?;
        *slot = p.class;
        if !scores.is_null() {
            std::slice::from_raw_parts_mut(scores, classes).copy_from_slice(&p.scores);
        }
        Ok(())
    })
}

/// Top-1 accuracy in percent over the whole dataset.
///
/// # Safety
/// Handles must be live and `out_accuracy` valid.
#[no_mangle]
pub unsafe extern "C" fn xmic_accuracy(
    model: *const XmicModel,
    dataset: *const XmicDataset,
    frames: usize,
    out_accuracy: *mut f64,
) -> XmicStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        let d = handle(dataset, "dataset")?;
        *out(out_accuracy, "out_accuracy")? = set_accuracy(m, &d.text, &d.set, frames)?;
        Ok(())
    })
}

/// Conditioned classifier rows `normalize(maybe_n3(E) + alpha * maybe_n2(a_v))`
/// for a row-major `classes x dim` matrix `text`. `norm` is a mask of
/// `XMIC_NORM_*` flags (n1 acts on adapter inputs and is ignored here).
/// `out_rows` receives `classes * dim` doubles.
///
/// # Safety
/// `text` and `out_rows` must be valid for `classes * dim` doubles and
/// `a_v` for `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn xmic_condition(
    text: *const f64,
    classes: usize,
    dim: usize,
    a_v: *const f64,
    alpha: f64,
    norm: u32,
    out_rows: *mut f64,
) -> XmicStatus {
    guard(|| {
        if text.is_null() || a_v.is_null() || out_rows.is_null() {
            return Err(null("text, a_v or out_rows"));
        }
        if norm & !(XMIC_NORM_N1 | XMIC_NORM_N2 | XMIC_NORM_N3) != 0 {
            return Err(Failure::Status(XmicStatus::InvalidArgument, format!("unknown norm bits {norm:#x}")));
        }
        let n = classes
            .checked_mul(dim)
            .ok_or_else(|| Failure::Status(XmicStatus::InvalidArgument, "classes * dim overflows".into()))?;
        let rows = Tensor::new(vec![classes, dim], std::slice::from_raw_parts(text, n).to_vec())?;
        let a = Tensor::new(vec![dim], std::slice::from_raw_parts(a_v, dim).to_vec())?;
        let flags = NormFlags { n1: norm & XMIC_NORM_N1 != 0, n2: norm & XMIC_NORM_N2 != 0, n3: norm & XMIC_NORM_N3 != 0 };
        let mut g = Graph::new();
        let (t, a) = (g.constant(rows), g.constant(a));
        let y = condition_rows(&mut g, t, a, alpha, flags)?;
        std::slice::from_raw_parts_mut(out_rows, n).copy_from_slice(g.value(y).data());
        Ok(())
    })
}
