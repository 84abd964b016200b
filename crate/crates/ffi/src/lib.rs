//! C interface to the lab: corpus bundles and models behind opaque handles,
//! integer status codes, and a per-thread last-error message.
//!
//! Strings returned through out-parameters are owned by the caller and must
//! be released with `pitlab_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use pitlab::checkpoint::{self, CheckpointError};
use pitlab::corpus::{generate_corpus, import_bundle, CorpusBundle, CorpusCounts, CorpusError, Schema};
use pitlab::curriculum::PresetOptions;
use pitlab::eval::{answer_recall, evaluate_qa, exact_match, rouge_l, EvalError, EvalMode, EvalOptions};
use pitlab::experiment::{run, ExperimentError, RunConfig};
use pitlab::model::{ModelConfig, ModelError, ModelState};
use pitlab::tokenizer::Vocab;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PitlabStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Malformed input, failed validation or an unknown name.
    Data = 3,
    /// Training produced a non-finite loss or gradient.
    Numerical = 4,
    Io = 5,
    /// Bad call arguments, such as an unknown preset or evaluation mode.
    Usage = 6,
    /// An internal panic was caught at the boundary.
    Panic = 7,
}

/// Opaque corpus bundle.
pub struct PitlabBundle(CorpusBundle);

/// Opaque single-precision model with its vocabulary.
pub struct PitlabModel(ModelState<f32>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(PitlabStatus, String);

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let status = match &e {
            ExperimentError::Usage(_) => PitlabStatus::Usage,
            ExperimentError::Numerical(_) => PitlabStatus::Numerical,
            ExperimentError::Io { .. } => PitlabStatus::Io,
            _ => PitlabStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        let status = if matches!(e, CorpusError::Io { .. }) { PitlabStatus::Io } else { PitlabStatus::Data };
        Failure(status, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let status = if matches!(e, CheckpointError::Io { .. }) { PitlabStatus::Io } else { PitlabStatus::Data };
        Failure(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure(PitlabStatus::Data, e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure(PitlabStatus::Data, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PitlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PitlabStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PitlabStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PitlabStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(PitlabStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn opt_text<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(s).map_err(|e| Failure(PitlabStatus::Data, format!("{what}: {e}")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(PitlabStatus::Data, "string contains a NUL byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message for the last failed call on this thread; empty after success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pitlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn pitlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a synthetic bundle. `counts_json` may be null for the default
/// split sizes.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pitlab_bundle_generate(
    counts_json: *const c_char,
    seed: u64,
    out: *mut *mut PitlabBundle,
) -> PitlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let counts: CorpusCounts = match opt_text(counts_json, "counts_json")? {
            Some(s) => json(s, "counts")?,
            None => CorpusCounts::default(),
        };
        let g = generate_corpus(&Schema::builtin(), &counts, seed)?;
        *out = Box::into_raw(Box::new(PitlabBundle(g.bundle)));
        Ok(())
    })
}

/// Imports a bundle from its `bundle.json` manifest.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pitlab_bundle_load(path: *const c_char, out: *mut *mut PitlabBundle) -> PitlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let b = import_bundle(Path::new(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(PitlabBundle(b)));
        Ok(())
    })
}

/// Writes the bundle's split files and manifest into `dir`.
///
/// # Safety
/// `bundle` must be a live handle; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pitlab_bundle_export(bundle: *const PitlabBundle, dir: *const c_char) -> PitlabStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        b.0.export(Path::new(text(dir, "dir")?))?;
        Ok(())
    })
}

/// Hex SHA-256 of the bundle contents.
///
/// # Safety
/// `bundle` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pitlab_bundle_hash(bundle: *const PitlabBundle, out: *mut *mut c_char) -> PitlabStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        if out.is_null() {
            return Err(null("out"));
        }
        put_string(out, b.0.hash())
    })
}

/// Number of test QA pairs, or 0 for a null handle.
///
/// # Safety
/// `bundle` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pitlab_bundle_test_qa_count(bundle: *const PitlabBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.test_qa.len())
}

/// # Safety
/// `bundle` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn pitlab_bundle_free(bundle: *mut PitlabBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Fresh model with a vocabulary built from `bundle`.
///
/// # Safety
/// `bundle` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pitlab_model_init(
    bundle: *const PitlabBundle,
    layers: usize,
    heads: usize,
    dim: usize,
    ctx: usize,
    seed: u64,
    out: *mut *mut PitlabModel,
) -> PitlabStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let vocab = Vocab::build(&b.0);
        let m = ModelState::init(ModelConfig::new(layers, heads, dim, ctx, vocab.len(), seed), vocab)?;
        *out = Box::into_raw(Box::new(PitlabModel(m)));
        Ok(())
    })
}

/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pitlab_model_load(dir: *const c_char, out: *mut *mut PitlabModel) -> PitlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let c = checkpoint::load(Path::new(text(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(PitlabModel(c.model)));
        Ok(())
    })
}

/// Saves a checkpoint into `dir`; fails if one is already there.
///
/// # Safety
/// `model` must be a live handle; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pitlab_model_save(model: *const PitlabModel, dir: *const c_char) -> PitlabStatus {
    guard(|| {
        let m = handle(model, "model")?;
        checkpoint::save(Path::new(text(dir, "dir")?), &m.0, None, serde_json::Value::Null)?;
        Ok(())
    })
}

/// Parameter count, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pitlab_model_param_count(model: *const PitlabModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.param_count())
}

/// # Safety
/// `model` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn pitlab_model_free(model: *mut PitlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Run config JSON for a named preset. `options_json` may be null.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pitlab_preset_config(
    name: *const c_char,
    options_json: *const c_char,
    out: *mut *mut c_char,
) -> PitlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let options: PresetOptions = match opt_text(options_json, "options_json")? {
            Some(s) => json(s, "preset options")?,
            None => PresetOptions::default(),
        };
        let cfg = RunConfig::from_preset(text(name, "name")?, &options)?;
        put_string(out, cfg.to_json())
    })
}

/// Runs a curriculum from `base` (left untouched). `out_dir` may be null to
/// skip checkpoints and files. On success `out_model` receives the trained
/// model and `out_manifest` the run manifest as JSON; either may be null if
/// not wanted.
///
/// # Safety
/// Handles must be live, strings null or NUL-terminated, and non-null
/// out-parameters writable.
#[no_mangle]
pub unsafe extern "C" fn pitlab_run(
    base: *const PitlabModel,
    bundle: *const PitlabBundle,
    config_json: *const c_char,
    out_dir: *const c_char,
    out_model: *mut *mut PitlabModel,
    out_manifest: *mut *mut c_char,
) -> PitlabStatus {
    guard(|| {
        let m = handle(base, "base")?;
        let b = handle(bundle, "bundle")?;
        let cfg = RunConfig::from_json(text(config_json, "config_json")?)?;
        let dir = opt_text(out_dir, "out_dir")?.map(PathBuf::from);
        let outcome = run(&cfg, &b.0, &m.0, dir.as_deref(), &mut |_| {})?;
        if !out_manifest.is_null() {
            put_string(out_manifest, serde_json::to_string(&outcome.manifest).expect("manifest serializes"))?;
        }
        if !out_model.is_null() {
            *out_model = Box::into_raw(Box::new(PitlabModel(outcome.model)));
        }
        Ok(())
    })
}

/// Exact match of greedy answers on the bundle's test QA. `mode` is 0 for
/// closed-book and 1 for open-book.
///
/// # Safety
/// Handles must be live; `out_em` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pitlab_evaluate_test(
    model: *const PitlabModel,
    bundle: *const PitlabBundle,
    mode: u32,
    out_em: *mut f64,
) -> PitlabStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let b = handle(bundle, "bundle")?;
        if out_em.is_null() {
            return Err(null("out_em"));
        }
        let mode = match mode {
            0 => EvalMode::ClosedBook,
            1 => EvalMode::OpenBook,
            other => return Err(Failure(PitlabStatus::Usage, format!("unknown evaluation mode {other}"))),
        };
        let r = evaluate_qa(&m.0, "test_qa", &b.0.test_qa, &b.0, mode, &EvalOptions::default())?;
        *out_em = r.exact_match;
        Ok(())
    })
}

/// Scores one prediction: 1/0 exact match and recall, ROUGE-L F1.
///
/// # Safety
/// String arguments must be NUL-terminated; out-parameters writable.
#[no_mangle]
pub unsafe extern "C" fn pitlab_score(
    prediction: *const c_char,
    gold: *const c_char,
    out_exact: *mut i32,
    out_recall: *mut i32,
    out_rouge_l: *mut f64,
) -> PitlabStatus {
    guard(|| {
        let p = text(prediction, "prediction")?;
        let g = text(gold, "gold")?;
        if out_exact.is_null() || out_recall.is_null() || out_rouge_l.is_null() {
            return Err(null("output pointer"));
        }
        *out_exact = exact_match(p, g) as i32;
        *out_recall = answer_recall(p, g) as i32;
        *out_rouge_l = rouge_l(p, g);
        Ok(())
    })
}
