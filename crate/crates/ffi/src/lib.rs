//! C ABI over the `healthqa` pipeline.
//!
//! Conventions:
//! * every fallible function returns an [`HqaStatus`]; on failure a message is
//!   available from [`hqa_last_error_message`] on the same thread;
//! * handles are opaque and released with their `_free` function;
//! * strings returned through `char **` out-parameters are owned by the caller
//!   and released with [`hqa_string_free`];
//! * panics never cross the boundary; they surface as `HQA_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use healthqa::config::AppConfig;
use healthqa::index::Index;
use healthqa::pipeline::Pipeline;
use healthqa::reader::{self, Label, RetrievalConfig, VoteScheme};
use healthqa::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HqaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    NotFound = 5,
    InvalidConfig = 6,
    Runtime = 7,
    Panic = 8,
}

/// Opaque BM25 index handle.
pub struct HqaIndex {
    index: Index,
}

/// Opaque pipeline handle: store, index, reader and retrieval settings.
pub struct HqaPipeline {
    pipeline: Pipeline,
    retrieval: RetrievalConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

struct Failure(HqaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => HqaStatus::Io,
            Error::Parse { .. } | Error::Json(_) | Error::IndexFormat(_) => HqaStatus::Parse,
            Error::NotFound(_) => HqaStatus::NotFound,
            Error::Config(_) | Error::Validation(_) => HqaStatus::InvalidConfig,
            _ => HqaStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(HqaStatus::Runtime, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HqaStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            HqaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(HqaStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(HqaStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn str_array<'a>(p: *const *const c_char, n: usize, name: &str) -> Result<Vec<&'a str>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(Failure(HqaStatus::NullArgument, format!("{name} is null")));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .enumerate()
        .map(|(i, s)| str_arg(*s, &format!("{name}[{i}]")))
        .collect()
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(HqaStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Library version, e.g. "0.1.0". Static storage; do not free.
#[no_mangle]
pub extern "C" fn hqa_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Message for the last failure on this thread, or null if none. Valid until
/// the next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn hqa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn hqa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Ingests `n_inputs` files into the store at `out_dir`. On success
/// `*stats_json` (if non-null) receives the ingestion counters as JSON.
///
/// # Safety
/// Pointers must be valid NUL-terminated strings; `inputs` must hold `n_inputs` of them.
#[no_mangle]
pub unsafe extern "C" fn hqa_ingest(
    inputs: *const *const c_char,
    n_inputs: usize,
    out_dir: *const c_char,
    stats_json: *mut *mut c_char,
) -> HqaStatus {
    guard(|| {
        let inputs: Vec<PathBuf> = str_array(inputs, n_inputs, "inputs")?
            .into_iter()
            .map(PathBuf::from)
            .collect();
        let out_dir = str_arg(out_dir, "out_dir")?;
        let stats = healthqa::corpus::ingest(&inputs, Path::new(out_dir))?;
        if !stats_json.is_null() {
            *stats_json = to_c_string(serde_json::to_string(&stats)?);
        }
        Ok(())
    })
}

/// Builds an index over the store at `corpus_dir` with default options and
/// writes it to `out_path`.
///
/// # Safety
/// Pointers must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn hqa_index_build(corpus_dir: *const c_char, out_path: *const c_char) -> HqaStatus {
    guard(|| {
        let corpus_dir = str_arg(corpus_dir, "corpus_dir")?;
        let out_path = str_arg(out_path, "out_path")?;
        let store = healthqa::corpus::CorpusStore::open(Path::new(corpus_dir))?;
        let index = Index::build(&store, Default::default())?;
        index.write_to(Path::new(out_path))?;
        Ok(())
    })
}

/// Opens an index file. On success `*out` receives a handle to release with
/// [`hqa_index_free`].
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hqa_index_open(path: *const c_char, out: *mut *mut HqaIndex) -> HqaStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let index = Index::open(Path::new(path))?;
        *out = Box::into_raw(Box::new(HqaIndex { index }));
        Ok(())
    })
}

/// Top-`k` BM25 search. `*results_json` receives a JSON array of
/// `{"pmid", "score", "rank"}` objects.
///
/// # Safety
/// `index` must be a live handle; other pointers valid.
#[no_mangle]
pub unsafe extern "C" fn hqa_index_search(
    index: *const HqaIndex,
    query: *const c_char,
    k: usize,
    results_json: *mut *mut c_char,
) -> HqaStatus {
    guard(|| {
        out_arg(results_json, "results_json")?;
        let index = index
            .as_ref()
            .ok_or_else(|| Failure(HqaStatus::NullArgument, "index is null".into()))?;
        let query = str_arg(query, "query")?;
        let hits = index.index.search(query, k, None);
        *results_json = to_c_string(serde_json::to_string(&hits)?);
        Ok(())
    })
}

/// Releases an index handle. Null is ignored.
///
/// # Safety
/// `index` must come from [`hqa_index_open`] and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn hqa_index_free(index: *mut HqaIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Opens the pipeline described by an optional config file plus `KEY=VALUE`
/// overrides (same keys as the command line). `config_path` may be null.
///
/// # Safety
/// Pointers must be valid; `overrides` must hold `n_overrides` strings.
#[no_mangle]
pub unsafe extern "C" fn hqa_pipeline_open(
    config_path: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut HqaPipeline,
) -> HqaStatus {
    guard(|| {
        out_arg(out, "out")?;
        let config_path = if config_path.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(config_path, "config_path")?))
        };
        let overrides: Vec<String> = str_array(overrides, n_overrides, "overrides")?
            .into_iter()
            .map(String::from)
            .collect();
        let config = AppConfig::load(config_path.as_deref(), &overrides)?;
        let pipeline = healthqa::cli::build_pipeline(&config)?;
        *out = Box::into_raw(Box::new(HqaPipeline {
            pipeline,
            retrieval: config.retrieval,
        }));
        Ok(())
    })
}

/// Answers one question. `*answer_json` receives the full answer record
/// (verdict, evidence, vote counts) as JSON.
///
/// # Safety
/// `pipeline` must be a live handle; other pointers valid.
#[no_mangle]
pub unsafe extern "C" fn hqa_pipeline_answer(
    pipeline: *const HqaPipeline,
    question: *const c_char,
    answer_json: *mut *mut c_char,
) -> HqaStatus {
    guard(|| {
        out_arg(answer_json, "answer_json")?;
        let handle = pipeline
            .as_ref()
            .ok_or_else(|| Failure(HqaStatus::NullArgument, "pipeline is null".into()))?;
        let question = str_arg(question, "question")?;
        let record = handle.pipeline.answer("ffi", question, &handle.retrieval)?;
        *answer_json = to_c_string(serde_json::to_string(&record)?);
        Ok(())
    })
}

/// Releases a pipeline handle. Null is ignored.
///
/// # Safety
/// `pipeline` must come from [`hqa_pipeline_open`] and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn hqa_pipeline_free(pipeline: *mut HqaPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Majority vote over label codes (0 refuted, 1 supported, 2 nei). `ternary`
/// selects three-way voting; otherwise NEI votes are discarded.
///
/// # Safety
/// `labels` must point to `n` bytes (may be null when `n == 0`); `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hqa_majority_vote(labels: *const u8, n: usize, ternary: bool, out: *mut u8) -> HqaStatus {
    guard(|| {
        out_arg(out, "out")?;
        let codes: &[u8] = if n == 0 {
            &[]
        } else if labels.is_null() {
            return Err(Failure(HqaStatus::NullArgument, "labels is null".into()));
        } else {
            std::slice::from_raw_parts(labels, n)
        };
        let labels = codes
            .iter()
            .map(|&c| {
                Label::from_code(c).ok_or_else(|| Failure(HqaStatus::InvalidConfig, format!("invalid label code {c}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let scheme = if ternary { VoteScheme::Ternary } else { VoteScheme::Binary };
        *out = reader::majority_vote(&labels, scheme).code();
        Ok(())
    })
}
