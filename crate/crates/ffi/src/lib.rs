//! C ABI for amplify-core.
//!
//! Every fallible function returns an [`AmplifyStatus`]; on failure the
//! message is available from [`amplify_last_error`] on the same thread.
//! Strings returned through out-parameters are owned by the caller and
//! must be released with [`amplify_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use amplify_core::attribution::{attribute, AttributionMethod, AttributionOptions};
use amplify_core::corpus::{load_task, LabelSet, Task};
use amplify_core::llmclient::{cache_key, parse_answer, CompletionRequest, ParsedAnswer};
use amplify_core::prompting::{render_rationale, RationaleTemplate};
use amplify_core::proxy::{argmax, load_model, ProxyModel};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmplifyStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Model = 5,
    NotFound = 6,
    Panic = 7,
}

/// Loaded proxy model.
pub struct AmplifyModel {
    inner: ProxyModel,
}

/// Loaded task file.
pub struct AmplifyTask {
    inner: Task,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(AmplifyStatus, String);

impl Failure {
    fn new(status: AmplifyStatus, msg: impl ToString) -> Self {
        Failure(status, msg.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AmplifyStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AmplifyStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AmplifyStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(AmplifyStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(AmplifyStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn str_array<'a>(p: *const *const c_char, n: usize, name: &str) -> Result<Vec<&'a str>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(Failure::new(AmplifyStatus::NullPointer, format!("{name} is null")));
    }
    (0..n).map(|i| str_arg(*p.add(i), name)).collect()
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(AmplifyStatus::NullPointer, format!("{name} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(AmplifyStatus::NullPointer, "out is null"));
    }
    out.write(value);
    Ok(())
}

fn owned(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(AmplifyStatus::InvalidArgument, "result contains a nul byte"))
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn amplify_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn amplify_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a proxy model file written by `train-proxy`.
///
/// # Safety
/// `path` must be a nul-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amplify_model_load(path: *const c_char, out: *mut *mut AmplifyModel) -> AmplifyStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = load_model(path).map_err(|e| Failure::new(AmplifyStatus::Io, e))?;
        write_out(out, Box::into_raw(Box::new(AmplifyModel { inner })))
    })
}

/// # Safety
/// `model` must come from [`amplify_model_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn amplify_model_free(model: *mut AmplifyModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of labels, or 0 for NULL.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn amplify_model_num_labels(model: *const AmplifyModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_labels())
}

/// Label name at `index`.
///
/// # Safety
/// `model` must be a live handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amplify_model_label(
    model: *const AmplifyModel,
    index: usize,
    out: *mut *mut c_char,
) -> AmplifyStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let label = m
            .inner
            .labels
            .get(index)
            .ok_or_else(|| Failure::new(AmplifyStatus::InvalidArgument, format!("label index {index} out of range")))?;
        write_out(out, owned(label.to_string())?)
    })
}

/// Writes class probabilities for `text` into `probs`, which must hold
/// exactly `amplify_model_num_labels` values.
///
/// # Safety
/// `probs` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn amplify_model_predict_proba(
    model: *const AmplifyModel,
    text: *const c_char,
    probs: *mut f64,
    len: usize,
) -> AmplifyStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let text = str_arg(text, "text")?;
        if probs.is_null() {
            return Err(Failure::new(AmplifyStatus::NullPointer, "probs is null"));
        }
        if len != m.inner.num_labels() {
            return Err(Failure::new(
                AmplifyStatus::InvalidArgument,
                format!("buffer holds {len} values, model has {} labels", m.inner.num_labels()),
            ));
        }
        let (_, input) = m.inner.tokenize_text(text);
        let p = m.inner.forward(&input).map_err(|e| Failure::new(AmplifyStatus::Model, e))?;
        std::slice::from_raw_parts_mut(probs, len).copy_from_slice(&p);
        Ok(())
    })
}

/// Attributes `text` toward label `target` (negative: the predicted label)
/// and returns the result as JSON, with `top_words` cut to `k` entries
/// when `k > 0`. `method` is one of `grad`, `grad_x_input`,
/// `contrastive_grad`, `contrastive_grad_x_input`.
///
/// # Safety
/// String arguments must be nul-terminated; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amplify_model_explain(
    model: *const AmplifyModel,
    text: *const c_char,
    target: i64,
    method: *const c_char,
    k: usize,
    out: *mut *mut c_char,
) -> AmplifyStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let text = str_arg(text, "text")?;
        let method: AttributionMethod = str_arg(method, "method")?
            .parse()
            .map_err(|e| Failure::new(AmplifyStatus::InvalidArgument, e))?;
        let (seg, input) = m.inner.tokenize_text(text);
        let target = if target < 0 {
            argmax(&m.inner.forward(&input).map_err(|e| Failure::new(AmplifyStatus::Model, e))?)
        } else {
            target as usize
        };
        let mut result = attribute(&m.inner, &input, &seg, target, method, &AttributionOptions::default())
            .map_err(|e| Failure::new(AmplifyStatus::InvalidArgument, e))?;
        if k > 0 {
            result.top_words.truncate(k);
        }
        let json = serde_json::to_string(&result).map_err(|e| Failure::new(AmplifyStatus::Model, e))?;
        write_out(out, owned(json)?)
    })
}

/// Loads a JSON Lines task file.
///
/// # Safety
/// `path` must be nul-terminated, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amplify_task_load(path: *const c_char, out: *mut *mut AmplifyTask) -> AmplifyStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = load_task(path).map_err(|e| Failure::new(AmplifyStatus::Io, e))?;
        write_out(out, Box::into_raw(Box::new(AmplifyTask { inner })))
    })
}

/// # Safety
/// `task` must come from [`amplify_task_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn amplify_task_free(task: *mut AmplifyTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Number of examples, or 0 for NULL.
///
/// # Safety
/// `task` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn amplify_task_num_examples(task: *const AmplifyTask) -> usize {
    task.as_ref().map_or(0, |t| t.inner.examples.len())
}

/// Parses a completion for example `example_id` with the task's labels,
/// choices and answer delimiter. `out` is set to NULL when no label can
/// be extracted.
///
/// # Safety
/// String arguments must be nul-terminated; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amplify_task_parse_answer(
    task: *const AmplifyTask,
    example_id: *const c_char,
    raw_text: *const c_char,
    out: *mut *mut c_char,
) -> AmplifyStatus {
    guard(|| {
        let t = &ref_arg(task, "task")?.inner;
        let id = str_arg(example_id, "example_id")?;
        let raw = str_arg(raw_text, "raw_text")?;
        let example = t
            .get(id)
            .ok_or_else(|| Failure::new(AmplifyStatus::NotFound, format!("no example {id}")))?;
        let parsed = parse_answer(raw, Some(example), &t.label_set, &t.answer_delimiter);
        write_out(out, parsed_ptr(parsed)?)
    })
}

fn parsed_ptr(parsed: ParsedAnswer) -> Result<*mut c_char, Failure> {
    match parsed {
        ParsedAnswer::Label(l) => owned(l),
        ParsedAnswer::ParseFailure => Ok(ptr::null_mut()),
    }
}

/// Parses a completion against a bare label list. `out` is set to NULL
/// when no label can be extracted.
///
/// # Safety
/// `labels` must point to `n_labels` nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn amplify_parse_answer(
    raw_text: *const c_char,
    labels: *const *const c_char,
    n_labels: usize,
    delimiter: *const c_char,
    out: *mut *mut c_char,
) -> AmplifyStatus {
    guard(|| {
        let raw = str_arg(raw_text, "raw_text")?;
        let labels = LabelSet::new(str_array(labels, n_labels, "labels")?)
            .map_err(|e| Failure::new(AmplifyStatus::InvalidArgument, e))?;
        let delimiter = str_arg(delimiter, "delimiter")?;
        write_out(out, parsed_ptr(parse_answer(raw, None, &labels, delimiter))?)
    })
}

/// Renders the rationale sentence for `keywords` and `label` with a
/// built-in template (`standard` or `typical-person`).
///
/// # Safety
/// `keywords` must point to `n_keywords` nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn amplify_render_rationale(
    keywords: *const *const c_char,
    n_keywords: usize,
    label: *const c_char,
    template: *const c_char,
    out: *mut *mut c_char,
) -> AmplifyStatus {
    guard(|| {
        let keywords = str_array(keywords, n_keywords, "keywords")?;
        let label = str_arg(label, "label")?;
        let template = RationaleTemplate::builtin(str_arg(template, "template")?)
            .map_err(|e| Failure::new(AmplifyStatus::InvalidArgument, e))?;
        let text = render_rationale(&keywords, label, &template)
            .map_err(|e| Failure::new(AmplifyStatus::InvalidArgument, e))?;
        write_out(out, owned(text)?)
    })
}

/// Response-cache key (64 hex chars) for a completion request.
///
/// # Safety
/// `stop` must point to `n_stop` nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn amplify_cache_key(
    model_name: *const c_char,
    prompt: *const c_char,
    temperature: f64,
    max_tokens: u32,
    stop: *const *const c_char,
    n_stop: usize,
    out: *mut *mut c_char,
) -> AmplifyStatus {
    guard(|| {
        let mut req = CompletionRequest::new(str_arg(model_name, "model_name")?, str_arg(prompt, "prompt")?);
        req.temperature = temperature;
        req.max_tokens = max_tokens;
        req.stop = str_array(stop, n_stop, "stop")?.into_iter().map(String::from).collect();
        write_out(out, owned(cache_key(&req))?)
    })
}
