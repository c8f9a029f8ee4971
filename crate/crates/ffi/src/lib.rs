//! C interface to memt5: load checkpoints and vocabularies, run greedy
//! generation and loss evaluation, count attention scores.
//!
//! Every fallible function returns a [`Memt5Status`]; on failure the
//! message is available from [`memt5_last_error_message`] on the same
//! thread. Handles are opaque and must be released with their `_free`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use memt5::mem::chunk_input;
use memt5::model::{Model, ModelConfig, Seq2SeqBatch};
use memt5::tensor::Float;
use memt5::tokenizer::Vocab;
use memt5::train::TrainState;
use memt5::verify::count_attention_cost;
use memt5::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Memt5Status {
    Ok = 0,
    /// Invalid argument or configuration.
    Usage = 1,
    /// Unreadable, malformed or incompatible data.
    Data = 2,
    /// Non-finite values.
    Numeric = 3,
    Verification = 4,
    NullPointer = 5,
    /// Output buffer too small; the required length was written.
    BufferTooSmall = 6,
    Panic = 7,
}

/// Loaded model parameters with their configuration.
pub struct Memt5Model {
    inner: Model<f32>,
}

pub struct Memt5Vocab {
    inner: Vocab,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Memt5AttentionCost {
    pub allowed: u64,
    pub dense: u64,
    pub ratio: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(e: Error) -> Memt5Status {
    let status = match e.exit_code() {
        1 => Memt5Status::Usage,
        2 => Memt5Status::Data,
        3 => Memt5Status::Numeric,
        _ => Memt5Status::Verification,
    };
    set_error(e.to_string());
    status
}

fn guard(f: impl FnOnce() -> Memt5Status) -> Memt5Status {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            Memt5Status::Panic
        }
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            set_error(format!("`{}` is null", stringify!($p)));
            return Memt5Status::NullPointer;
        })+
    };
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Memt5Status> {
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("`{name}` is not valid UTF-8"));
        Memt5Status::Usage
    })
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize) -> &'a [T] {
    if len == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(p, len)
    }
}

/// Copies `src` into a caller buffer, reporting the needed length.
unsafe fn write_ids(src: &[u32], out: *mut u32, cap: usize, out_len: *mut usize) -> Memt5Status {
    *out_len = src.len();
    if src.len() > cap {
        set_error(format!("output needs {} slots, buffer has {cap}", src.len()));
        return Memt5Status::BufferTooSmall;
    }
    if !src.is_empty() {
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Memt5Status::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn memt5_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Free the result
/// with [`memt5_string_free`].
#[no_mangle]
pub extern "C" fn memt5_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn memt5_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads the parameters stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn memt5_model_load(path: *const c_char, out: *mut *mut Memt5Model) -> Memt5Status {
    guard(|| {
        non_null!(path, out);
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match TrainState::load(Path::new(path)).and_then(|s| Model::from_params(s.config.model, s.params)) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(Memt5Model { inner: m }));
                Memt5Status::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Builds a freshly initialized model from a JSON model configuration.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn memt5_model_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut Memt5Model,
) -> Memt5Status {
    guard(|| {
        non_null!(config_json, out);
        let text = match str_arg(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let built = serde_json::from_str::<ModelConfig>(text)
            .map_err(|e| Error::Config(e.to_string()))
            .and_then(|c| Model::new(c, seed));
        match built {
            Ok(m) => {
                *out = Box::into_raw(Box::new(Memt5Model { inner: m }));
                Memt5Status::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `model` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn memt5_model_free(model: *mut Memt5Model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn memt5_model_num_params(model: *const Memt5Model, out: *mut usize) -> Memt5Status {
    guard(|| {
        non_null!(model, out);
        *out = (*model).inner.params.num_elements();
        Memt5Status::Ok
    })
}

/// Encoder capacity (`n_chunks * chunk_len`) and vocabulary size.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn memt5_model_dims(
    model: *const Memt5Model,
    source_len: *mut usize,
    vocab_size: *mut usize,
) -> Memt5Status {
    guard(|| {
        non_null!(model, source_len, vocab_size);
        let c = &(*model).inner.config;
        *source_len = c.source_len();
        *vocab_size = c.vocab_size;
        Memt5Status::Ok
    })
}

/// Greedy decoding of one source sequence (truncated to the encoder
/// capacity). Writes at most `out_cap` ids and sets `out_len` to the
/// generated length, which includes the end-of-sequence id when produced.
///
/// # Safety
/// `source` must point to `source_len` ids; `out` to `out_cap` writable ids.
#[no_mangle]
pub unsafe extern "C" fn memt5_model_generate(
    model: *const Memt5Model,
    source: *const u32,
    source_len: usize,
    max_len: usize,
    out: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> Memt5Status {
    guard(|| {
        non_null!(model, source, out, out_len);
        let m = &(*model).inner;
        let c = &m.config;
        let ids = slice_arg(source, source_len);
        let result = chunk_input(ids, c.chunk_len, c.n_chunks, true).and_then(|b| m.greedy_decode(&b, max_len));
        match result {
            Ok(mut o) => write_ids(&o.remove(0), out, out_cap, out_len),
            Err(e) => fail(e),
        }
    })
}

/// Mean token cross-entropy of `target` given `source`, without dropout.
///
/// # Safety
/// Pointers must reference `*_len` readable ids; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn memt5_model_loss(
    model: *const Memt5Model,
    source: *const u32,
    source_len: usize,
    target: *const u32,
    target_len: usize,
    loss: *mut f64,
) -> Memt5Status {
    guard(|| {
        non_null!(model, source, target, loss);
        let m = &(*model).inner;
        let c = &m.config;
        let src = slice_arg(source, source_len);
        let tgt = slice_arg(target, target_len).to_vec();
        let result = chunk_input(src, c.chunk_len, c.n_chunks, false)
            .and_then(|b| Seq2SeqBatch::new(b, &[tgt]))
            .and_then(|batch| {
                let (f, l) = m.loss(&batch, None)?;
                Ok(f.graph.value(l).item().as_f64())
            });
        match result {
            Ok(v) => {
                *loss = v;
                Memt5Status::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn memt5_vocab_load(path: *const c_char, out: *mut *mut Memt5Vocab) -> Memt5Status {
    guard(|| {
        non_null!(path, out);
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Vocab::load(Path::new(path)) {
            Ok(v) => {
                *out = Box::into_raw(Box::new(Memt5Vocab { inner: v }));
                Memt5Status::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `vocab` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn memt5_vocab_free(vocab: *mut Memt5Vocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// # Safety
/// `vocab` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn memt5_vocab_size(vocab: *const Memt5Vocab, out: *mut usize) -> Memt5Status {
    guard(|| {
        non_null!(vocab, out);
        *out = (*vocab).inner.len();
        Memt5Status::Ok
    })
}

/// Encodes `text` to ids (no end-of-sequence id is appended).
///
/// # Safety
/// `text` must be NUL-terminated; `out` must hold `out_cap` ids.
#[no_mangle]
pub unsafe extern "C" fn memt5_vocab_encode(
    vocab: *const Memt5Vocab,
    text: *const c_char,
    out: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> Memt5Status {
    guard(|| {
        non_null!(vocab, text, out, out_len);
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        write_ids(&(*vocab).inner.encode(text), out, out_cap, out_len)
    })
}

/// Decodes ids up to the first end-of-sequence id into a new string; free
/// it with [`memt5_string_free`].
///
/// # Safety
/// `ids` must point to `len` readable ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn memt5_vocab_decode(
    vocab: *const Memt5Vocab,
    ids: *const u32,
    len: usize,
    out: *mut *mut c_char,
) -> Memt5Status {
    guard(|| {
        non_null!(vocab, ids, out);
        match (*vocab).inner.decode_until_eos(slice_arg(ids, len)) {
            Ok(s) => {
                *out = CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw();
                Memt5Status::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Exact count of admissible encoder attention scores against the dense count.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn memt5_attention_cost(
    n_chunks: usize,
    chunk_len: usize,
    mem_tokens: usize,
    out: *mut Memt5AttentionCost,
) -> Memt5Status {
    guard(|| {
        non_null!(out);
        match count_attention_cost(n_chunks, chunk_len, mem_tokens) {
            Ok(c) => {
                *out = Memt5AttentionCost {
                    allowed: c.allowed as u64,
                    dense: c.dense as u64,
                    ratio: c.ratio,
                };
                Memt5Status::Ok
            }
            Err(e) => fail(e),
        }
    })
}
