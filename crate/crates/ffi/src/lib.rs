//! C ABI over the retrispec engine.
//!
//! Models and pools are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`RetrispecStatus`]; the message of
//! the most recent failure on the calling thread is available through
//! [`retrispec_last_error`]. Output buffers are caller-owned: when one is too
//! small the call writes the required length and returns
//! `RETRISPEC_STATUS_BUFFER_TOO_SMALL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use retrispec::decode::decode_speculative_raw;
use retrispec::decode::decode_autoregressive_raw;
use retrispec::{
    fit_ngram, DecodeLimits, DraftParams, Error, LanguageModel, NGramModel, PolicyMode, RunCounters,
    TriePool, VerificationPolicy,
};

/// Token ids are dense integers below the model's vocabulary size.
pub type RetrispecToken = u32;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrispecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    Io = 4,
    Data = 5,
    Structural = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrispecPolicyMode {
    Greedy = 0,
    TopK = 1,
    TopP = 2,
    Relaxed = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RetrispecPolicy {
    pub mode: RetrispecPolicyMode,
    pub k: usize,
    pub p: f64,
}

/// Draft retrieval settings. Zero fields take the library defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RetrispecDraftParams {
    pub max_draft_tokens: usize,
    pub prefix_max: usize,
    pub prefix_min: usize,
    pub backoff_retry_fraction: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RetrispecDecodeStats {
    pub tokens_generated: u64,
    pub model_calls: u64,
    pub accepted_draft_tokens: u64,
    pub draft_steps: u64,
    pub fallback_steps: u64,
    pub retrieval_seconds: f64,
    pub wall_seconds: f64,
}

/// Opaque n-gram reference model.
pub struct RetrispecModel(NGramModel);

/// Opaque retrieval pool.
pub struct RetrispecPool(TriePool);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Failure {
    Status(RetrispecStatus, String),
    Engine(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

fn fail(status: RetrispecStatus, msg: impl Into<String>) -> Failure {
    Failure::Status(status, msg.into())
}

fn status_of(e: &Error) -> RetrispecStatus {
    match e {
        Error::Input(_) => RetrispecStatus::InvalidInput,
        Error::Structural(_) => RetrispecStatus::Structural,
        Error::Config { .. } => RetrispecStatus::Config,
        Error::Data { .. } | Error::Format(_) => RetrispecStatus::Data,
        Error::Io { .. } => RetrispecStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RetrispecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RetrispecStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Engine(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(_) => {
            set_error("panic inside retrispec".into());
            RetrispecStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(fail(RetrispecStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn path_in<'a>(path: *const c_char) -> Result<&'a Path, Failure> {
    if path.is_null() {
        return Err(fail(RetrispecStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(RetrispecStatus::InvalidInput, "path is not UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(RetrispecStatus::NullPointer, format!("{what} handle is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(RetrispecStatus::NullPointer, "output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn retrispec_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Fits an add-alpha n-gram model. Sequences are concatenated in `tokens`
/// with their lengths in `lengths`.
///
/// # Safety
/// `tokens` must hold the sum of `lengths` ids, `lengths` must hold
/// `num_sequences` entries and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn retrispec_model_fit(
    tokens: *const RetrispecToken,
    lengths: *const usize,
    num_sequences: usize,
    order: usize,
    alpha: f64,
    vocab_size: usize,
    out: *mut *mut RetrispecModel,
) -> RetrispecStatus {
    guard(|| {
        let lengths = slice_in(lengths, num_sequences, "lengths")?;
        let total = lengths.iter().sum();
        let flat = slice_in(tokens, total, "tokens")?;
        let mut corpus = Vec::with_capacity(num_sequences);
        let mut at = 0;
        for &len in lengths {
            corpus.push(flat[at..at + len].to_vec());
            at += len;
        }
        put(out, RetrispecModel(fit_ngram(&corpus, order, alpha, vocab_size)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn retrispec_model_load(path: *const c_char, out: *mut *mut RetrispecModel) -> RetrispecStatus {
    guard(|| put(out, RetrispecModel(NGramModel::load(path_in(path)?)?)))
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn retrispec_model_save(model: *const RetrispecModel, path: *const c_char) -> RetrispecStatus {
    guard(|| Ok(handle(model, "model")?.0.save(path_in(path)?)?))
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn retrispec_model_free(model: *mut RetrispecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn retrispec_model_vocab_size(model: *const RetrispecModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.vocab_size())
}

/// Writes the next-token distribution after `context` into `probs`, which
/// must hold `vocab_size` doubles.
///
/// # Safety
/// `context` must hold `context_len` ids and `probs` must be valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn retrispec_model_next_distribution(
    model: *const RetrispecModel,
    context: *const RetrispecToken,
    context_len: usize,
    probs: *mut f64,
    cap: usize,
) -> RetrispecStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let ctx = slice_in(context, context_len, "context")?;
        let vocab = model.vocab_size();
        if cap < vocab {
            return Err(fail(
                RetrispecStatus::BufferTooSmall,
                format!("need {vocab} doubles, got {cap}"),
            ));
        }
        if probs.is_null() {
            return Err(fail(RetrispecStatus::NullPointer, "probs is null"));
        }
        let dist = model.next_distribution(ctx)?;
        ptr::copy_nonoverlapping(dist.probs().as_ptr(), probs, vocab);
        Ok(())
    })
}

/// Creates an empty pool. A `max_branch_depth` of 0 selects the default.
///
/// # Safety
/// `group_id` must be a NUL-terminated UTF-8 string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn retrispec_pool_new(
    group_id: *const c_char,
    vocab_size: usize,
    max_branch_depth: usize,
    out: *mut *mut RetrispecPool,
) -> RetrispecStatus {
    guard(|| {
        if group_id.is_null() {
            return Err(fail(RetrispecStatus::NullPointer, "group_id is null"));
        }
        let id = CStr::from_ptr(group_id)
            .to_str()
            .map_err(|_| fail(RetrispecStatus::InvalidInput, "group_id is not UTF-8"))?;
        let depth = if max_branch_depth == 0 {
            retrispec::trie::DEFAULT_MAX_BRANCH_DEPTH
        } else {
            max_branch_depth
        };
        put(out, RetrispecPool(TriePool::new(id, vocab_size, depth)))
    })
}

/// Indexes one knowledge text (all of its suffixes) into the pool.
///
/// # Safety
/// `pool` must be a live handle and `tokens` hold `len` ids.
#[no_mangle]
pub unsafe extern "C" fn retrispec_pool_insert_text(
    pool: *mut RetrispecPool,
    tokens: *const RetrispecToken,
    len: usize,
) -> RetrispecStatus {
    guard(|| {
        let pool = pool
            .as_mut()
            .ok_or_else(|| fail(RetrispecStatus::NullPointer, "pool handle is null"))?;
        Ok(pool.0.insert_text(slice_in(tokens, len, "tokens")?)?)
    })
}

/// Number of knowledge texts inserted, or 0 for a null handle.
///
/// # Safety
/// `pool` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn retrispec_pool_size_entries(pool: *const RetrispecPool) -> u64 {
    pool.as_ref().map_or(0, |p| p.0.size_entries())
}

/// # Safety
/// `pool` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn retrispec_pool_save(pool: *const RetrispecPool, path: *const c_char) -> RetrispecStatus {
    guard(|| Ok(handle(pool, "pool")?.0.save(path_in(path)?)?))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn retrispec_pool_load(path: *const c_char, out: *mut *mut RetrispecPool) -> RetrispecStatus {
    guard(|| put(out, RetrispecPool(TriePool::load(path_in(path)?)?)))
}

/// # Safety
/// `pool` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn retrispec_pool_free(pool: *mut RetrispecPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

unsafe fn emit(
    tokens: &[RetrispecToken],
    counters: &RunCounters,
    out_tokens: *mut RetrispecToken,
    cap: usize,
    out_len: *mut usize,
    stats: *mut RetrispecDecodeStats,
) -> Result<(), Failure> {
    if out_len.is_null() {
        return Err(fail(RetrispecStatus::NullPointer, "out_len is null"));
    }
    *out_len = tokens.len();
    if let Some(s) = stats.as_mut() {
        *s = RetrispecDecodeStats {
            tokens_generated: counters.tokens_generated,
            model_calls: counters.model_calls,
            accepted_draft_tokens: counters.accepted_draft_tokens,
            draft_steps: counters.draft_steps,
            fallback_steps: counters.fallback_steps,
            retrieval_seconds: counters.retrieval_seconds,
            wall_seconds: counters.wall_seconds,
        };
    }
    if cap < tokens.len() {
        return Err(fail(
            RetrispecStatus::BufferTooSmall,
            format!("need {} tokens, got {cap}", tokens.len()),
        ));
    }
    if !tokens.is_empty() {
        if out_tokens.is_null() {
            return Err(fail(RetrispecStatus::NullPointer, "out_tokens is null"));
        }
        ptr::copy_nonoverlapping(tokens.as_ptr(), out_tokens, tokens.len());
    }
    Ok(())
}

/// Greedy autoregressive decoding. Generated tokens (including a final EOS)
/// go to `out_tokens`; `stats` may be null.
///
/// # Safety
/// Handles must be live; `prompt` must hold `prompt_len` ids; `out_tokens`
/// must be valid for `cap` ids; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn retrispec_decode_autoregressive(
    model: *const RetrispecModel,
    prompt: *const RetrispecToken,
    prompt_len: usize,
    max_new_tokens: usize,
    eos: RetrispecToken,
    out_tokens: *mut RetrispecToken,
    cap: usize,
    out_len: *mut usize,
    stats: *mut RetrispecDecodeStats,
) -> RetrispecStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let prompt = slice_in(prompt, prompt_len, "prompt")?;
        let limits = DecodeLimits { max_new_tokens, eos };
        let (tokens, counters) = decode_autoregressive_raw(model, prompt, limits)?;
        emit(&tokens, &counters, out_tokens, cap, out_len, stats)
    })
}

/// Retrieval-drafted speculative decoding against `pool`. `params` may be
/// null for defaults. Output conventions match
/// [`retrispec_decode_autoregressive`].
///
/// # Safety
/// As for [`retrispec_decode_autoregressive`]; `pool` must be live and
/// `params` null or valid.
#[no_mangle]
pub unsafe extern "C" fn retrispec_decode_speculative(
    model: *const RetrispecModel,
    pool: *const RetrispecPool,
    prompt: *const RetrispecToken,
    prompt_len: usize,
    policy: RetrispecPolicy,
    params: *const RetrispecDraftParams,
    max_new_tokens: usize,
    eos: RetrispecToken,
    out_tokens: *mut RetrispecToken,
    cap: usize,
    out_len: *mut usize,
    stats: *mut RetrispecDecodeStats,
) -> RetrispecStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let pool = &handle(pool, "pool")?.0;
        let prompt = slice_in(prompt, prompt_len, "prompt")?;
        let policy = VerificationPolicy {
            mode: match policy.mode {
                RetrispecPolicyMode::Greedy => PolicyMode::Greedy,
                RetrispecPolicyMode::TopK => PolicyMode::TopK,
                RetrispecPolicyMode::TopP => PolicyMode::TopP,
                RetrispecPolicyMode::Relaxed => PolicyMode::Relaxed,
            },
            k: policy.k,
            p: policy.p,
        };
        let mut draft = DraftParams::default();
        if let Some(p) = params.as_ref() {
            if p.max_draft_tokens > 0 {
                draft.max_draft_tokens = p.max_draft_tokens;
            }
            if p.prefix_max > 0 {
                draft.prefix_max = p.prefix_max;
            }
            if p.prefix_min > 0 {
                draft.prefix_min = p.prefix_min;
            }
            if p.backoff_retry_fraction > 0.0 {
                draft.backoff_retry_fraction = p.backoff_retry_fraction;
            }
        }
        let limits = DecodeLimits { max_new_tokens, eos };
        let (tokens, counters) = decode_speculative_raw(model, pool, prompt, policy, draft, limits)?;
        emit(&tokens, &counters, out_tokens, cap, out_len, stats)
    })
}
