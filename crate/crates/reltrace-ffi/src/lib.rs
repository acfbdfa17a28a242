//! C ABI surface over the core tracing library: opaque handles, integer
//! error codes, and a thread-local last-error message.
//!
//! Error codes: 0 success, 1 null argument or invalid handle, 2 config
//! error, 3 data/IO error, 4 numerical-invariant violation (matching the
//! CLI exit codes).

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;

use libc::{c_char, c_double, c_int, size_t};

use reltrace::model::{forward, load_weights, ModelWeights, TraceBundle};
use reltrace::tracing::head_contribution;
use reltrace::Error;

pub const RT_OK: c_int = 0;
pub const RT_ERR_NULL: c_int = 1;
pub const RT_ERR_CONFIG: c_int = 2;
pub const RT_ERR_DATA: c_int = 3;
pub const RT_ERR_INVARIANT: c_int = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(err: Error) -> c_int {
    let code = err.exit_code();
    set_error(&err.to_string());
    code
}

/// Opaque model-weights handle.
pub struct RtWeights(ModelWeights);

/// Opaque trace handle for one forward pass.
pub struct RtTrace(TraceBundle);

/// Message for the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads model weights from a container file into a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rt_weights_load(path: *const c_char, out: *mut *mut RtWeights) -> c_int {
    if path.is_null() || out.is_null() {
        set_error("null argument");
        return RT_ERR_NULL;
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("path is not valid UTF-8");
            return RT_ERR_CONFIG;
        }
    };
    match load_weights(Path::new(path)) {
        Ok(w) => {
            *out = Box::into_raw(Box::new(RtWeights(w)));
            RT_OK
        }
        Err(e) => fail(e),
    }
}

/// Releases a weights handle. Passing NULL is a no-op.
///
/// # Safety
/// `w` must be a pointer returned by `rt_weights_load` (or NULL), and must
/// not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rt_weights_free(w: *mut RtWeights) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Number of residual-stream dimensions for the loaded model.
///
/// # Safety
/// `w` must be a valid weights handle.
#[no_mangle]
pub unsafe extern "C" fn rt_d_model(w: *const RtWeights) -> size_t {
    if w.is_null() {
        return 0;
    }
    (*w).0.config.d_model
}

/// Runs an instrumented forward pass over `tokens[0..n]`.
///
/// # Safety
/// `w` must be a valid weights handle, `tokens` must point to `n` ids, and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rt_forward(
    w: *const RtWeights,
    tokens: *const u32,
    n: size_t,
    out: *mut *mut RtTrace,
) -> c_int {
    if w.is_null() || tokens.is_null() || out.is_null() || n == 0 {
        set_error("null argument or empty token sequence");
        return RT_ERR_NULL;
    }
    let tokens = std::slice::from_raw_parts(tokens, n);
    match forward(&(*w).0, tokens) {
        Ok(trace) => {
            *out = Box::into_raw(Box::new(RtTrace(trace)));
            RT_OK
        }
        Err(e) => fail(e),
    }
}

/// Releases a trace handle. Passing NULL is a no-op.
///
/// # Safety
/// `t` must be a pointer returned by `rt_forward` (or NULL), and must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rt_trace_free(t: *mut RtTrace) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Copies the final-position-independent logits row for position `pos`
/// into `out[0..len]`; `len` must equal the vocabulary size.
///
/// # Safety
/// `t` must be a valid trace handle and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rt_trace_logits(
    t: *const RtTrace,
    pos: size_t,
    out: *mut c_double,
    len: size_t,
) -> c_int {
    if t.is_null() || out.is_null() {
        set_error("null argument");
        return RT_ERR_NULL;
    }
    let trace = &(*t).0;
    if pos >= trace.seq_len() {
        set_error("position out of range");
        return RT_ERR_CONFIG;
    }
    if len != trace.config.vocab_size {
        set_error("output length must equal vocab size");
        return RT_ERR_CONFIG;
    }
    let row = trace.logits.row(pos);
    std::slice::from_raw_parts_mut(out, len).copy_from_slice(row);
    RT_OK
}

/// Writes the per-head attention contribution `Δ_att,h(t)` into
/// `out[0..len]`; `len` must equal d_model.
///
/// # Safety
/// `w` and `t` must be valid handles and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rt_head_contribution(
    w: *const RtWeights,
    t: *const RtTrace,
    layer: size_t,
    head: size_t,
    target: size_t,
    out: *mut c_double,
    len: size_t,
) -> c_int {
    if w.is_null() || t.is_null() || out.is_null() {
        set_error("null argument");
        return RT_ERR_NULL;
    }
    let trace = &(*t).0;
    if len != trace.config.d_model {
        set_error("output length must equal d_model");
        return RT_ERR_CONFIG;
    }
    match head_contribution(trace, &(*w).0, layer, head, target) {
        Ok(c) => {
            std::slice::from_raw_parts_mut(out, len).copy_from_slice(&c.vector);
            RT_OK
        }
        Err(e) => fail(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use reltrace::corpus::{generate_corpus, plant_model, SyntheticSpec};
    use reltrace::model::{save_weights, ModelConfig};

    fn planted_file(dir: &Path) -> (std::path::PathBuf, ModelConfig, Vec<u32>) {
        let spec = SyntheticSpec {
            n_relations: 3,
            entities_per_relation: 4,
            cues_per_relation: 2,
            n_fillers: 6,
            examples_per_relation: 4,
            templates: vec![reltrace::corpus::Template {
                slots: vec![
                    reltrace::corpus::Slot::Filler,
                    reltrace::corpus::Slot::E1,
                    reltrace::corpus::Slot::Cue,
                    reltrace::corpus::Slot::E2,
                ],
            }],
            seed: 3,
        };
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_head: 8,
            d_ff: 48,
            vocab_size: spec.vocab_size(),
            use_rope: false,
            norm_eps: 1e-6,
            max_seq_len: 64,
        };
        let weights = plant_model(&spec, &config).unwrap();
        let path = dir.join("w.rtrc");
        save_weights(&weights, &path).unwrap();
        let corpus = generate_corpus(&spec).unwrap();
        let prompt =
            reltrace::corpus::build_prompt(&corpus.examples[0], true).unwrap();
        (path, config, prompt.tokens)
    }

    #[test]
    fn load_forward_and_query_through_ffi() {
        let dir = tempfile::tempdir().unwrap();
        let (path, config, tokens) = planted_file(dir.path());
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        unsafe {
            let mut w: *mut RtWeights = std::ptr::null_mut();
            assert_eq!(rt_weights_load(cpath.as_ptr(), &mut w), RT_OK);
            assert_eq!(rt_d_model(w), config.d_model);
            let mut t: *mut RtTrace = std::ptr::null_mut();
            assert_eq!(rt_forward(w, tokens.as_ptr(), tokens.len(), &mut t), RT_OK);
            let mut logits = vec![0.0; config.vocab_size];
            assert_eq!(
                rt_trace_logits(t, tokens.len() - 1, logits.as_mut_ptr(), logits.len()),
                RT_OK
            );
            assert!(logits.iter().all(|v| v.is_finite()));
            let mut contrib = vec![0.0; config.d_model];
            assert_eq!(
                rt_head_contribution(w, t, 0, 0, tokens.len() - 1, contrib.as_mut_ptr(), contrib.len()),
                RT_OK
            );
            // Out-of-range head is an invariant-class error with a message.
            let code = rt_head_contribution(
                w,
                t,
                0,
                99,
                tokens.len() - 1,
                contrib.as_mut_ptr(),
                contrib.len(),
            );
            assert_eq!(code, RT_ERR_INVARIANT);
            let msg = CStr::from_ptr(rt_last_error()).to_str().unwrap();
            assert!(msg.contains("head"));
            rt_trace_free(t);
            rt_weights_free(w);
        }
    }

    #[test]
    fn null_and_missing_file_errors() {
        unsafe {
            let mut w: *mut RtWeights = std::ptr::null_mut();
            assert_eq!(rt_weights_load(std::ptr::null(), &mut w), RT_ERR_NULL);
            let missing = CString::new("/nonexistent/w.rtrc").unwrap();
            assert_eq!(rt_weights_load(missing.as_ptr(), &mut w), RT_ERR_DATA);
            rt_weights_free(std::ptr::null_mut());
            rt_trace_free(std::ptr::null_mut());
        }
    }
}
