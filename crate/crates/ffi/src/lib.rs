//! C interface. Every function returns a `MipicStatus`; on failure the
//! message is available from `mipic_last_error_message` on the same thread.
//! Matrices are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mipic_core::checkpoint::load_checkpoint;
use mipic_core::encoder::Model;
use mipic_core::evaluator::{embed, spearman};
use mipic_core::similarity::cka_linear;
use mipic_core::tensor::Matrix;
use mipic_core::vocab::Vocabulary;
use mipic_core::Error;

/// Status codes; the non-zero values match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MipicStatus {
    Ok = 0,
    /// Null pointer, bad length or non-UTF-8 string.
    InvalidArgument = 1,
    /// Malformed checkpoint or input data.
    Data = 2,
    /// Degenerate or non-finite numbers.
    Numerical = 3,
    Io = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// Opaque loaded checkpoint.
pub struct MipicModel {
    model: Model,
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
    Ok(s) => s,
    Err(_) => panic!("version string"),
};

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: MipicStatus, msg: &str) -> MipicStatus {
    set_error(msg);
    status
}

fn from_core(e: &Error) -> MipicStatus {
    let status = match e.exit_code() {
        3 => MipicStatus::Numerical,
        4 => MipicStatus::Io,
        _ => MipicStatus::Data,
    };
    fail(status, &e.to_string())
}

/// Runs `f`, turning panics into `Internal` and clearing the error on success.
fn guard(f: impl FnOnce() -> MipicStatus) -> MipicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(MipicStatus::Ok) => {
            set_error("");
            MipicStatus::Ok
        }
        Ok(status) => status,
        Err(_) => fail(MipicStatus::Internal, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, MipicStatus> {
    if p.is_null() {
        return Err(fail(MipicStatus::InvalidArgument, &format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MipicStatus::InvalidArgument, &format!("{what} is not UTF-8")))
}

unsafe fn matrix_arg(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, MipicStatus> {
    if p.is_null() || rows == 0 || cols == 0 {
        return Err(fail(MipicStatus::InvalidArgument, &format!("{what} is null or empty")));
    }
    let data = std::slice::from_raw_parts(p, rows * cols).to_vec();
    Matrix::from_vec(rows, cols, data).map_err(|e| from_core(&e))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn mipic_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn mipic_version() -> *const c_char {
    VERSION.as_ptr()
}

/// Loads a checkpoint written by `mipic train`. On success `*out` owns the
/// model; release it with `mipic_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mipic_model_load(path: *const c_char, out: *mut *mut MipicModel) -> MipicStatus {
    guard(|| {
        if out.is_null() {
            return fail(MipicStatus::InvalidArgument, "out is null");
        }
        *out = std::ptr::null_mut();
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(Path::new(path)) {
            Ok(loaded) => {
                *out = Box::into_raw(Box::new(MipicModel {
                    model: loaded.model,
                    vocab: loaded.vocab,
                }));
                MipicStatus::Ok
            }
            Err(e) => from_core(&e),
        }
    })
}

/// # Safety
/// `model` must come from `mipic_model_load` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mipic_model_free(model: *mut MipicModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Full embedding width, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn mipic_model_hidden_dim(model: *const MipicModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.hidden_dim)
}

/// Writes the L2-normalized `dim`-wide prefix embedding of `sentence` into
/// `out[0..dim]`. `dim` must be one of the model's nested widths and
/// `out_len >= dim`.
///
/// # Safety
/// `model` must be live, `sentence` NUL-terminated, `out` valid for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mipic_model_embed(
    model: *const MipicModel,
    sentence: *const c_char,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> MipicStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(MipicStatus::InvalidArgument, "model is null");
        };
        let sentence = match str_arg(sentence, "sentence") {
            Ok(s) => s,
            Err(s) => return s,
        };
        if out.is_null() || out_len < dim {
            return fail(
                MipicStatus::InvalidArgument,
                &format!("output buffer of {out_len} doubles cannot hold {dim}"),
            );
        }
        match embed(&m.model, &m.vocab, &[sentence.to_string()], dim) {
            Ok(e) => {
                std::slice::from_raw_parts_mut(out, dim).copy_from_slice(e.row(0));
                MipicStatus::Ok
            }
            Err(e) => from_core(&e),
        }
    })
}

/// Linear CKA between `x` (rows × x_cols) and `y` (rows × y_cols).
///
/// # Safety
/// Buffers must hold `rows * cols` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mipic_cka(
    x: *const f64,
    x_cols: usize,
    y: *const f64,
    y_cols: usize,
    rows: usize,
    out: *mut f64,
) -> MipicStatus {
    guard(|| {
        if out.is_null() {
            return fail(MipicStatus::InvalidArgument, "out is null");
        }
        let (x, y) = match (matrix_arg(x, rows, x_cols, "x"), matrix_arg(y, rows, y_cols, "y")) {
            (Ok(x), Ok(y)) => (x, y),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match cka_linear(&x, &y) {
            Ok(c) if c.degenerate => fail(MipicStatus::Numerical, "a centered input is zero, CKA is undefined"),
            Ok(c) => {
                *out = c.value;
                MipicStatus::Ok
            }
            Err(e) => from_core(&e),
        }
    })
}

/// Spearman rank correlation of two length-`n` vectors.
///
/// # Safety
/// `a` and `b` must hold `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mipic_spearman(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> MipicStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(MipicStatus::InvalidArgument, "null pointer argument");
        }
        let a = std::slice::from_raw_parts(a, n);
        let b = std::slice::from_raw_parts(b, n);
        match spearman(a, b) {
            Ok(v) => {
                *out = v;
                MipicStatus::Ok
            }
            Err(e) => from_core(&e),
        }
    })
}
