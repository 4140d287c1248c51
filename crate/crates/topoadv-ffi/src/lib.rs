//! C ABI for loading trained classifier checkpoints and running forward
//! passes from other languages.
//!
//! Models are opaque handles owned by this library: create one with
//! [`topoadv_model_load`], release it with [`topoadv_model_free`]. Every
//! fallible call returns a [`TopoadvStatus`]; on failure the per-thread
//! message from [`topoadv_last_error`] describes what went wrong. Matrices
//! cross the boundary as row-major `double` buffers with caller-allocated
//! outputs. The generated header lives at `include/topoadv.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use topoadv::model::Mlp;
use topoadv::numerics::Matrix;
use topoadv::Error;

/// Opaque handle to a loaded model and its checkpoint metadata.
pub struct TopoadvModel {
    inner: Mlp,
    seed: u64,
    epoch: u64,
}

/// Result of every fallible call. Values match the CLI's exit codes where
/// a counterpart exists.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopoadvStatus {
    /// Success.
    Ok = 0,
    /// Null pointer, zero row count, or a path that is not valid UTF-8.
    InvalidArgument = 1,
    /// Configuration or shape mismatch (wrong input width).
    ConfigError = 2,
    /// I/O failure or malformed checkpoint.
    IoError = 3,
    /// Non-finite or degenerate numerical input.
    NumericalError = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> =
        RefCell::new(CString::new("").expect("empty string has no NUL"));
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', "?");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("NUL bytes replaced above");
    });
}

fn fail(status: TopoadvStatus, msg: &str) -> TopoadvStatus {
    set_error(msg);
    status
}

fn fail_with(err: &Error) -> TopoadvStatus {
    let status = match err {
        Error::Config(_) | Error::Shape { .. } => TopoadvStatus::ConfigError,
        Error::Io(_) | Error::Checkpoint(_) | Error::Parse { .. } => TopoadvStatus::IoError,
        Error::NonFinite(_) | Error::Degenerate(_) => TopoadvStatus::NumericalError,
    };
    fail(status, &err.to_string())
}

/// Message from the most recent failing call on this thread, empty if none
/// failed yet. The pointer stays valid until the next failing call on the
/// same thread.
#[no_mangle]
pub extern "C" fn topoadv_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn topoadv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model checkpoint and writes the new handle to `out`.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to writable
/// storage for one pointer. On success the handle must be released with
/// [`topoadv_model_free`] exactly once.
#[no_mangle]
pub unsafe extern "C" fn topoadv_model_load(
    path: *const c_char,
    out: *mut *mut TopoadvModel,
) -> TopoadvStatus {
    if path.is_null() || out.is_null() {
        return fail(TopoadvStatus::InvalidArgument, "path and out must be non-null");
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(p) => p,
        Err(_) => return fail(TopoadvStatus::InvalidArgument, "path is not valid UTF-8"),
    };
    match Mlp::load(Path::new(path)) {
        Ok((inner, seed, epoch)) => {
            *out = Box::into_raw(Box::new(TopoadvModel { inner, seed, epoch }));
            TopoadvStatus::Ok
        }
        Err(e) => fail_with(&e),
    }
}

/// Releases a handle returned by [`topoadv_model_load`]. A null pointer is
/// a no-op.
///
/// # Safety
/// `model` must be a pointer previously returned by [`topoadv_model_load`]
/// and not freed since, or null.
#[no_mangle]
pub unsafe extern "C" fn topoadv_model_free(model: *mut TopoadvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

macro_rules! accessor {
    ($(#[$doc:meta])* $name:ident, $ty:ty, $get:expr) => {
        $(#[$doc])*
        ///
        /// # Safety
        /// `model` must be a live handle from [`topoadv_model_load`], or
        /// null (which returns 0).
        #[no_mangle]
        pub unsafe extern "C" fn $name(model: *const TopoadvModel) -> $ty {
            #[allow(clippy::redundant_closure_call)]
            match model.as_ref() {
                Some(m) => ($get)(m),
                None => 0 as $ty,
            }
        }
    };
}

accessor!(
    /// Width of the input the model expects.
    topoadv_model_input_dim,
    usize,
    |m: &TopoadvModel| m.inner.input_dim()
);
accessor!(
    /// Width of the penultimate feature layer.
    topoadv_model_feature_dim,
    usize,
    |m: &TopoadvModel| m.inner.feature_dim()
);
accessor!(
    /// Number of output classes.
    topoadv_model_num_classes,
    usize,
    |m: &TopoadvModel| m.inner.num_classes()
);
accessor!(
    /// Seed recorded in the checkpoint.
    topoadv_model_seed,
    u64,
    |m: &TopoadvModel| m.seed
);
accessor!(
    /// Training epoch recorded in the checkpoint.
    topoadv_model_epoch,
    u64,
    |m: &TopoadvModel| m.epoch
);

unsafe fn input_matrix(
    model: *const TopoadvModel,
    x: *const f64,
    rows: usize,
    cols: usize,
) -> Result<(&'static TopoadvModel, Matrix), TopoadvStatus> {
    let Some(model) = model.as_ref() else {
        return Err(fail(TopoadvStatus::InvalidArgument, "model must be non-null"));
    };
    if x.is_null() || rows == 0 {
        return Err(fail(
            TopoadvStatus::InvalidArgument,
            "x must be non-null and rows positive",
        ));
    }
    if cols != model.inner.input_dim() {
        return Err(fail(
            TopoadvStatus::ConfigError,
            &format!("input width {cols} does not match the model's {}", model.inner.input_dim()),
        ));
    }
    let data = std::slice::from_raw_parts(x, rows * cols);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(fail(TopoadvStatus::NumericalError, "input contains a non-finite value"));
    }
    let matrix = Matrix::from_shape_vec((rows, cols), data.to_vec())
        .expect("length equals rows * cols by construction");
    Ok((model, matrix))
}

/// Runs the model on `rows` inputs of width `cols` (row-major) and writes
/// `rows * num_classes` logits to `logits_out`.
///
/// # Safety
/// `model` must be a live handle; `x` must hold `rows * cols` doubles;
/// `logits_out` must have room for `rows * num_classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn topoadv_model_logits(
    model: *const TopoadvModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    logits_out: *mut f64,
) -> TopoadvStatus {
    let (model, input) = match input_matrix(model, x, rows, cols) {
        Ok(v) => v,
        Err(status) => return status,
    };
    if logits_out.is_null() {
        return fail(TopoadvStatus::InvalidArgument, "logits_out must be non-null");
    }
    let (_, logits) = model.inner.forward(&input);
    let flat = logits.as_standard_layout();
    std::slice::from_raw_parts_mut(logits_out, rows * model.inner.num_classes())
        .copy_from_slice(flat.as_slice().expect("standard layout has a contiguous slice"));
    TopoadvStatus::Ok
}

/// Runs the model and writes `rows * feature_dim` penultimate-layer
/// features to `features_out`.
///
/// # Safety
/// As [`topoadv_model_logits`], with `features_out` sized
/// `rows * feature_dim`.
#[no_mangle]
pub unsafe extern "C" fn topoadv_model_features(
    model: *const TopoadvModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    features_out: *mut f64,
) -> TopoadvStatus {
    let (model, input) = match input_matrix(model, x, rows, cols) {
        Ok(v) => v,
        Err(status) => return status,
    };
    if features_out.is_null() {
        return fail(TopoadvStatus::InvalidArgument, "features_out must be non-null");
    }
    let (features, _) = model.inner.forward(&input);
    let flat = features.as_standard_layout();
    std::slice::from_raw_parts_mut(features_out, rows * model.inner.feature_dim())
        .copy_from_slice(flat.as_slice().expect("standard layout has a contiguous slice"));
    TopoadvStatus::Ok
}

/// Writes the predicted class of each row to `labels_out` (ties go to the
/// lowest class index).
///
/// # Safety
/// As [`topoadv_model_logits`], with `labels_out` sized `rows`.
#[no_mangle]
pub unsafe extern "C" fn topoadv_model_predict(
    model: *const TopoadvModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    labels_out: *mut u32,
) -> TopoadvStatus {
    let (model, input) = match input_matrix(model, x, rows, cols) {
        Ok(v) => v,
        Err(status) => return status,
    };
    if labels_out.is_null() {
        return fail(TopoadvStatus::InvalidArgument, "labels_out must be non-null");
    }
    let preds = model.inner.predict(&input);
    let out = std::slice::from_raw_parts_mut(labels_out, rows);
    for (slot, pred) in out.iter_mut().zip(preds) {
        *slot = pred as u32;
    }
    TopoadvStatus::Ok
}
