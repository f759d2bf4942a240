//! C ABI over `depthforge`.
//!
//! Every fallible function returns a [`DfStatus`]; on failure a message is
//! kept per thread and read with [`df_last_error`]. Models are opaque
//! handles owned by the caller and released with [`df_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use depthforge::evaluation::{compute_metrics, predict_depth, EvalOptions};
use depthforge::network::Model;
use depthforge::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    /// A file could not be read or decoded.
    File = 4,
    Format = 5,
    NonFinite = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

/// A loaded depth and pose model.
pub struct DfModel {
    model: Model<f32>,
}

/// The seven standard depth metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DfMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    // Interior NULs cannot cross the boundary.
    let clean = CString::new(message.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(clean));
}

fn status_of(e: &Error) -> DfStatus {
    match e {
        Error::Shape(_) => DfStatus::Shape,
        Error::InvalidArgument(_) | Error::Config(_) => DfStatus::InvalidArgument,
        Error::NonFinite(_) => DfStatus::NonFinite,
        Error::File { .. } | Error::Io(_) => DfStatus::File,
        Error::Format(_) | Error::Json(_) => DfStatus::Format,
    }
}

struct Failure(DfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DfStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DfStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let what = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {what}"));
            DfStatus::Internal
        }
    }
}

/// Borrows `len` values at `ptr`; `len == 0` accepts any pointer.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn df_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn df_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by the trainer or the command-line tool.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn df_model_load(path: *const c_char, out: *mut *mut DfModel) -> DfStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(DfStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
        let (model, _, _) = Model::<f32>::load(&PathBuf::from(path))?;
        *out = Box::into_raw(Box::new(DfModel { model }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`df_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn df_model_free(model: *mut DfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input size the model was built for.
///
/// # Safety
/// `model` must be a live handle; `width` and `height` writable pointers.
#[no_mangle]
pub unsafe extern "C" fn df_model_input_size(model: *const DfModel, width: *mut usize, height: *mut usize) -> DfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if width.is_null() || height.is_null() {
            return Err(null("width or height"));
        }
        let enc = &m.model.config.encoder;
        *width = enc.width;
        *height = enc.height;
        Ok(())
    })
}

/// Predicts depth, known up to scale, for one planar RGB image (`3 * height * width`
/// values in `[0, 1]`, channel-major) into `depth` (`height * width` values).
///
/// # Safety
/// `image` must hold `3 * width * height` floats and `depth` room for
/// `depth_len` floats.
#[no_mangle]
pub unsafe extern "C" fn df_model_predict(
    model: *const DfModel,
    image: *const f32,
    width: usize,
    height: usize,
    depth: *mut f32,
    depth_len: usize,
) -> DfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let pixels = width
            .checked_mul(height)
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure(DfStatus::InvalidArgument, format!("bad image size {width}x{height}")))?;
        if depth_len != pixels {
            return Err(Failure(
                DfStatus::Shape,
                format!("depth buffer holds {depth_len} values, image has {pixels} pixels"),
            ));
        }
        if depth.is_null() {
            return Err(null("depth"));
        }
        let rgb = slice(image, 3 * pixels, "image")?;
        let x = Tensor::from_vec(&[1, 3, height, width], rgb.to_vec())?;
        let pred = predict_depth(&m.model, &x)?.to_vec();
        std::slice::from_raw_parts_mut(depth, pixels).copy_from_slice(&pred);
        Ok(())
    })
}

/// Scores `pred` against sparse ground truth `gt` (0 marks missing), both
/// `height * width` values. Ground truth above `cap` is ignored; with
/// `median_scale` the prediction is first rescaled by the ratio of medians.
///
/// # Safety
/// `pred` and `gt` must hold `width * height` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn df_compute_metrics(
    pred: *const f32,
    gt: *const f32,
    width: usize,
    height: usize,
    cap: f64,
    median_scale: bool,
    out: *mut DfMetrics,
) -> DfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let n = width
            .checked_mul(height)
            .ok_or_else(|| Failure(DfStatus::InvalidArgument, "image size overflows".into()))?;
        let (p, g) = (slice(pred, n, "pred")?, slice(gt, n, "gt")?);
        let opts = EvalOptions {
            cap,
            median_scale,
            ..EvalOptions::default()
        };
        if !(cap.is_finite() && cap > opts.floor) {
            return Err(Failure(DfStatus::InvalidArgument, format!("cap must exceed {}, got {cap}", opts.floor)));
        }
        let m = compute_metrics(p, g, width, height, &opts)?;
        *out = DfMetrics {
            abs_rel: m.abs_rel,
            sq_rel: m.sq_rel,
            rmse: m.rmse,
            rmse_log: m.rmse_log,
            delta1: m.delta1,
            delta2: m.delta2,
            delta3: m.delta3,
        };
        Ok(())
    })
}
