//! C ABI over the restoration engine.
//!
//! Images cross the boundary as planar `float` RGB (`3 * height * width`
//! values in `[0, 1]`, channel-major). Every function returns a
//! [`CairStatus`]; on failure [`cair_last_error`] describes the cause.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use cair::config::RunConfig;
use cair::inference::{self, ModelView};
use cair::{metrics, weights, CairNet, Error, ParamStore, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CairStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptWeights = 4,
    ShapeMismatch = 5,
    Config = 6,
    NonFinite = 7,
    Panic = 8,
}

/// Opaque restorer: architecture plus loaded weights.
pub struct CairModel {
    net: CairNet,
    store: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CairStatus {
    match e {
        Error::Contract { .. } => CairStatus::InvalidArgument,
        Error::NonFinite { .. } | Error::Diverged { .. } => CairStatus::NonFinite,
        Error::Io { .. } | Error::Image { .. } => CairStatus::Io,
        Error::CorruptWeights(_) => CairStatus::CorruptWeights,
        Error::MissingParam(_) | Error::ParamShape { .. } => CairStatus::ShapeMismatch,
        Error::Config { .. } => CairStatus::Config,
    }
}

struct Failure(CairStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: CairStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CairStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CairStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CairStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<Option<PathBuf>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CairStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(Some(PathBuf::from(s)))
}

fn image_len(height: usize, width: usize) -> Result<usize, Failure> {
    if height == 0 || width == 0 {
        return Err(fail(
            CairStatus::InvalidArgument,
            "image dimensions must be positive",
        ));
    }
    height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| fail(CairStatus::InvalidArgument, "image dimensions overflow"))
}

/// # Safety
/// `ptr` addresses `3 * height * width` readable floats.
unsafe fn image_arg(ptr: *const f32, height: usize, width: usize) -> Result<Tensor<f32>, Failure> {
    if ptr.is_null() {
        return Err(fail(CairStatus::NullPointer, "image pointer is null"));
    }
    let n = image_len(height, width)?;
    let data = std::slice::from_raw_parts(ptr, n).to_vec();
    Ok(Tensor::from_vec(&[1, 3, height, width], data)?)
}

fn load_model(weights_path: &Path, config_path: Option<&Path>) -> Result<CairModel, Failure> {
    let cfg_path = match config_path {
        Some(p) => p.to_path_buf(),
        None => weights_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("config.txt"),
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let (net, mut store) = CairNet::init::<f32>(&cfg.model.cair, 0)?;
    weights::load_store(weights_path, &mut store)?;
    Ok(CairModel { net, store })
}

/// Load weights; `config_path` may be null to use `config.txt` next to the
/// weights file. On success `*out` owns a model to release with
/// [`cair_model_free`].
///
/// # Safety
/// Path arguments are null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cair_model_load(
    weights_path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut CairModel,
) -> CairStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CairStatus::NullPointer, "out is null"));
        }
        *out = std::ptr::null_mut();
        let w = path_arg(weights_path, "weights_path")?
            .ok_or_else(|| fail(CairStatus::NullPointer, "weights_path is null"))?;
        let c = path_arg(config_path, "config_path")?;
        let model = load_model(&w, c.as_deref())?;
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` is null or came from [`cair_model_load`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn cair_model_free(model: *mut CairModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of learnable scalars.
///
/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cair_model_param_count(
    model: *const CairModel,
    out: *mut usize,
) -> CairStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(CairStatus::NullPointer, "model is null"))?;
        if out.is_null() {
            return Err(fail(CairStatus::NullPointer, "out is null"));
        }
        *out = m.store.num_scalars();
        Ok(())
    })
}

/// Restore one image. `tta` nonzero averages the eight flips and rotations;
/// `tlsc_window` nonzero switches channel attention to local pooling.
/// `output` receives the clamped result in the input layout and may not
/// alias `input`.
///
/// # Safety
/// `model` is a live handle; `input` and `output` each address
/// `3 * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn cair_model_restore(
    model: *const CairModel,
    input: *const f32,
    height: usize,
    width: usize,
    tta: c_int,
    tlsc_window: usize,
    output: *mut f32,
) -> CairStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(CairStatus::NullPointer, "model is null"))?;
        if output.is_null() {
            return Err(fail(CairStatus::NullPointer, "output is null"));
        }
        let img = image_arg(input, height, width)?;
        let mut view = ModelView::new(&m.net, &m.store);
        if tlsc_window > 0 {
            view = inference::tlsc_apply(view, tlsc_window);
        }
        let y = view.restore(&img, tta != 0)?.clamp(0.0, 1.0);
        std::slice::from_raw_parts_mut(output, y.len()).copy_from_slice(y.data());
        Ok(())
    })
}

/// PSNR in dB of two images with peak 1; identical images give 120.
///
/// # Safety
/// `a` and `b` address `3 * height * width` floats; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cair_psnr(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CairStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CairStatus::NullPointer, "out is null"));
        }
        *out = metrics::psnr(&image_arg(a, height, width)?, &image_arg(b, height, width)?)?;
        Ok(())
    })
}

/// Mean SSIM over channels (11×11 Gaussian window, sigma 1.5).
///
/// # Safety
/// `a` and `b` address `3 * height * width` floats; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cair_ssim(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CairStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CairStatus::NullPointer, "out is null"));
        }
        *out = metrics::ssim(&image_arg(a, height, width)?, &image_arg(b, height, width)?)?;
        Ok(())
    })
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cair_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cair_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
