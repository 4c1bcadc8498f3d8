//! C ABI for `evinig`.
//!
//! Every fallible function returns an [`EvinigStatus`]. On failure the
//! message is kept per thread and can be read with [`evinig_last_error`].
//! Models are opaque handles created by [`evinig_model_new`] or
//! [`evinig_model_load`] and released with [`evinig_model_free`]. Images are
//! row-major `double` buffers of `height * width` values owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use evinig::error::Error;
use evinig::nig::{self, MixtureMode, NigParams};
use evinig::predictor::{self, ModelConfig, ModelParams, TimeSpec};
use evinig::tensor::{ImageTensor, Tensor3};
use evinig::{metrics, model_io};

/// Result codes shared by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvinigStatus {
    Ok = 0,
    NullPointer = 1,
    /// Out-of-domain value, bad configuration or undersized input.
    InvalidArgument = 2,
    Shape = 3,
    Data = 4,
    Format = 5,
    Io = 6,
    Numerical = 7,
    DegenerateData = 8,
    /// The library panicked; the handle involved should not be reused.
    Panic = 9,
}

/// Values accepted wherever a `mixture` argument is expected.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvinigMixture {
    Symmetric = 0,
    Verbatim = 1,
}

/// Normal-inverse-gamma parameters.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvinigNig {
    pub delta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Expected change with its aleatoric and epistemic parts.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvinigUncertainty {
    pub d: f64,
    pub al: f64,
    pub ep: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvinigModelConfig {
    pub window: usize,
    pub channels: usize,
    pub projected: usize,
    pub decoder_hidden: usize,
    /// One of [`EvinigMixture`].
    pub mixture: c_int,
}

/// Opaque model handle.
pub struct EvinigModel {
    inner: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &Error) -> EvinigStatus {
    match e {
        Error::Domain(_) | Error::Index { .. } | Error::Mask | Error::Size(_) | Error::Config(_) => {
            EvinigStatus::InvalidArgument
        }
        Error::Shape(_) => EvinigStatus::Shape,
        Error::Data(_) => EvinigStatus::Data,
        Error::Format { .. } => EvinigStatus::Format,
        Error::Io { .. } => EvinigStatus::Io,
        Error::Numerical(_) => EvinigStatus::Numerical,
        Error::DegenerateData(_) => EvinigStatus::DegenerateData,
    }
}

struct Failure(EvinigStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(EvinigStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(EvinigStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any error and turns panics into [`EvinigStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EvinigStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EvinigStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            EvinigStatus::Panic
        }
    }
}

unsafe fn read<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write<T>(p: *mut T, what: &str, value: T) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

fn mixture(mode: c_int) -> Result<MixtureMode, Failure> {
    match mode {
        m if m == EvinigMixture::Symmetric as c_int => Ok(MixtureMode::Symmetric),
        m if m == EvinigMixture::Verbatim as c_int => Ok(MixtureMode::Verbatim),
        other => Err(invalid(format!("unknown mixture mode {other}"))),
    }
}

fn mixture_code(mode: MixtureMode) -> c_int {
    match mode {
        MixtureMode::Symmetric => EvinigMixture::Symmetric as c_int,
        MixtureMode::Verbatim => EvinigMixture::Verbatim as c_int,
    }
}

fn to_params(p: &EvinigNig) -> Result<NigParams, Failure> {
    Ok(NigParams::new(p.delta, p.gamma, p.alpha, p.beta)?)
}

fn from_params(p: &NigParams) -> EvinigNig {
    EvinigNig {
        delta: p.delta(),
        gamma: p.gamma(),
        alpha: p.alpha(),
        beta: p.beta(),
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    let s = read(p, what).map(|_| CStr::from_ptr(p))?;
    let s = s.to_str().map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn pixel_count(height: usize, width: usize) -> Result<usize, Failure> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("bad image size {height}x{width}")))
}

unsafe fn image_arg(p: *const f64, height: usize, width: usize, what: &str) -> Result<Tensor3, Failure> {
    let n = pixel_count(height, width)?;
    if p.is_null() {
        return Err(null(what));
    }
    let data = std::slice::from_raw_parts(p, n).to_vec();
    Ok(Tensor3::from_vec(height, width, 1, data)?)
}

unsafe fn copy_out(dst: *mut f64, src: &Tensor3) {
    if !dst.is_null() {
        ptr::copy_nonoverlapping(src.data().as_ptr(), dst, src.data().len());
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn evinig_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on the calling thread, or an empty string.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn evinig_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Checks that `p` is a valid parameter set (finite `delta`, positive
/// `gamma` and `beta`, `alpha > 1`).
///
/// # Safety
/// `p` must be null or point to a readable `EvinigNig`.
#[no_mangle]
pub unsafe extern "C" fn evinig_nig_validate(p: *const EvinigNig) -> EvinigStatus {
    guard(|| to_params(read(p, "p")?).map(|_| ()))
}

/// Mixture of two parameter sets.
///
/// # Safety
/// `a` and `b` must be null or readable; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn evinig_nig_mix(
    a: *const EvinigNig,
    b: *const EvinigNig,
    mode: c_int,
    out: *mut EvinigNig,
) -> EvinigStatus {
    guard(|| {
        let a = to_params(read(a, "a")?)?;
        let b = to_params(read(b, "b")?)?;
        let mixed = nig::mix(&a, &b, mixture(mode)?);
        write(out, "out", from_params(&mixed))
    })
}

/// # Safety
/// `p` must be null or readable; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn evinig_nig_uncertainty(p: *const EvinigNig, out: *mut EvinigUncertainty) -> EvinigStatus {
    guard(|| {
        let u = nig::uncertainty(&to_params(read(p, "p")?)?);
        write(out, "out", EvinigUncertainty { d: u.d, al: u.al, ep: u.ep })
    })
}

/// Normal-inverse-gamma joint density at `(mu, sigma2)`.
///
/// # Safety
/// `p` must be null or readable; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn evinig_nig_pdf(p: *const EvinigNig, mu: f64, sigma2: f64, out: *mut f64) -> EvinigStatus {
    guard(|| {
        let value = nig::pdf_standard(&to_params(read(p, "p")?)?, mu, sigma2)?;
        write(out, "out", value)
    })
}

/// Default hyperparameters.
#[no_mangle]
pub extern "C" fn evinig_model_config_default() -> EvinigModelConfig {
    let c = ModelConfig::default();
    EvinigModelConfig {
        window: c.window,
        channels: c.channels,
        projected: c.projected,
        decoder_hidden: c.decoder_hidden,
        mixture: mixture_code(c.mixture),
    }
}

fn box_model(out: *mut *mut EvinigModel, inner: ModelParams) -> Result<(), Failure> {
    let handle = Box::into_raw(Box::new(EvinigModel { inner }));
    // SAFETY: callers check `out` for null before building the model.
    unsafe { out.write(handle) };
    Ok(())
}

/// Randomly initialized model. On success `*out` owns a new handle.
///
/// # Safety
/// `config` must be null or readable; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn evinig_model_new(
    config: *const EvinigModelConfig,
    seed: u64,
    out: *mut *mut EvinigModel,
) -> EvinigStatus {
    guard(|| {
        let c = read(config, "config")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ModelConfig {
            window: c.window,
            channels: c.channels,
            projected: c.projected,
            decoder_hidden: c.decoder_hidden,
            mixture: mixture(c.mixture)?,
        };
        box_model(out, ModelParams::init(cfg, seed)?)
    })
}

/// Loads a model file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn evinig_model_load(path: *const c_char, out: *mut *mut EvinigModel) -> EvinigStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        box_model(out, model_io::model_load(&path)?)
    })
}

/// # Safety
/// `model` must be null or a live handle; `path` must be null or a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn evinig_model_save(model: *const EvinigModel, path: *const c_char) -> EvinigStatus {
    guard(|| {
        let model = read(model, "model")?;
        let path = path_arg(path, "path")?;
        Ok(model_io::model_save(&model.inner, &path)?)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn evinig_model_free(model: *mut EvinigModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of learnable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn evinig_model_num_parameters(model: *const EvinigModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_parameters())
}

/// # Safety
/// `model` must be null or a live handle; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn evinig_model_config(model: *const EvinigModel, out: *mut EvinigModelConfig) -> EvinigStatus {
    guard(|| {
        let c = read(model, "model")?.inner.config;
        write(
            out,
            "out",
            EvinigModelConfig {
                window: c.window,
                channels: c.channels,
                projected: c.projected,
                decoder_hidden: c.decoder_hidden,
                mixture: mixture_code(c.mixture),
            },
        )
    })
}

/// Predicts the image at time `t` from scans `i0` (at `t0`) and `i1` (at
/// `t1`). `out_image` receives the prediction; `out_d`, `out_al` and
/// `out_ep` receive the change and uncertainty maps and may be null.
/// Every buffer holds `height * width` doubles.
///
/// # Safety
/// Non-null buffers must be valid for `height * width` doubles and the
/// output buffers must not overlap the inputs.
#[no_mangle]
pub unsafe extern "C" fn evinig_predict(
    model: *const EvinigModel,
    i0: *const f64,
    i1: *const f64,
    height: usize,
    width: usize,
    t0: f64,
    t1: f64,
    t: f64,
    out_image: *mut f64,
    out_d: *mut f64,
    out_al: *mut f64,
    out_ep: *mut f64,
) -> EvinigStatus {
    guard(|| {
        let model = read(model, "model")?;
        if out_image.is_null() {
            return Err(null("out_image"));
        }
        let time = TimeSpec::new(t0, t1, t)?;
        let a = ImageTensor::new(image_arg(i0, height, width, "i0")?, t0.max(0.0))?;
        let b = ImageTensor::new(image_arg(i1, height, width, "i1")?, t1.max(0.0))?;
        let p = predictor::tnig_forward(&a, &b, &time, &model.inner)?;
        copy_out(out_image, p.image.pixels());
        copy_out(out_d, &p.d_map);
        copy_out(out_al, &p.al_map);
        copy_out(out_ep, &p.ep_map);
        Ok(())
    })
}

unsafe fn metric(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
    f: fn(&Tensor3, &Tensor3) -> evinig::Result<f64>,
) -> EvinigStatus {
    guard(|| {
        let x = image_arg(a, height, width, "a")?;
        let y = image_arg(b, height, width, "b")?;
        if out.is_null() {
            return Err(null("out"));
        }
        write(out, "out", f(&x, &y)?)
    })
}

/// # Safety
/// `a` and `b` must be valid for `height * width` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evinig_mse(a: *const f64, b: *const f64, height: usize, width: usize, out: *mut f64) -> EvinigStatus {
    metric(a, b, height, width, out, metrics::mse)
}

/// # Safety
/// `a` and `b` must be valid for `height * width` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evinig_psnr(a: *const f64, b: *const f64, height: usize, width: usize, out: *mut f64) -> EvinigStatus {
    metric(a, b, height, width, out, metrics::psnr)
}

/// # Safety
/// `a` and `b` must be valid for `height * width` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evinig_ssim(a: *const f64, b: *const f64, height: usize, width: usize, out: *mut f64) -> EvinigStatus {
    metric(a, b, height, width, out, metrics::ssim)
}
