//! C ABI over the `xraygan` core.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free`. Every function returns an [`XrgStatus`]; on failure the
//! message is kept per thread and read with [`xrg_last_error_message`].
//! Images cross the boundary as row-major `double` arrays in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use xraygan::autograd::Tensor;
use xraygan::corpus::View;
use xraygan::gan::StageImage;
use xraygan::trainer::{generate_pair, load_checkpoint, TrainState};
use xraygan::vcn::{consistency_score, load_vcn, VcnParams};
use xraygan::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XrgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    EmptyReport = 6,
    BufferTooSmall = 7,
    Internal = 8,
    Panic = 9,
}

/// Trained generator cascade with its encoder and vocabulary.
pub struct XrgModel {
    state: TrainState,
}

/// Stage view-consistency network.
pub struct XrgVcn {
    params: VcnParams,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> XrgStatus {
    match e {
        Error::Io { .. } | Error::Image { .. } => XrgStatus::Io,
        Error::Checkpoint { .. } => XrgStatus::Checkpoint,
        Error::Shape(_) => XrgStatus::Shape,
        Error::EmptyReport => XrgStatus::EmptyReport,
        Error::Internal(_) => XrgStatus::Internal,
        _ => XrgStatus::InvalidArgument,
    }
}

struct Fail(XrgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> XrgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            XrgStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside xraygan");
            XrgStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(XrgStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(XrgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn image(p: *const f64, side: usize, what: &str) -> Result<Tensor, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let data = std::slice::from_raw_parts(p, side * side).to_vec();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Fail(
            XrgStatus::InvalidArgument,
            format!("{what} has non-finite pixels"),
        ));
    }
    Ok(Tensor::new(&[side, side], data))
}

/// Name of a status code, as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xrg_status_name(status: XrgStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        XrgStatus::Ok => b"ok\0",
        XrgStatus::NullArgument => b"null argument\0",
        XrgStatus::InvalidArgument => b"invalid argument\0",
        XrgStatus::Io => b"i/o error\0",
        XrgStatus::Checkpoint => b"bad checkpoint\0",
        XrgStatus::Shape => b"shape mismatch\0",
        XrgStatus::EmptyReport => b"empty report\0",
        XrgStatus::BufferTooSmall => b"buffer too small\0",
        XrgStatus::Internal => b"internal error\0",
        XrgStatus::Panic => b"panic\0",
    };
    s.as_ptr().cast()
}

/// Library version, as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xrg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length plus one, so a
/// zero-length call sizes the buffer.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn xrg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Loads a training checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xrg_model_load(path: *const c_char, out: *mut *mut XrgModel) -> XrgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = PathBuf::from(text(path, "path")?);
        let state = load_checkpoint(&path, None)?;
        *out = Box::into_raw(Box::new(XrgModel { state }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`xrg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xrg_model_free(model: *mut XrgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of generated images, and the number of stages trained so far.
///
/// # Safety
/// `model` must be a live handle; `side` and `completed_stages` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn xrg_model_resolution(
    model: *const XrgModel,
    side: *mut usize,
    completed_stages: *mut usize,
) -> XrgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if !side.is_null() {
            *side = m.state.config.gan().final_resolution();
        }
        if !completed_stages.is_null() {
            *completed_stages = m.state.completed_stages();
        }
        Ok(())
    })
}

/// Generates both views for a report. `frontal` and `lateral` receive
/// `len` doubles each; `len` must be at least `side * side`.
///
/// # Safety
/// `model` must be live, `report` NUL-terminated, the buffers `len` doubles long.
#[no_mangle]
pub unsafe extern "C" fn xrg_model_generate_pair(
    model: *const XrgModel,
    report: *const c_char,
    frontal: *mut f64,
    lateral: *mut f64,
    len: usize,
) -> XrgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let report = text(report, "report")?;
        if frontal.is_null() || lateral.is_null() {
            return Err(null("output buffer"));
        }
        let side = m.state.config.gan().final_resolution();
        if len < side * side {
            return Err(Fail(
                XrgStatus::BufferTooSmall,
                format!("need {} doubles per view, got {len}", side * side),
            ));
        }
        let (f, l) = generate_pair(report, &m.state)?;
        ptr::copy_nonoverlapping(f.pixels.data().as_ptr(), frontal, side * side);
        ptr::copy_nonoverlapping(l.pixels.data().as_ptr(), lateral, side * side);
        Ok(())
    })
}

/// Loads a VCN checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xrg_vcn_load(path: *const c_char, out: *mut *mut XrgVcn) -> XrgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = PathBuf::from(text(path, "path")?);
        let params = load_vcn(&path)?;
        *out = Box::into_raw(Box::new(XrgVcn { params }));
        Ok(())
    })
}

/// Releases a VCN; null is ignored.
///
/// # Safety
/// `vcn` must come from [`xrg_vcn_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xrg_vcn_free(vcn: *mut XrgVcn) {
    if !vcn.is_null() {
        drop(Box::from_raw(vcn));
    }
}

/// Input side length the VCN expects.
///
/// # Safety
/// `vcn` must be live and `side` writable.
#[no_mangle]
pub unsafe extern "C" fn xrg_vcn_resolution(vcn: *const XrgVcn, side: *mut usize) -> XrgStatus {
    guard(|| {
        let v = vcn.as_ref().ok_or_else(|| null("vcn"))?;
        if side.is_null() {
            return Err(null("side"));
        }
        *side = v.params.resolution;
        Ok(())
    })
}

/// Consistency probability of a frontal/lateral pair of `side x side` images.
///
/// # Safety
/// `vcn` must be live; the image pointers must hold `side * side` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xrg_vcn_score(
    vcn: *const XrgVcn,
    frontal: *const f64,
    lateral: *const f64,
    side: usize,
    out: *mut f64,
) -> XrgStatus {
    guard(|| {
        let v = vcn.as_ref().ok_or_else(|| null("vcn"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let stage = v.params.stage;
        let f = StageImage::new(image(frontal, side, "frontal")?, stage, View::Frontal);
        let l = StageImage::new(image(lateral, side, "lateral")?, stage, View::Lateral);
        *out = consistency_score(&f, &l, &v.params)?;
        Ok(())
    })
}

/// Mean SSIM of two `side x side` images with pixels in `[-1, 1]`.
///
/// # Safety
/// `a` and `b` must hold `side * side` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xrg_ssim(a: *const f64, b: *const f64, side: usize, out: *mut f64) -> XrgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, b) = (image(a, side, "a")?, image(b, side, "b")?);
        *out = xraygan::metrics::ssim(&a, &b, xraygan::metrics::PixelRange::Signed)?;
        Ok(())
    })
}

/// Fréchet distance between two feature sets, each row-major `n x dim`.
///
/// # Safety
/// `a` must hold `na * dim` doubles, `b` `nb * dim`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xrg_fid(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    dim: usize,
    out: *mut f64,
) -> XrgStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        if dim == 0 {
            return Err(Fail(XrgStatus::InvalidArgument, "dim must be >= 1".into()));
        }
        let rows = |p: *const f64, n: usize| -> Vec<Vec<f64>> {
            std::slice::from_raw_parts(p, n * dim)
                .chunks(dim)
                .map(<[f64]>::to_vec)
                .collect()
        };
        *out = xraygan::metrics::fid(&rows(a, na), &rows(b, nb))?;
        Ok(())
    })
}
