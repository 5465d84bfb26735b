//! C ABI over the `saunet` core.
//!
//! Every entry point returns a [`SaunetStatus`]; on failure the message is
//! available from [`saunet_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Panics never
//! cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{Array3, ArrayView3};
use saunet::metrics::{evaluate_case, Connectivity, MetricsConfig};
use saunet::model::{load_checkpoint, predict_case, Checkpoint};
use saunet::volume_io::{load_volume, Case, LabelMask, Volume};
use saunet::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaunetStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Checkpoint = 6,
    Undefined = 7,
    Internal = 99,
}

/// A trained network plus the pipeline it was trained with.
pub struct SaunetModel {
    inner: Checkpoint,
}

/// An intensity volume read from disk.
pub struct SaunetVolume {
    inner: Volume,
}

/// Scores of one prediction against one truth mask. `avd` is NaN when the
/// truth is empty.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SaunetMetrics {
    pub dice: f64,
    pub avd: f64,
    pub f1: f64,
    pub n_truth: usize,
    pub n_detected: usize,
    pub n_false: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(SaunetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => SaunetStatus::Io,
            Error::Format { .. } | Error::Json(_) | Error::IllegalLabel { .. } | Error::NonFinite(_) => SaunetStatus::Format,
            Error::Shape(_) => SaunetStatus::Shape,
            Error::Checkpoint(_) => SaunetStatus::Checkpoint,
            Error::EmptyTruth | Error::AllIgnored => SaunetStatus::Undefined,
            Error::Config(_) => SaunetStatus::InvalidArgument,
            Error::Diverged { .. } => SaunetStatus::Internal,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SaunetStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SaunetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SaunetStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SaunetStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SaunetStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn shape_arg(shape: *const usize) -> Result<[usize; 3], Fail> {
    if shape.is_null() {
        return Err(null("shape"));
    }
    let s = [*shape, *shape.add(1), *shape.add(2)];
    if s.contains(&0) {
        return Err(Fail(SaunetStatus::Shape, format!("empty shape {s:?}")));
    }
    Ok(s)
}

unsafe fn grid<'a, T>(data: *const T, shape: [usize; 3], what: &str) -> Result<ArrayView3<'a, T>, Fail> {
    if data.is_null() {
        return Err(null(what));
    }
    let len = shape.iter().product();
    Ok(ArrayView3::from_shape(shape, std::slice::from_raw_parts(data, len)).expect("length matches shape"))
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn saunet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn saunet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn saunet_model_load(path: *const c_char, out: *mut *mut SaunetModel) -> SaunetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let ck = load_checkpoint(&path)?;
        ck.manifest
            .model
            .check_spatial(ck.manifest.pipeline.grid.chunk_shape())
            .map_err(|e| Fail(SaunetStatus::Checkpoint, e.to_string()))?;
        *out = Box::into_raw(Box::new(SaunetModel { inner: ck }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`saunet_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn saunet_model_free(model: *mut SaunetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Canonical grid `[h, w, d]` the model segments on.
///
/// # Safety
/// `model` must be a live handle and `out` point to 3 writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn saunet_model_grid(model: *const SaunetModel, out: *mut usize) -> SaunetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        for (i, v) in m.inner.manifest.pipeline.grid.shape.iter().enumerate() {
            *out.add(i) = *v;
        }
        Ok(())
    })
}

/// Segments a C-order `h × w × d` float image. `mask_out` receives
/// `h·w·d` labels (0 or 1) at the original shape.
///
/// # Safety
/// `image` must hold `h·w·d` floats, `shape` and `spacing` 3 values each,
/// `mask_out` room for `h·w·d` bytes.
#[no_mangle]
pub unsafe extern "C" fn saunet_predict(
    model: *const SaunetModel,
    image: *const f32,
    shape: *const usize,
    spacing: *const f32,
    mask_out: *mut u8,
) -> SaunetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let shape = shape_arg(shape)?;
        let data = grid(image, shape, "image")?.to_owned();
        if spacing.is_null() {
            return Err(null("spacing"));
        }
        if mask_out.is_null() {
            return Err(null("mask_out"));
        }
        let spacing = [*spacing, *spacing.add(1), *spacing.add(2)];
        let case = Case::new("ffi", "unknown", Volume::new(data, spacing)?, None)?;
        let (mask, _) = predict_case(&m.inner.model, &m.inner.manifest.pipeline, &case)?;
        let out = std::slice::from_raw_parts_mut(mask_out, mask.data.len());
        for (o, v) in out.iter_mut().zip(mask.data.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Reads a raw or NIfTI intensity volume into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn saunet_volume_load(path: *const c_char, out: *mut *mut SaunetVolume) -> SaunetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let v = load_volume(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SaunetVolume { inner: standard(v) }));
        Ok(())
    })
}

/// # Safety
/// `volume` must come from [`saunet_volume_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn saunet_volume_free(volume: *mut SaunetVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Writes `[h, w, d]` to `shape_out` and `[sh, sw, sd]` to `spacing_out`.
///
/// # Safety
/// `volume` must be live; both outputs must point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn saunet_volume_shape(volume: *const SaunetVolume, shape_out: *mut usize, spacing_out: *mut f32) -> SaunetStatus {
    guard(|| {
        let v = &volume.as_ref().ok_or_else(|| null("volume"))?.inner;
        if shape_out.is_null() || spacing_out.is_null() {
            return Err(null("output"));
        }
        for i in 0..3 {
            *shape_out.add(i) = v.shape()[i];
            *spacing_out.add(i) = v.spacing[i];
        }
        Ok(())
    })
}

/// Borrowed C-order voxel data, valid while the handle lives. Null for a
/// null handle.
///
/// # Safety
/// `volume` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn saunet_volume_data(volume: *const SaunetVolume) -> *const f32 {
    volume.as_ref().map_or(ptr::null(), |v| v.inner.data.as_ptr())
}

/// DICE, AVD and lesion F1 of `pred` against `truth` (both C-order
/// `h × w × d`). Truth label 2 is ignored. `connectivity` is 6, 18 or 26.
///
/// # Safety
/// `pred` and `truth` must hold `h·w·d` bytes, `shape` 3 values, `out` one
/// writable [`SaunetMetrics`].
#[no_mangle]
pub unsafe extern "C" fn saunet_evaluate(
    pred: *const u8,
    truth: *const u8,
    shape: *const usize,
    connectivity: u8,
    out: *mut SaunetMetrics,
) -> SaunetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = shape_arg(shape)?;
        let connectivity = Connectivity::try_from(connectivity).map_err(|e| Fail(SaunetStatus::InvalidArgument, e.to_string()))?;
        let p = LabelMask::new(grid(pred, shape, "pred")?.to_owned())?;
        let t = LabelMask::new(grid(truth, shape, "truth")?.to_owned())?;
        let cfg = MetricsConfig {
            connectivity,
            ..MetricsConfig::default()
        };
        let m = evaluate_case("ffi", "unknown", &p, &t, &cfg)?;
        *out = SaunetMetrics {
            dice: m.dice,
            avd: m.avd.unwrap_or(f64::NAN),
            f1: m.f1,
            n_truth: m.n_truth,
            n_detected: m.n_detected,
            n_false: m.n_false,
        };
        Ok(())
    })
}

/// C-order storage, so `saunet_volume_data` is a flat view.
fn standard(mut v: Volume) -> Volume {
    if !v.data.is_standard_layout() {
        v.data = Array3::from_shape_vec(v.data.dim(), v.data.iter().copied().collect()).expect("same length");
    }
    v
}
