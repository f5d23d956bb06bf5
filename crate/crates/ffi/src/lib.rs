//! C ABI for the try-on pipeline.
//!
//! Opaque handles wrap the synthetic dataset and the two-stage pipeline;
//! every function returns a [`TryonStatus`] and the last error message is
//! retrievable per thread via [`tryon_last_error`]. The matching header
//! lives at `include/tryon.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tryon_core::condgen::AblationFlags;
use tryon_core::fields::ImageField;
use tryon_core::harness::config::RunConfig;
use tryon_core::harness::metrics::ssim;
use tryon_core::harness::pipeline::{
    infer, load_tocg, load_toig, synth_dataset, PreparedDataset, TocgBundle, ToigBundle,
};
use tryon_core::palette::LabelPalette;
use tryon_core::rejection::RejectionCalibration;
use tryon_core::tensor::Tensor;

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TryonStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    IoError = 3,
    BadCheckpoint = 4,
    ShapeMismatch = 5,
    InternalError = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: TryonStatus, msg: impl Into<String>) -> TryonStatus {
    set_error(msg);
    status
}

/// Copy the last error message for the calling thread into `buf` (NUL
/// terminated, truncated to `cap`). Returns the full message length.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be NULL (query length).
#[no_mangle]
pub unsafe extern "C" fn tryon_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Opaque dataset handle.
pub struct TryonDataset {
    data: PreparedDataset,
}

/// Opaque pipeline handle: both stages plus an optional rejection gate.
pub struct TryonPipeline {
    tocg: TocgBundle,
    toig: ToigBundle,
    calibration: Option<RejectionCalibration>,
}

fn guard<F: FnOnce() -> TryonStatus>(f: F) -> TryonStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TryonStatus::InternalError, "internal panic"),
    }
}

/// Generate a deterministic synthetic dataset at the given condition and
/// output resolutions.
///
/// # Safety
/// `out` must be a valid pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn tryon_synth_dataset_create(
    seed: u64,
    n: usize,
    cond_h: usize,
    cond_w: usize,
    out_h: usize,
    out_w: usize,
    occlusion_prob: f64,
    out: *mut *mut TryonDataset,
) -> TryonStatus {
    guard(|| {
        if out.is_null() {
            return fail(TryonStatus::NullArgument, "out handle is NULL");
        }
        let cfg = RunConfig {
            condition_resolution: (cond_h, cond_w),
            output_resolution: (out_h, out_w),
            ..RunConfig::default()
        };
        if let Err(e) = cfg.validate() {
            return fail(TryonStatus::InvalidArgument, e.to_string());
        }
        if !(0.0..=1.0).contains(&occlusion_prob) {
            return fail(
                TryonStatus::InvalidArgument,
                "occlusion_prob must lie in [0, 1]",
            );
        }
        let palette = LabelPalette::default_tryon();
        let data = synth_dataset(seed, n, &cfg, &palette, occlusion_prob);
        *out = Box::into_raw(Box::new(TryonDataset { data }));
        TryonStatus::Ok
    })
}

/// # Safety
/// `ds` must be a handle from this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn tryon_dataset_free(ds: *mut TryonDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a valid handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn tryon_dataset_len(ds: *const TryonDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    (*ds).data.len()
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, TryonStatus> {
    if p.is_null() {
        return Err(TryonStatus::NullArgument);
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(TryonStatus::InvalidArgument),
    }
}

/// Load both stage checkpoints plus an optional rejection calibration
/// (`calib_path` may be NULL to disable gating).
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tryon_pipeline_load(
    tocg_path: *const c_char,
    toig_path: *const c_char,
    calib_path: *const c_char,
    out: *mut *mut TryonPipeline,
) -> TryonStatus {
    guard(|| {
        if out.is_null() {
            return fail(TryonStatus::NullArgument, "out handle is NULL");
        }
        let tocg_path = match path_arg(tocg_path) {
            Ok(p) => p,
            Err(s) => return fail(s, "tocg_path invalid"),
        };
        let toig_path = match path_arg(toig_path) {
            Ok(p) => p,
            Err(s) => return fail(s, "toig_path invalid"),
        };
        let tocg = match load_tocg(tocg_path) {
            Ok((b, _)) => b,
            Err(e) => return fail(TryonStatus::BadCheckpoint, e.to_string()),
        };
        let toig = match load_toig(toig_path) {
            Ok((b, _)) => b,
            Err(e) => return fail(TryonStatus::BadCheckpoint, e.to_string()),
        };
        let calibration = if calib_path.is_null() {
            None
        } else {
            let p = match path_arg(calib_path) {
                Ok(p) => p,
                Err(s) => return fail(s, "calib_path invalid"),
            };
            match RejectionCalibration::load(p) {
                Ok(c) => Some(c),
                Err(e) => return fail(TryonStatus::IoError, e.to_string()),
            }
        };
        *out = Box::into_raw(Box::new(TryonPipeline {
            tocg,
            toig,
            calibration,
        }));
        TryonStatus::Ok
    })
}

/// # Safety
/// `p` must be a handle from this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn tryon_pipeline_free(p: *mut TryonPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Output image height/width of the loaded pipeline.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tryon_pipeline_output_size(
    p: *const TryonPipeline,
    h: *mut usize,
    w: *mut usize,
) -> TryonStatus {
    guard(|| {
        if p.is_null() || h.is_null() || w.is_null() {
            return fail(TryonStatus::NullArgument, "NULL argument");
        }
        let res = (*p).toig.gen.config.resolution;
        *h = res.0;
        *w = res.1;
        TryonStatus::Ok
    })
}

/// Run the pipeline on `(person_idx, cloth_idx)` of a dataset. On success
/// `accepted` reports the gate decision; when accepted and `out_image` is
/// non-NULL, the RGB image in `[-1,1]` (length `3*h*w`, channel-major) is
/// written there. `p_accept` (nullable) receives the acceptance probability
/// when a calibration is loaded, NaN otherwise.
///
/// # Safety
/// Pointers must be valid; `out_len` must match the queried output size.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn tryon_infer(
    p: *const TryonPipeline,
    ds: *const TryonDataset,
    person_idx: usize,
    cloth_idx: usize,
    out_image: *mut f32,
    out_len: usize,
    accepted: *mut bool,
    p_accept: *mut f64,
) -> TryonStatus {
    guard(|| {
        if p.is_null() || ds.is_null() || accepted.is_null() {
            return fail(TryonStatus::NullArgument, "NULL argument");
        }
        let pipe = &*p;
        let data = &(*ds).data;
        if person_idx >= data.len() || cloth_idx >= data.len() {
            return fail(
                TryonStatus::InvalidArgument,
                format!("index out of range (dataset has {} records)", data.len()),
            );
        }
        let (oh, ow) = pipe.toig.gen.config.resolution;
        if !out_image.is_null() && out_len != 3 * oh * ow {
            return fail(
                TryonStatus::ShapeMismatch,
                format!("out_len {} != 3*{}*{}", out_len, oh, ow),
            );
        }
        let res = infer(
            &pipe.tocg,
            &pipe.toig,
            &data.cond[person_idx],
            &data.out[person_idx],
            &data.cond[cloth_idx],
            &data.out[cloth_idx],
            pipe.calibration.as_ref(),
            AblationFlags::default(),
        );
        let res = match res {
            Ok(r) => r,
            Err(e) => return fail(TryonStatus::ShapeMismatch, e.to_string()),
        };
        *accepted = res.accepted;
        if !p_accept.is_null() {
            *p_accept = res.p_accept.unwrap_or(f64::NAN);
        }
        if let (Some(img), false) = (&res.image, out_image.is_null()) {
            std::ptr::copy_nonoverlapping(img.data.data().as_ptr(), out_image, 3 * oh * ow);
        }
        TryonStatus::Ok
    })
}

/// Windowed SSIM between two channel-major RGB buffers in `[-1,1]`.
///
/// # Safety
/// `a` and `b` must hold `3*h*w` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tryon_ssim(
    a: *const f32,
    b: *const f32,
    h: usize,
    w: usize,
    out: *mut f64,
) -> TryonStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(TryonStatus::NullArgument, "NULL argument");
        }
        if h < 11 || w < 11 {
            return fail(
                TryonStatus::InvalidArgument,
                "images must be at least 11x11 for the SSIM window",
            );
        }
        let n = 3 * h * w;
        let av = std::slice::from_raw_parts(a, n).to_vec();
        let bv = std::slice::from_raw_parts(b, n).to_vec();
        let fa = match ImageField::new(Tensor::from_vec(&[3, h, w], av)) {
            Ok(f) => f,
            Err(e) => return fail(TryonStatus::InvalidArgument, e.to_string()),
        };
        let fb = match ImageField::new(Tensor::from_vec(&[3, h, w], bv)) {
            Ok(f) => f,
            Err(e) => return fail(TryonStatus::InvalidArgument, e.to_string()),
        };
        *out = ssim(&fa, &fb);
        TryonStatus::Ok
    })
}
