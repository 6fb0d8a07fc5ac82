//! C ABI over `cmfseg`.
//!
//! Volumes and shape models cross the boundary as opaque handles owned by the
//! caller and released with the matching `*_free`. Every fallible call returns
//! a [`CmfStatus`]; the message of the most recent failure on the calling
//! thread is available from [`cmf_last_error`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cmfseg::cmf::{build_capacities, solve_cmf, CapacityParams, CmfConfig, FlowBound};
use cmfseg::io::{load_volume, save_mask, save_volume};
use cmfseg::metrics::confusion;
use cmfseg::prior_cmf::{segment_with_prior, PriorCmfConfig};
use cmfseg::shape::{load_model, ShapeModel};
use cmfseg::volume::{Grid, Volume3D};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmfStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// Inputs failed validation.
    Invalid = 2,
    /// Filesystem failure.
    Io = 3,
    /// Internal error; the library state is still usable.
    Panic = 4,
}

/// A 3D volume (probability map, intensity image or binary mask).
pub struct CmfVolume(Volume3D);

/// A fitted statistical shape model.
pub struct CmfShapeModel(ShapeModel);

/// Solver and shape-coupling parameters; start from [`cmf_params_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmfParams {
    pub c: f64,
    pub gamma: f64,
    pub max_iters: u32,
    pub tol: f64,
    pub threshold: f64,
    /// Isotropic (Euclidean) flow bound instead of the componentwise one.
    pub euclidean: bool,
    pub alpha0: f64,
    pub eps: f64,
    pub outer_iters: u32,
    pub beta: f64,
    pub width: f64,
    pub pose_rounds: u32,
}

impl From<&CmfParams> for PriorCmfConfig {
    fn from(p: &CmfParams) -> Self {
        PriorCmfConfig {
            outer_iters: p.outer_iters as usize,
            beta: p.beta,
            width: p.width,
            pose_rounds: p.pose_rounds as usize,
            alpha0: p.alpha0,
            eps: p.eps,
            cmf: CmfConfig {
                c: p.c,
                gamma: p.gamma,
                max_iters: p.max_iters as usize,
                tol: p.tol,
                threshold: p.threshold,
                bound: if p.euclidean { FlowBound::Euclidean } else { FlowBound::Componentwise },
            },
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CmfStatus, String);

impl From<cmfseg::Error> for Failure {
    fn from(e: cmfseg::Error) -> Self {
        let status = if e.is_io() { CmfStatus::Io } else { CmfStatus::Invalid };
        Failure(status, format!("{}: {e}", e.module()))
    }
}

fn null(what: &str) -> Failure {
    Failure(CmfStatus::NullPointer, format!("{what} is NULL"))
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording failures and containing panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CmfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CmfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal error: {msg}"));
            CmfStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(CmfStatus::Invalid, "path is not valid UTF-8".into()))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cmf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cmf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn cmf_params_default() -> CmfParams {
    let p = PriorCmfConfig::default();
    CmfParams {
        c: p.cmf.c,
        gamma: p.cmf.gamma,
        max_iters: p.cmf.max_iters as u32,
        tol: p.cmf.tol,
        threshold: p.cmf.threshold,
        euclidean: p.cmf.bound == FlowBound::Euclidean,
        alpha0: p.alpha0,
        eps: p.eps,
        outer_iters: p.outer_iters as u32,
        beta: p.beta,
        width: p.width,
        pose_rounds: p.pose_rounds as u32,
    }
}

/// Creates a volume from `len = dims[0]*dims[1]*dims[2]` samples, x fastest.
///
/// # Safety
/// `dims` and `spacing` point to 3 values each, `data` to `len` values, and
/// `out` to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn cmf_volume_new(
    dims: *const usize,
    spacing: *const f64,
    data: *const f64,
    len: usize,
    out: *mut *mut CmfVolume,
) -> CmfStatus {
    guard(|| {
        if dims.is_null() || spacing.is_null() || data.is_null() {
            return Err(null("dims, spacing or data"));
        }
        let dims: [usize; 3] = std::slice::from_raw_parts(dims, 3).try_into().unwrap();
        let spacing: [f64; 3] = std::slice::from_raw_parts(spacing, 3).try_into().unwrap();
        let grid = Grid::new(dims, spacing)?;
        if grid.len() != len {
            return Err(Failure(
                CmfStatus::Invalid,
                format!("dims {dims:?} need {} samples, got {len}", grid.len()),
            ));
        }
        let vol = Volume3D::new(grid, std::slice::from_raw_parts(data, len).to_vec())?;
        emit(out, CmfVolume(vol))
    })
}

/// Reads a volume file (float or mask element type).
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cmf_volume_load(path: *const c_char, out: *mut *mut CmfVolume) -> CmfStatus {
    guard(|| {
        let vol = load_volume(path_arg(path)?)?;
        emit(out, CmfVolume(vol))
    })
}

/// Writes `vol` to `path` (plus its `.raw` payload), as a `UINT8` mask when
/// `as_mask` is set.
///
/// # Safety
/// `vol` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cmf_volume_save(vol: *const CmfVolume, path: *const c_char, as_mask: bool) -> CmfStatus {
    guard(|| {
        let vol = &borrow(vol, "volume")?.0;
        let path = path_arg(path)?;
        if as_mask {
            save_mask(vol, path)?;
        } else {
            save_volume(vol, path)?;
        }
        Ok(())
    })
}

/// Number of samples, 0 for NULL.
///
/// # Safety
/// `vol` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmf_volume_len(vol: *const CmfVolume) -> usize {
    vol.as_ref().map_or(0, |v| v.0.len())
}

/// # Safety
/// `vol` is a live handle; `dims_out` points to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn cmf_volume_dims(vol: *const CmfVolume, dims_out: *mut usize) -> CmfStatus {
    guard(|| {
        let vol = &borrow(vol, "volume")?.0;
        if dims_out.is_null() {
            return Err(null("dims_out"));
        }
        std::slice::from_raw_parts_mut(dims_out, 3).copy_from_slice(&vol.dims());
        Ok(())
    })
}

/// Copies the samples into `buf`, which must hold exactly `len` values.
///
/// # Safety
/// `vol` is a live handle; `buf` points to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn cmf_volume_copy_data(vol: *const CmfVolume, buf: *mut f64, len: usize) -> CmfStatus {
    guard(|| {
        let vol = &borrow(vol, "volume")?.0;
        if buf.is_null() {
            return Err(null("buffer"));
        }
        if len != vol.len() {
            return Err(Failure(
                CmfStatus::Invalid,
                format!("buffer holds {len} values, volume has {}", vol.len()),
            ));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(vol.data());
        Ok(())
    })
}

/// # Safety
/// `vol` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cmf_volume_free(vol: *mut CmfVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Reads a shape model file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cmf_model_load(path: *const c_char, out: *mut *mut CmfShapeModel) -> CmfStatus {
    guard(|| {
        let model = load_model(path_arg(path)?)?;
        emit(out, CmfShapeModel(model))
    })
}

/// Number of retained modes, 0 for NULL.
///
/// # Safety
/// `model` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmf_model_rank(model: *const CmfShapeModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.rank())
}

/// # Safety
/// `model` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cmf_model_free(model: *mut CmfShapeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Segments a probability map. With `model` NULL this is the plain solve;
/// otherwise the shape prior is coupled in. `params` NULL selects defaults.
///
/// # Safety
/// `prob` is a live handle, `model` and `params` are NULL or valid, and
/// `mask_out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cmf_segment(
    prob: *const CmfVolume,
    model: *const CmfShapeModel,
    params: *const CmfParams,
    mask_out: *mut *mut CmfVolume,
) -> CmfStatus {
    guard(|| {
        let prob = &borrow(prob, "probability map")?.0;
        if mask_out.is_null() {
            return Err(null("output handle"));
        }
        let params = params.as_ref().copied().unwrap_or_else(|| cmf_params_default());
        let cfg = PriorCmfConfig::from(&params);
        let mask = match model.as_ref() {
            Some(m) => segment_with_prior(prob, &m.0, &cfg)?.mask,
            None => {
                cfg.validate()?;
                let caps = build_capacities(
                    prob,
                    &CapacityParams {
                        alpha0: cfg.alpha0,
                        edge: None,
                        shape: None,
                        beta: 0.0,
                        eps: cfg.eps,
                    },
                )?;
                solve_cmf(&caps, &cfg.cmf)?.mask
            }
        };
        emit(mask_out, CmfVolume(mask))
    })
}

/// Dice overlap of two binary masks on the same grid.
///
/// # Safety
/// `pred` and `gt` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cmf_dice(pred: *const CmfVolume, gt: *const CmfVolume, out: *mut f64) -> CmfStatus {
    guard(|| {
        let (pred, gt) = (&borrow(pred, "prediction")?.0, &borrow(gt, "ground truth")?.0);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = confusion(pred, gt)?.dice();
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_are_contained_and_reported() {
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let st = guard(|| panic!("boom"));
        std::panic::set_hook(prev);
        assert_eq!(st, CmfStatus::Panic);
        let msg = unsafe { CStr::from_ptr(cmf_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "internal error: boom");
    }

    #[test]
    fn last_error_is_per_thread() {
        set_last_error("here".into());
        std::thread::spawn(|| assert!(cmf_last_error().is_null())).join().unwrap();
        assert!(!cmf_last_error().is_null());
    }
}
