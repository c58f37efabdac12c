//! C ABI over the orthosynth library.
//!
//! Objects are opaque handles created by `osyn_*_new`/`_read`/`_load` and
//! released with the matching `_free`. Every fallible call returns an
//! [`OsynStatus`]; on failure [`osyn_last_error`] describes the cause.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use orthosynth::io::checkpoint::load_pipeline;
use orthosynth::io::ovol::{read_volume, write_volume};
use orthosynth::metrics::{discontinuity_index, psnr};
use orthosynth::pipeline::{run_pipeline, Contrast, PipelineModels, SubjectVolumes};
use orthosynth::volume::{Dims, Orientation, Volume};
use orthosynth::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OsynStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Volume = 3,
    Numeric = 4,
    Config = 5,
    Data = 6,
    Format = 7,
    Io = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OsynOrientation {
    Axial = 0,
    Coronal = 1,
    Sagittal = 2,
}

impl From<OsynOrientation> for Orientation {
    fn from(o: OsynOrientation) -> Self {
        match o {
            OsynOrientation::Axial => Orientation::Axial,
            OsynOrientation::Coronal => Orientation::Coronal,
            OsynOrientation::Sagittal => Orientation::Sagittal,
        }
    }
}

/// Opaque volume handle.
pub struct OsynVolume {
    inner: Volume,
}

/// Opaque handle to a loaded pipeline checkpoint.
pub struct OsynPipeline {
    inner: PipelineModels,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> OsynStatus {
    match e.tag() {
        "volume" => OsynStatus::Volume,
        "numeric" => OsynStatus::Numeric,
        "config" => OsynStatus::Config,
        "usage" => OsynStatus::InvalidArgument,
        "data" => OsynStatus::Data,
        "format" => OsynStatus::Format,
        _ => OsynStatus::Io,
    }
}

struct Failure(OsynStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OsynStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            OsynStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            OsynStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(OsynStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(OsynStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn volume_ref<'a>(v: *const OsynVolume, what: &str) -> Result<&'a Volume, Failure> {
    v.as_ref().map(|v| &v.inner).ok_or_else(|| null(what))
}

fn boxed(v: Volume) -> *mut OsynVolume {
    Box::into_raw(Box::new(OsynVolume { inner: v }))
}

/// Message describing the most recent failure on this thread, or NULL.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn osyn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates a `nz x ny x nx` volume. `data` may be NULL for zeros, otherwise it must
/// point to `nz*ny*nx` floats in z, y, x order.
///
/// # Safety
/// `data` must be NULL or valid for `nz*ny*nx` reads; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn osyn_volume_new(
    nz: usize,
    ny: usize,
    nx: usize,
    data: *const f32,
    out: *mut *mut OsynVolume,
) -> OsynStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dims = Dims::new(nz, ny, nx);
        let v = if data.is_null() {
            Volume::zeros(dims)?
        } else {
            Volume::new(dims, std::slice::from_raw_parts(data, dims.len()).to_vec())?
        };
        *out = boxed(v);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn osyn_volume_read(path: *const c_char, out: *mut *mut OsynVolume) -> OsynStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = boxed(read_volume(&path_arg(path)?)?);
        Ok(())
    })
}

/// Writes the volume as OVOL without a sidecar.
///
/// # Safety
/// `v` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn osyn_volume_write(v: *const OsynVolume, path: *const c_char) -> OsynStatus {
    guard(|| {
        let v = volume_ref(v, "volume")?;
        write_volume(&path_arg(path)?, v, None)?;
        Ok(())
    })
}

/// # Safety
/// `v` must be NULL or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn osyn_volume_free(v: *mut OsynVolume) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// # Safety
/// `v` must be a live handle; the output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn osyn_volume_dims(
    v: *const OsynVolume,
    nz: *mut usize,
    ny: *mut usize,
    nx: *mut usize,
) -> OsynStatus {
    guard(|| {
        let d = volume_ref(v, "volume")?.dims();
        if nz.is_null() || ny.is_null() || nx.is_null() {
            return Err(null("dims output"));
        }
        *nz = d.nz;
        *ny = d.ny;
        *nx = d.nx;
        Ok(())
    })
}

/// Borrowed pointer to the voxel data, valid while `v` lives. NULL if `v` is NULL.
///
/// # Safety
/// `v` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn osyn_volume_data(v: *const OsynVolume) -> *const f32 {
    v.as_ref().map_or(ptr::null(), |v| v.inner.data().as_ptr())
}

/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn osyn_pipeline_load(dir: *const c_char, out: *mut *mut OsynPipeline) -> OsynStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = load_pipeline(&path_arg(dir)?)?;
        *out = Box::into_raw(Box::new(OsynPipeline { inner }));
        Ok(())
    })
}

/// # Safety
/// `p` must be NULL or a live pipeline handle.
#[no_mangle]
pub unsafe extern "C" fn osyn_pipeline_free(p: *mut OsynPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Runs every stage on the PD/T2 pair and returns the final T1 volume.
///
/// # Safety
/// All handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn osyn_pipeline_run(
    p: *const OsynPipeline,
    pd: *const OsynVolume,
    t2: *const OsynVolume,
    out: *mut *mut OsynVolume,
) -> OsynStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("pipeline"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let sources = BTreeMap::from([
            (Contrast::Pd, volume_ref(pd, "pd")?.clone()),
            (Contrast::T2, volume_ref(t2, "t2")?.clone()),
        ]);
        let subject = SubjectVolumes::new("ffi", sources, None)?;
        let (v, _) = run_pipeline(&p.inner, &subject)?;
        *out = boxed(v);
        Ok(())
    })
}

/// # Safety
/// Both handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn osyn_psnr(
    reference: *const OsynVolume,
    syn: *const OsynVolume,
    max_val: f64,
    out: *mut f64,
) -> OsynStatus {
    guard(|| {
        let r = volume_ref(reference, "reference")?;
        let s = volume_ref(syn, "syn")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = psnr(r, s, max_val)?;
        Ok(())
    })
}

/// # Safety
/// `v` must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn osyn_discontinuity_index(
    v: *const OsynVolume,
    orientation: OsynOrientation,
    out: *mut f64,
) -> OsynStatus {
    guard(|| {
        let v = volume_ref(v, "volume")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = discontinuity_index(v, orientation.into())?;
        Ok(())
    })
}
