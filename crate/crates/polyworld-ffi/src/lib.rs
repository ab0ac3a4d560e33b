//! C ABI for the polygon extraction pipeline.
//!
//! Opaque handles + status codes; every function is safe to call from any
//! language with C linkage. Strings and handles returned by this library
//! must be released with the matching `*_free` function. Errors set a
//! thread-local message retrievable with [`pw_last_error_message`].
//!
//! The generated header lives at `include/polyworld.h` (regenerated by the
//! build script via cbindgen).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use polyworld::geometry::{export_geojson, PolygonSet};
use polyworld::model::{image_tensor_from_hwc, ForwardOptions, Model, ScoreMode};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PwStatus {
    PwOk = 0,
    PwInvalidArgument = 1,
    PwIoError = 2,
    PwRuntimeError = 3,
}

/// Ignore refinement offsets (offset-off ablation).
pub const PW_FLAG_NO_OFFSET: u32 = 1;
/// Score with the clockwise head only.
pub const PW_FLAG_SCORE_CLOCK_ONLY: u32 = 2;
/// Score with the transposed counterclockwise head only.
pub const PW_FLAG_SCORE_COUNT_ONLY: u32 = 4;

/// Opaque model handle.
pub struct PwModel {
    inner: Model,
}

/// Opaque polygon set handle: extracted rings, confidences, and the source
/// image extent (for pixel-unit export).
pub struct PwPolygonSet {
    polygons: PolygonSet,
    confidences: Vec<f64>,
    width: usize,
    height: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn guard<F: FnOnce() -> PwStatus>(f: F) -> PwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in polyworld-ffi".to_string());
            set_error(&msg);
            PwStatus::PwRuntimeError
        }
    }
}

/// Library version string; static storage, do not free.
#[no_mangle]
pub extern "C" fn pw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn pw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a model from a checkpoint file produced by the trainer or
/// `Model::save`. On success writes a handle to `out_model`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out_model` must be a
/// valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn pw_model_load(
    path: *const c_char,
    out_model: *mut *mut PwModel,
) -> PwStatus {
    guard(|| {
        if path.is_null() || out_model.is_null() {
            set_error("null pointer argument");
            return PwStatus::PwInvalidArgument;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("checkpoint path is not valid UTF-8");
                return PwStatus::PwInvalidArgument;
            }
        };
        match Model::load(Path::new(path)) {
            Ok(inner) => {
                unsafe { *out_model = Box::into_raw(Box::new(PwModel { inner })) };
                PwStatus::PwOk
            }
            Err(e) => {
                set_error(&e.to_string());
                PwStatus::PwIoError
            }
        }
    })
}

/// Release a model handle. Passing NULL is a no-op.
///
/// # Safety
/// `model` must be a pointer from [`pw_model_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pw_model_free(model: *mut PwModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Extract polygons from an image.
///
/// `image` points at `height * width * 3` doubles, interleaved RGB in
/// row-major order, values in [0, 1]. `flags` is a bitwise OR of the
/// `PW_FLAG_*` constants. On success writes a polygon set handle.
///
/// # Safety
/// `model`, `image`, and `out_polygons` must be valid pointers; the image
/// buffer must hold at least `height * width * 3` doubles.
#[no_mangle]
pub unsafe extern "C" fn pw_model_extract(
    model: *const PwModel,
    image: *const f64,
    height: usize,
    width: usize,
    flags: u32,
    out_polygons: *mut *mut PwPolygonSet,
) -> PwStatus {
    guard(|| {
        if model.is_null() || image.is_null() || out_polygons.is_null() {
            set_error("null pointer argument");
            return PwStatus::PwInvalidArgument;
        }
        if height == 0 || width == 0 {
            set_error("image dimensions must be positive");
            return PwStatus::PwInvalidArgument;
        }
        let model = unsafe { &*model };
        let hwc = unsafe { std::slice::from_raw_parts(image, height * width * 3) };
        let score_mode = if flags & PW_FLAG_SCORE_CLOCK_ONLY != 0 {
            ScoreMode::ClockOnly
        } else if flags & PW_FLAG_SCORE_COUNT_ONLY != 0 {
            ScoreMode::CountOnly
        } else {
            ScoreMode::Both
        };
        let opts = ForwardOptions {
            score_mode,
            disable_offsets: flags & PW_FLAG_NO_OFFSET != 0,
            sinkhorn_iterations: None,
            override_positions: None,
        };
        let run = || -> polyworld::Result<PwPolygonSet> {
            let tensor = image_tensor_from_hwc(hwc, height, width)?;
            let inference = model.inner.infer(&tensor, &opts)?;
            Ok(PwPolygonSet {
                polygons: inference.polygons,
                confidences: inference.confidences,
                width,
                height,
            })
        };
        match run() {
            Ok(set) => {
                unsafe { *out_polygons = Box::into_raw(Box::new(set)) };
                PwStatus::PwOk
            }
            Err(e) => {
                set_error(&e.to_string());
                PwStatus::PwRuntimeError
            }
        }
    })
}

/// Number of polygons in the set (0 for NULL).
///
/// # Safety
/// `set` must be NULL or a live polygon set handle.
#[no_mangle]
pub unsafe extern "C" fn pw_polygon_set_len(set: *const PwPolygonSet) -> usize {
    if set.is_null() {
        return 0;
    }
    unsafe { &*set }.polygons.len()
}

/// Vertex count of one polygon (0 when out of range).
///
/// # Safety
/// `set` must be NULL or a live polygon set handle.
#[no_mangle]
pub unsafe extern "C" fn pw_polygon_vertex_count(
    set: *const PwPolygonSet,
    index: usize,
) -> usize {
    if set.is_null() {
        return 0;
    }
    let set = unsafe { &*set };
    set.polygons
        .polygons()
        .get(index)
        .map_or(0, |p| p.len())
}

/// Confidence of one polygon (NaN when out of range).
///
/// # Safety
/// `set` must be NULL or a live polygon set handle.
#[no_mangle]
pub unsafe extern "C" fn pw_polygon_confidence(set: *const PwPolygonSet, index: usize) -> f64 {
    if set.is_null() {
        return f64::NAN;
    }
    let set = unsafe { &*set };
    set.confidences.get(index).copied().unwrap_or(f64::NAN)
}

/// Copy one polygon's vertices as (x, y) pairs in pixel units.
///
/// `capacity_pairs` is the number of (x, y) pairs `out_xy` can hold; the
/// vertex count is written to `out_pairs`. Fails without writing when the
/// capacity is too small.
///
/// # Safety
/// `set` must be a live handle; `out_xy` must hold `2 * capacity_pairs`
/// doubles; `out_pairs` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pw_polygon_vertices(
    set: *const PwPolygonSet,
    index: usize,
    out_xy: *mut f64,
    capacity_pairs: usize,
    out_pairs: *mut usize,
) -> PwStatus {
    guard(|| {
        if set.is_null() || out_xy.is_null() || out_pairs.is_null() {
            set_error("null pointer argument");
            return PwStatus::PwInvalidArgument;
        }
        let s = unsafe { &*set };
        let Some(poly) = s.polygons.polygons().get(index) else {
            set_error("polygon index out of range");
            return PwStatus::PwInvalidArgument;
        };
        if poly.len() > capacity_pairs {
            set_error("output capacity too small");
            unsafe { *out_pairs = poly.len() };
            return PwStatus::PwInvalidArgument;
        }
        let out = unsafe { std::slice::from_raw_parts_mut(out_xy, poly.len() * 2) };
        for (i, v) in poly.vertices().iter().enumerate() {
            out[i * 2] = v.x * s.width as f64;
            out[i * 2 + 1] = v.y * s.height as f64;
        }
        unsafe { *out_pairs = poly.len() };
        PwStatus::PwOk
    })
}

/// Serialize the polygon set as GeoJSON (pixel units). The returned string
/// must be released with [`pw_string_free`].
///
/// # Safety
/// `set` must be a live handle; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pw_polygon_set_to_geojson(
    set: *const PwPolygonSet,
    out_json: *mut *mut c_char,
) -> PwStatus {
    guard(|| {
        if set.is_null() || out_json.is_null() {
            set_error("null pointer argument");
            return PwStatus::PwInvalidArgument;
        }
        let s = unsafe { &*set };
        match export_geojson(&s.polygons, Some(&s.confidences), s.width, s.height) {
            Ok(json) => match CString::new(json) {
                Ok(cs) => {
                    unsafe { *out_json = cs.into_raw() };
                    PwStatus::PwOk
                }
                Err(_) => {
                    set_error("geojson contained a NUL byte");
                    PwStatus::PwRuntimeError
                }
            },
            Err(e) => {
                set_error(&e.to_string());
                PwStatus::PwRuntimeError
            }
        }
    })
}

/// Release a polygon set handle. Passing NULL is a no-op.
///
/// # Safety
/// `set` must be a pointer from [`pw_model_extract`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pw_polygon_set_free(set: *mut PwPolygonSet) {
    if !set.is_null() {
        drop(unsafe { Box::from_raw(set) });
    }
}

/// Release a string returned by this library. Passing NULL is a no-op.
///
/// # Safety
/// `s` must be a pointer returned by [`pw_polygon_set_to_geojson`], not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn pw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
