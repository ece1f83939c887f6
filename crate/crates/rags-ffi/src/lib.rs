//! C ABI for the rags pipeline: opaque handles, integer status codes, and a
//! thread-local last-error message. The header is generated by cbindgen at
//! build time into `include/rags.h`.
//!
//! Ownership rules: every `*_new`/`*_load`/`*_generate` returns a heap
//! handle the caller must release with the matching `*_free`; strings
//! returned by `rags_last_error_message` and `rags_version` are borrowed
//! and must not be freed.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;
use std::ptr;

use rags_core::config::{load_config, PipelineConfig};
use rags_core::error::Error;
use rags_core::eval::{map_over_classes, rotated_iou_bev, Detection};
use rags_core::io;
use rags_core::pipeline::{run_pipeline, DumpFormat};
use rags_core::scene::{generate_scene, Box3D, Scene, SceneSpec};
use rags_core::tensor::Tensor;

/// Status codes returned by fallible calls.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RagsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidConfig = 5,
    Runtime = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_for(err: &Error) -> RagsStatus {
    match err {
        Error::Io(_) => RagsStatus::Io,
        Error::Parse(_) | Error::BadMagic | Error::VersionMismatch(_) | Error::TruncatedFile { .. } => {
            RagsStatus::Parse
        }
        Error::Config(_) => RagsStatus::InvalidConfig,
        _ => RagsStatus::Runtime,
    }
}

fn fail(err: &Error) -> RagsStatus {
    set_error(&err.to_string());
    status_for(err)
}

/// # Safety
/// `path` must be a valid NUL-terminated string pointer.
unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, RagsStatus> {
    if path.is_null() {
        set_error("null path argument");
        return Err(RagsStatus::NullArgument);
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(RagsStatus::InvalidUtf8)
        }
    }
}

/// Library version string; borrowed, do not free.
#[no_mangle]
pub extern "C" fn rags_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread; borrowed, valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rags_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opaque pipeline configuration handle.
pub struct RagsConfig {
    inner: PipelineConfig,
}

/// Desk-scale default configuration. Never fails.
#[no_mangle]
pub extern "C" fn rags_config_default() -> *mut RagsConfig {
    Box::into_raw(Box::new(RagsConfig {
        inner: PipelineConfig::desk(),
    }))
}

/// Load and validate a configuration file; NULL on error (see
/// `rags_last_error_message`).
///
/// # Safety
/// `path` must be a valid NUL-terminated string pointer.
#[no_mangle]
pub unsafe extern "C" fn rags_config_load(path: *const c_char) -> *mut RagsConfig {
    let Ok(path) = path_arg(path) else {
        return ptr::null_mut();
    };
    match load_config(path) {
        Ok(inner) => Box::into_raw(Box::new(RagsConfig { inner })),
        Err(e) => {
            fail(&e);
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `config` must be a live handle from `rags_config_*`.
#[no_mangle]
pub unsafe extern "C" fn rags_config_set_seed(config: *mut RagsConfig, seed: u64) -> RagsStatus {
    let Some(config) = config.as_mut() else {
        set_error("null config");
        return RagsStatus::NullArgument;
    };
    config.inner.seed = seed;
    RagsStatus::Ok
}

/// # Safety
/// `config` must originate from `rags_config_*` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn rags_config_free(config: *mut RagsConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Opaque scene handle.
pub struct RagsScene {
    inner: Scene,
}

/// Generate a deterministic synthetic scene with desk-scale defaults.
#[no_mangle]
pub extern "C" fn rags_scene_generate(seed: u64, num_boxes: usize) -> *mut RagsScene {
    let spec = SceneSpec {
        seed,
        num_boxes,
        ..SceneSpec::default()
    };
    match generate_scene(&spec) {
        Ok(inner) => Box::into_raw(Box::new(RagsScene { inner })),
        Err(e) => {
            fail(&e);
            ptr::null_mut()
        }
    }
}

/// Load a scene directory written by `rags synth` or `rags_scene_save`.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string pointer.
#[no_mangle]
pub unsafe extern "C" fn rags_scene_load(dir: *const c_char) -> *mut RagsScene {
    let Ok(dir) = path_arg(dir) else {
        return ptr::null_mut();
    };
    match io::load_scene(dir) {
        Ok(inner) => Box::into_raw(Box::new(RagsScene { inner })),
        Err(e) => {
            fail(&e);
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `scene` must be live; `dir` must be a valid string pointer.
#[no_mangle]
pub unsafe extern "C" fn rags_scene_save(scene: *const RagsScene, dir: *const c_char) -> RagsStatus {
    let Some(scene) = scene.as_ref() else {
        set_error("null scene");
        return RagsStatus::NullArgument;
    };
    let dir = match path_arg(dir) {
        Ok(d) => d,
        Err(s) => return s,
    };
    match io::save_scene(dir, &scene.inner) {
        Ok(()) => RagsStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Number of ground-truth boxes in the scene.
///
/// # Safety
/// `scene` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rags_scene_num_boxes(scene: *const RagsScene) -> usize {
    scene.as_ref().map_or(0, |s| s.inner.boxes.len())
}

/// Number of radar returns in the scene.
///
/// # Safety
/// `scene` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rags_scene_num_radar_points(scene: *const RagsScene) -> usize {
    scene.as_ref().map_or(0, |s| s.inner.radar.len())
}

/// # Safety
/// `scene` must originate from `rags_scene_*` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn rags_scene_free(scene: *mut RagsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Run the full pipeline, writing dumps and the report under `out_dir`.
/// Pass `csv_slices != 0` to also export CSV slices.
///
/// # Safety
/// `config` and `scene` must be live handles; `out_dir` a valid string.
#[no_mangle]
pub unsafe extern "C" fn rags_run_pipeline(
    config: *const RagsConfig,
    scene: *const RagsScene,
    out_dir: *const c_char,
    csv_slices: i32,
) -> RagsStatus {
    let (Some(config), Some(scene)) = (config.as_ref(), scene.as_ref()) else {
        set_error("null config or scene");
        return RagsStatus::NullArgument;
    };
    let out_dir = match path_arg(out_dir) {
        Ok(d) => d,
        Err(s) => return s,
    };
    let format = if csv_slices != 0 {
        DumpFormat::Csv
    } else {
        DumpFormat::Rags
    };
    match run_pipeline(&config.inner, &scene.inner, out_dir, format) {
        Ok(_) => RagsStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Opaque tensor handle over a loaded container.
pub struct RagsTensor {
    inner: Tensor,
}

/// Load a tensor container; NULL on error.
///
/// # Safety
/// `path` must be a valid NUL-terminated string pointer.
#[no_mangle]
pub unsafe extern "C" fn rags_tensor_load(path: *const c_char) -> *mut RagsTensor {
    let Ok(path) = path_arg(path) else {
        return ptr::null_mut();
    };
    match io::load_tensor(path) {
        Ok(inner) => Box::into_raw(Box::new(RagsTensor { inner })),
        Err(e) => {
            fail(&e);
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `tensor` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rags_tensor_rank(tensor: *const RagsTensor) -> u32 {
    tensor.as_ref().map_or(0, |t| t.inner.rank() as u32)
}

/// Extent along `axis`, or 0 when the axis is out of range.
///
/// # Safety
/// `tensor` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rags_tensor_dim(tensor: *const RagsTensor, axis: u32) -> u64 {
    tensor
        .as_ref()
        .and_then(|t| t.inner.dims().get(axis as usize))
        .map_or(0, |&d| d as u64)
}

/// Total element count.
///
/// # Safety
/// `tensor` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rags_tensor_len(tensor: *const RagsTensor) -> u64 {
    tensor.as_ref().map_or(0, |t| t.inner.len() as u64)
}

/// Borrowed pointer to the row-major f64 payload; valid while the handle
/// lives. NULL for a null handle.
///
/// # Safety
/// `tensor` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rags_tensor_data(tensor: *const RagsTensor) -> *const f64 {
    tensor.as_ref().map_or(ptr::null(), |t| t.inner.data().as_ptr())
}

/// # Safety
/// `tensor` must originate from `rags_tensor_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn rags_tensor_free(tensor: *mut RagsTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// Rotated-BEV IoU of two yawed boxes given as (center xyz, size lwh, yaw).
/// Returns -1 on a null argument.
///
/// # Safety
/// `center_a`, `size_a`, `center_b`, `size_b` must each point to 3 readable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn rags_rotated_iou_bev(
    center_a: *const f64,
    size_a: *const f64,
    yaw_a: f64,
    center_b: *const f64,
    size_b: *const f64,
    yaw_b: f64,
) -> f64 {
    if center_a.is_null() || size_a.is_null() || center_b.is_null() || size_b.is_null() {
        set_error("null box argument");
        return -1.0;
    }
    let read3 = |p: *const f64| [*p, *p.add(1), *p.add(2)];
    let a = Box3D {
        center: read3(center_a),
        size: read3(size_a),
        yaw: yaw_a,
        class_id: 0,
    };
    let b = Box3D {
        center: read3(center_b),
        size: read3(size_b),
        yaw: yaw_b,
        class_id: 0,
    };
    rotated_iou_bev(&a, &b)
}

/// Mean average precision of detections against a scene's ground truth at
/// one IoU threshold. Boxes are packed as 7 doubles each (center xyz, size
/// lwh, yaw). Returns -1 on error.
///
/// # Safety
/// `boxes` must point to `7 * count` doubles, `scores` and `class_ids` to
/// `count` elements each; `scene` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rags_map_against_scene(
    scene: *const RagsScene,
    boxes: *const f64,
    scores: *const f64,
    class_ids: *const u32,
    count: usize,
    iou_threshold: f64,
) -> f64 {
    let Some(scene) = scene.as_ref() else {
        set_error("null scene");
        return -1.0;
    };
    if count > 0 && (boxes.is_null() || scores.is_null() || class_ids.is_null()) {
        set_error("null detection arrays");
        return -1.0;
    }
    let mut detections = Vec::with_capacity(count);
    for i in 0..count {
        let base = boxes.add(i * 7);
        detections.push(Detection {
            box3d: Box3D {
                center: [*base, *base.add(1), *base.add(2)],
                size: [*base.add(3), *base.add(4), *base.add(5)],
                yaw: *base.add(6),
                class_id: *class_ids.add(i),
            },
            score: *scores.add(i),
        });
    }
    map_over_classes(&detections, &scene.inner.boxes, &[], iou_threshold)
}
