//! C ABI for loading, editing, rendering and saving scene checkpoints.
//!
//! Every fallible call returns a [`WsStatus`]; on failure the message is
//! kept per thread and read back with [`ws_last_error`]. Scenes are opaque
//! [`WsScene`] handles owned by the caller and released with
//! [`ws_scene_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use wavesplat::edit::EditScript;
use wavesplat::geom::{CameraModel, Pose};
use wavesplat::io::checkpoint::{load_checkpoint, save_checkpoint};
use wavesplat::rasterizer::RenderSettings;
use wavesplat::render::render;
use wavesplat::scenegraph::SceneGraph;
use wavesplat::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    InvalidInput = 5,
    Shape = 6,
    UnknownTrack = 7,
    UnknownFrame = 8,
    Mismatch = 9,
    NonFinite = 10,
    Config = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

/// A loaded checkpoint: scene graph plus its metadata.
pub struct WsScene {
    scene: SceneGraph,
    metadata: serde_json::Value,
}

/// Pinhole intrinsics in pixels, OpenCV convention.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct WsCamera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(WsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Invalid(_) => WsStatus::InvalidInput,
            Error::Shape(_) => WsStatus::Shape,
            Error::Io { .. } => WsStatus::Io,
            Error::Format { .. } => WsStatus::Format,
            Error::UnknownTrack(_) => WsStatus::UnknownTrack,
            Error::UnknownFrame(_) => WsStatus::UnknownFrame,
            Error::Mismatch(_) => WsStatus::Mismatch,
            Error::NonFinite { .. } => WsStatus::NonFinite,
            Error::Config(_) => WsStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: WsStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WsStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (WsStatus::Ok, String::new()),
        Ok(Err(Failure(s, m))) => (s, m),
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (WsStatus::Panic, m)
        }
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    Ok(PathBuf::from(str_arg(p, name)?))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(WsStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(WsStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(WsStatus::NullArgument, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(WsStatus::NullArgument, format!("{name} is null")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ws_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns the byte length the
/// full message needs including the terminator. Empty after a success.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ws_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ws_scene_load(path: *const c_char, out: *mut *mut WsScene) -> WsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let ck = load_checkpoint(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(WsScene {
            scene: ck.scene,
            metadata: ck.metadata,
        }));
        Ok(())
    })
}

/// Writes the scene and its metadata to a checkpoint file.
///
/// # Safety
/// `scene` must come from [`ws_scene_load`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ws_scene_save(scene: *const WsScene, path: *const c_char) -> WsStatus {
    guard(|| {
        let s = ref_arg(scene, "scene")?;
        save_checkpoint(&path_arg(path, "path")?, &s.scene, &s.metadata)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `scene` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ws_scene_free(scene: *mut WsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Number of object nodes, hidden ones included.
///
/// # Safety
/// `scene` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ws_scene_object_count(scene: *const WsScene, out: *mut usize) -> WsStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(scene, "scene")?.scene.objects.len();
        Ok(())
    })
}

/// Gaussians over every node.
///
/// # Safety
/// `scene` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ws_scene_gaussian_count(scene: *const WsScene, out: *mut usize) -> WsStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(scene, "scene")?.scene.gaussian_count();
        Ok(())
    })
}

/// Writes object track ids to `ids` in node order and their count to
/// `*len`. Returns `BufferTooSmall` (with `*len` set) if `cap` is short.
///
/// # Safety
/// `ids` must be valid for `cap` writes (or null with `cap == 0`).
#[no_mangle]
pub unsafe extern "C" fn ws_scene_track_ids(scene: *const WsScene, ids: *mut u32, cap: usize, len: *mut usize) -> WsStatus {
    guard(|| {
        let s = ref_arg(scene, "scene")?;
        let len = out_arg(len, "len")?;
        *len = s.scene.objects.len();
        if cap < *len {
            return Err(fail(WsStatus::BufferTooSmall, format!("need room for {} ids", *len)));
        }
        for (k, o) in s.scene.objects.iter().enumerate() {
            *ids.add(k) = o.track_id;
        }
        Ok(())
    })
}

/// Scene clock: seconds of the first and last frame.
///
/// # Safety
/// `scene` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ws_scene_time_range(scene: *const WsScene, t_first: *mut f64, t_last: *mut f64) -> WsStatus {
    guard(|| {
        let s = ref_arg(scene, "scene")?;
        *out_arg(t_first, "t_first")? = s.scene.time.t_first;
        *out_arg(t_last, "t_last")? = s.scene.time.t_last;
        Ok(())
    })
}

/// Applies a JSON edit script. `plane_normal` (3 values) may be null for
/// z-up; a normal inside the script wins. On failure the scene is unchanged.
///
/// # Safety
/// `scene` must be a live handle; `script_json` NUL-terminated;
/// `plane_normal` null or valid for 3 reads.
#[no_mangle]
pub unsafe extern "C" fn ws_scene_apply_edits(scene: *mut WsScene, script_json: *const c_char, plane_normal: *const f64) -> WsStatus {
    guard(|| {
        let s = out_arg(scene, "scene")?;
        let script = EditScript::from_json(str_arg(script_json, "script_json")?)?;
        let normal = if plane_normal.is_null() {
            [0.0, 0.0, 1.0]
        } else {
            [*plane_normal, *plane_normal.add(1), *plane_normal.add(2)]
        };
        s.scene = script.apply(&s.scene, normal)?;
        Ok(())
    })
}

fn pose_from_matrix(m: &[f64]) -> Result<Pose, Failure> {
    let bad = |why: &str| fail(WsStatus::InvalidInput, format!("camera_to_world {why}"));
    if m.iter().any(|v| !v.is_finite()) {
        return Err(bad("is not finite"));
    }
    if m[12..] != [0.0, 0.0, 0.0, 1.0] {
        return Err(bad("bottom row must be 0 0 0 1"));
    }
    let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-6 || r.determinant() < 0.0 {
        return Err(bad("rotation is not orthonormal"));
    }
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Ok(Pose::new(q, Vector3::new(m[3], m[7], m[11])))
}

/// Renders the scene at `seconds` (scene clock) from a row-major 4×4
/// camera-to-world matrix. `color` receives `width·height·3` row-major RGB
/// values; `depth` (optional) receives `width·height` expected depths, 0
/// where nothing was hit. `background` (optional) is an RGB triple.
///
/// # Safety
/// `camera_to_world` must be valid for 16 reads, `color` for the colour
/// writes, `depth` null or valid for the depth writes, `background` null or
/// valid for 3 reads.
#[no_mangle]
pub unsafe extern "C" fn ws_scene_render(
    scene: *const WsScene,
    seconds: f64,
    camera_to_world: *const f64,
    camera: *const WsCamera,
    background: *const f64,
    color: *mut f64,
    depth: *mut f64,
) -> WsStatus {
    guard(|| {
        let s = ref_arg(scene, "scene")?;
        let c = *ref_arg(camera, "camera")?;
        if camera_to_world.is_null() || color.is_null() {
            return Err(fail(WsStatus::NullArgument, "camera_to_world and color must not be null"));
        }
        let pose = pose_from_matrix(std::slice::from_raw_parts(camera_to_world, 16))?;
        let cam = CameraModel {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
        };
        cam.validate()?;
        let mut settings = RenderSettings::default();
        if !background.is_null() {
            settings.background = [*background, *background.add(1), *background.add(2)];
        }
        let r = render(&s.scene, s.scene.time.normalize(seconds), &pose, &cam, &settings)?.output;
        std::slice::from_raw_parts_mut(color, r.color.len()).copy_from_slice(&r.color);
        if !depth.is_null() {
            std::slice::from_raw_parts_mut(depth, r.depth.len()).copy_from_slice(&r.depth);
        }
        Ok(())
    })
}
