//! C ABI for the fconv detector.
//!
//! Objects are opaque handles created by `*_new` functions and released by
//! the matching `*_free`. Every fallible call returns an [`FconvStatus`]; on
//! failure the message is kept per thread and read with
//! [`fconv_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use fconv::boxes::{iou_3d, iou_bev, OrientedBox3D};
use fconv::config::Config;
use fconv::io_data::{CameraCalib, PointCloud, PointFrame, RegionProposal2D, SceneSample};
use fconv::net::{NetSpec, Network};
use fconv::pipeline::{infer_scene, refine_scene, PreparedScene};
use fconv::Error;

/// Result of a call. Library errors share the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FconvStatus {
    Ok = 0,
    Io = 2,
    Malformed = 3,
    Config = 4,
    Shape = 5,
    Generation = 6,
    Checkpoint = 7,
    Invalid = 8,
    NullPointer = 9,
    Utf8 = 10,
    Panic = 11,
    OutOfRange = 12,
}

impl From<&Error> for FconvStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => FconvStatus::Io,
            Error::Malformed { .. } => FconvStatus::Malformed,
            Error::Config(_) => FconvStatus::Config,
            Error::Shape(_) => FconvStatus::Shape,
            Error::Generation(_) => FconvStatus::Generation,
            Error::Checkpoint(_) => FconvStatus::Checkpoint,
            Error::Invalid(_) => FconvStatus::Invalid,
        }
    }
}

/// An oriented box in the rectified camera frame: volumetric center, sizes
/// `(length, width, height)` and heading about the vertical axis.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FconvBox {
    pub center: [f64; 3],
    pub sizes: [f64; 3],
    pub yaw: f64,
}

impl From<&OrientedBox3D> for FconvBox {
    fn from(b: &OrientedBox3D) -> Self {
        FconvBox {
            center: b.center,
            sizes: b.sizes,
            yaw: b.yaw,
        }
    }
}

/// One detection; `category` indexes the configured category list.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FconvDetection {
    pub category: u32,
    pub bbox: FconvBox,
    pub score_3d: f64,
    pub score_2d: f64,
    pub score_fused: f64,
}

/// Resolved configuration.
pub struct FconvConfig(Config);

/// First-stage network, optional refinement network and their configuration.
pub struct FconvDetector {
    cfg: Config,
    first: Network,
    refine: Option<Network>,
}

/// Points and proposals of one frame.
pub struct FconvScene(SceneSample);

/// Detections of one frame, ordered by fused score.
pub struct FconvDetections(Vec<FconvDetection>);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Utf8(&'static str),
    Range(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, records any failure and converts it into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FconvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FconvStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            FconvStatus::from(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed as {what}"));
            FconvStatus::NullPointer
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            FconvStatus::Utf8
        }
        Ok(Err(Failure::Range(msg))) => {
            set_error(msg);
            FconvStatus::OutOfRange
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            FconvStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len` bytes) and returns the full message length
/// plus one. `buf` may be null to query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fconv_last_error(buf: *mut c_char, len: usize) -> usize {
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

/// Creates a configuration from a named preset.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fconv_config_new(preset: *const c_char, out: *mut *mut FconvConfig) -> FconvStatus {
    guard(|| {
        let cfg = Config::preset(text(preset, "preset")?)?;
        put(out, FconvConfig(cfg))
    })
}

/// Applies one `key = value` override.
///
/// # Safety
/// `cfg` must come from [`fconv_config_new`]; `key` and `value` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fconv_config_set(
    cfg: *mut FconvConfig,
    key: *const c_char,
    value: *const c_char,
) -> FconvStatus {
    guard(|| {
        let cfg = handle_mut(cfg, "cfg")?;
        let (key, value) = (text(key, "key")?, text(value, "value")?);
        let mut next = cfg.0.clone();
        next.set(key, value)?;
        cfg.0 = next;
        Ok(())
    })
}

/// Applies every entry of a `key = value` config file; on failure the
/// configuration is left unchanged.
///
/// # Safety
/// `cfg` must come from [`fconv_config_new`]; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fconv_config_load_file(cfg: *mut FconvConfig, path: *const c_char) -> FconvStatus {
    guard(|| {
        let cfg = handle_mut(cfg, "cfg")?;
        let mut next = cfg.0.clone();
        next.apply_file(text(path, "path")?)?;
        cfg.0 = next;
        Ok(())
    })
}

/// Number of configured categories.
///
/// # Safety
/// `cfg` must be null or come from [`fconv_config_new`].
#[no_mangle]
pub unsafe extern "C" fn fconv_config_category_count(cfg: *const FconvConfig) -> usize {
    cfg.as_ref().map_or(0, |c| c.0.categories.len())
}

/// # Safety
/// `cfg` must be null or come from [`fconv_config_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fconv_config_free(cfg: *mut FconvConfig) {
    release(cfg);
}

/// Loads a detector. `refine_model` may be null to skip refinement. The
/// configuration is validated and copied; later changes to `cfg` do not
/// affect the detector.
///
/// # Safety
/// `cfg` must come from [`fconv_config_new`]; paths must be NUL-terminated
/// strings (`refine_model` may be null); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fconv_detector_new(
    cfg: *const FconvConfig,
    first_model: *const c_char,
    refine_model: *const c_char,
    out: *mut *mut FconvDetector,
) -> FconvStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?.0.clone();
        cfg.validate()?;
        let first = Network::from_file(NetSpec::from_config(&cfg), text(first_model, "first_model")?)?;
        let refine = if refine_model.is_null() {
            None
        } else {
            Some(Network::from_file(
                NetSpec::refine_from_config(&cfg),
                text(refine_model, "refine_model")?,
            )?)
        };
        put(out, FconvDetector { cfg, first, refine })
    })
}

/// # Safety
/// `det` must be null or come from [`fconv_detector_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fconv_detector_free(det: *mut FconvDetector) {
    release(det);
}

/// Creates a scene from `count` points in the rectified camera frame
/// (`xyz` holds `3 * count` values) and the row-major 3x4 camera projection
/// matrix. `intensities` may be null or hold `count` values.
///
/// # Safety
/// Pointers must be valid for the stated number of values; `frame_id` must
/// be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fconv_scene_new(
    frame_id: *const c_char,
    xyz: *const f64,
    intensities: *const f64,
    count: usize,
    projection: *const f64,
    out: *mut *mut FconvScene,
) -> FconvStatus {
    guard(|| {
        let frame_id = text(frame_id, "frame_id")?.to_string();
        if xyz.is_null() && count > 0 {
            return Err(Failure::Null("xyz"));
        }
        if projection.is_null() {
            return Err(Failure::Null("projection"));
        }
        let flat: &[f64] = if count == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(xyz, 3 * count)
        };
        let points = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let ints =
            (!intensities.is_null() && count > 0).then(|| std::slice::from_raw_parts(intensities, count).to_vec());
        let p = std::slice::from_raw_parts(projection, 12);
        let proj: [[f64; 4]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| p[4 * r + c]));
        let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let rigid = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let scene = SceneSample {
            frame_id,
            cloud: PointCloud::new(points, ints, PointFrame::CameraRect)?,
            calib: CameraCalib::new(proj, identity, rigid)?,
            proposals: Vec::new(),
            labels: None,
        };
        put(out, FconvScene(scene))
    })
}

/// Adds a 2D proposal `(u_min, v_min, u_max, v_max)` in pixels.
///
/// # Safety
/// `scene` must come from [`fconv_scene_new`]; `category` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fconv_scene_add_proposal(
    scene: *mut FconvScene,
    category: *const c_char,
    u_min: f64,
    v_min: f64,
    u_max: f64,
    v_max: f64,
    score_2d: f64,
) -> FconvStatus {
    guard(|| {
        let scene = handle_mut(scene, "scene")?;
        let p = RegionProposal2D::new([u_min, v_min, u_max, v_max], text(category, "category")?, score_2d)?;
        scene.0.proposals.push(p);
        Ok(())
    })
}

/// Number of proposals added so far.
///
/// # Safety
/// `scene` must be null or come from [`fconv_scene_new`].
#[no_mangle]
pub unsafe extern "C" fn fconv_scene_proposal_count(scene: *const FconvScene) -> usize {
    scene.as_ref().map_or(0, |s| s.0.proposals.len())
}

/// # Safety
/// `scene` must be null or come from [`fconv_scene_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fconv_scene_free(scene: *mut FconvScene) {
    release(scene);
}

/// Runs the detector on every proposal of `scene`, refining when the
/// detector has a refinement network.
///
/// # Safety
/// Handles must come from their constructors; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fconv_detect(
    det: *const FconvDetector,
    scene: *const FconvScene,
    out: *mut *mut FconvDetections,
) -> FconvStatus {
    guard(|| {
        let det = handle(det, "det")?;
        let scene = handle(scene, "scene")?;
        let prepared = PreparedScene::new(&scene.0, &det.cfg);
        let mut found = infer_scene(&det.first, &prepared, &det.cfg)?;
        if let Some(r) = &det.refine {
            found = refine_scene(r, &prepared, &found, &det.cfg)?;
        }
        let items = found
            .iter()
            .map(|d| FconvDetection {
                category: det.cfg.category_index(&d.category).unwrap_or(0) as u32,
                bbox: FconvBox::from(&d.bbox),
                score_3d: d.score_3d,
                score_2d: d.score_2d,
                score_fused: d.score_fused,
            })
            .collect();
        put(out, FconvDetections(items))
    })
}

/// # Safety
/// `dets` must be null or come from [`fconv_detect`].
#[no_mangle]
pub unsafe extern "C" fn fconv_detections_len(dets: *const FconvDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.0.len())
}

/// Copies detection `index` into `out`.
///
/// # Safety
/// `dets` must come from [`fconv_detect`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fconv_detections_get(
    dets: *const FconvDetections,
    index: usize,
    out: *mut FconvDetection,
) -> FconvStatus {
    guard(|| {
        let dets = handle(dets, "dets")?;
        let out = handle_mut(out, "out")?;
        let d = dets
            .0
            .get(index)
            .ok_or_else(|| Failure::Range(format!("detection index {index} out of range for {}", dets.0.len())))?;
        *out = *d;
        Ok(())
    })
}

/// # Safety
/// `dets` must be null or come from [`fconv_detect`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fconv_detections_free(dets: *mut FconvDetections) {
    release(dets);
}

/// 3D and bird's-eye-view IoU of two boxes.
///
/// # Safety
/// All pointers must be valid; `iou_3d_out` and `iou_bev_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn fconv_box_iou(
    a: *const FconvBox,
    b: *const FconvBox,
    iou_3d_out: *mut f64,
    iou_bev_out: *mut f64,
) -> FconvStatus {
    guard(|| {
        let to_box = |p: &FconvBox| OrientedBox3D::new(p.center, p.sizes, p.yaw);
        let a = to_box(handle(a, "a")?)?;
        let b = to_box(handle(b, "b")?)?;
        if let Some(o) = iou_3d_out.as_mut() {
            *o = iou_3d(&a, &b);
        }
        if let Some(o) = iou_bev_out.as_mut() {
            *o = iou_bev(&a, &b);
        }
        Ok(())
    })
}
