//! C ABI over the lockit toolkit.
//!
//! Objects are opaque handles created by `*_new`/`*_load`/`*_build` and released
//! with the matching `*_free`. Every fallible call returns a [`LockitStatus`];
//! on failure [`lockit_last_error_message`] describes the error for the calling
//! thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use lockit::cli::{exit_code, EXIT_CONFIG, EXIT_DATA};
use lockit::cloud::{PointCloud, PreprocessConfig};
use lockit::dataset::{read_trajectory, QueryScan};
use lockit::features::{FeatureBackend, FileBackend, SyntheticBackend};
use lockit::geometry::{OdometryDelta, Pose2};
use lockit::pipeline::{LocalizationConfig, Localizer};
use lockit::registration::FineMethod;
use lockit::topo_map::{build_map, CloudSource, TopoMap};
use lockit::LockitError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockitStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or an out-of-range index.
    InvalidArgument = 1,
    /// Rejected settings.
    Config = 2,
    /// Missing, unreadable or inconsistent input data.
    Data = 3,
    /// Failure while computing.
    Runtime = 4,
    /// Internal panic; the handle involved should be freed.
    Panic = 5,
}

/// A topological map.
pub struct LockitMap {
    map: Arc<TopoMap>,
}

/// A streaming localizer over one map.
pub struct LockitLocalizer {
    inner: Localizer,
    scans: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LockitPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Motion in the frame of the previous scan.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LockitOdometry {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

/// Outcome of pushing one scan.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LockitStep {
    /// False when the scan was skipped because too little distance was travelled.
    pub processed: bool,
    pub iteration: usize,
    pub coarse: LockitPose,
    pub effective_sample_size: f64,
    /// False when the localizer runs without a fine stage.
    pub has_fine: bool,
    pub fine: LockitPose,
    /// The fine stage failed and `fine` repeats the coarse pose.
    pub fine_fell_back: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Argument(String),
    Lockit(LockitError),
}

impl From<LockitError> for Failure {
    fn from(e: LockitError) -> Self {
        Failure::Lockit(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LockitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LockitStatus::Ok,
        Ok(Err(Failure::Argument(m))) => {
            set_last_error(m);
            LockitStatus::InvalidArgument
        }
        Ok(Err(Failure::Lockit(e))) => {
            set_last_error(e.to_string());
            match exit_code(&e) {
                EXIT_CONFIG => LockitStatus::Config,
                EXIT_DATA => LockitStatus::Data,
                _ => LockitStatus::Runtime,
            }
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            LockitStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Argument(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Argument(format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::Argument(format!("{name} is null")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::Argument(format!("{name} is null")))
}

fn pose(p: &Pose2) -> LockitPose {
    LockitPose { x: p.x, y: p.y, theta: p.theta }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lockit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lockit_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a map directory written by `lockit build-map` or `lockit_map_save`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lockit_map_load(dir: *const c_char, out: *mut *mut LockitMap) -> LockitStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let out = mut_arg(out, "out")?;
        let map = TopoMap::load(&PathBuf::from(dir))?;
        *out = Box::into_raw(Box::new(LockitMap { map: Arc::new(map) }));
        Ok(())
    })
}

/// Builds a map from a trajectory directory or pose CSV with the synthetic
/// descriptor backend and default preprocessing.
///
/// # Safety
/// `trajectory` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lockit_map_build(trajectory: *const c_char, spacing_m: f64, out: *mut *mut LockitMap) -> LockitStatus {
    guard(|| {
        let path = str_arg(trajectory, "trajectory")?;
        let out = mut_arg(out, "out")?;
        let scans = read_trajectory(&PathBuf::from(path))?;
        let map = build_map(&scans, spacing_m, &SyntheticBackend::new(), &PreprocessConfig::default())?;
        *out = Box::into_raw(Box::new(LockitMap { map: Arc::new(map) }));
        Ok(())
    })
}

/// # Safety
/// `map` must come from this library and `dir` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lockit_map_save(map: *const LockitMap, dir: *const c_char) -> LockitStatus {
    guard(|| {
        let map = ref_arg(map, "map")?;
        let dir = str_arg(dir, "dir")?;
        map.map.save(&PathBuf::from(dir))?;
        Ok(())
    })
}

/// Number of nodes; 0 for a null handle.
///
/// # Safety
/// `map` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn lockit_map_node_count(map: *const LockitMap) -> usize {
    map.as_ref().map_or(0, |m| m.map.len())
}

/// # Safety
/// `map` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lockit_map_node_pose(map: *const LockitMap, index: usize, out: *mut LockitPose) -> LockitStatus {
    guard(|| {
        let map = ref_arg(map, "map")?;
        let out = mut_arg(out, "out")?;
        if index >= map.map.len() {
            return Err(Failure::Argument(format!("node index {index} out of range (map has {})", map.map.len())));
        }
        *out = pose(&map.map.node(index).pose());
        Ok(())
    })
}

/// # Safety
/// `map` must be null or come from this library and not be used afterwards.
/// Localizers created from the map stay valid.
#[no_mangle]
pub unsafe extern "C" fn lockit_map_free(map: *mut LockitMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Creates a localizer. `config_json` holds a localization config document
/// (null for defaults). `features_dir` selects precomputed LDSC descriptors;
/// null uses the synthetic backend.
///
/// # Safety
/// `map` must come from this library, the strings must be null or
/// NUL-terminated, and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lockit_localizer_new(
    map: *const LockitMap,
    config_json: *const c_char,
    features_dir: *const c_char,
    out: *mut *mut LockitLocalizer,
) -> LockitStatus {
    guard(|| {
        let map = ref_arg(map, "map")?;
        let out = mut_arg(out, "out")?;
        let cfg: LocalizationConfig = match opt_str_arg(config_json, "config_json")? {
            Some(text) => serde_json::from_str(text).map_err(|e| LockitError::InvalidConfig(e.to_string()))?,
            None => LocalizationConfig::default(),
        };
        let backend: Arc<dyn FeatureBackend> = match opt_str_arg(features_dir, "features_dir")? {
            Some(dir) => Arc::new(FileBackend::new(dir).with_dims(map.map.global_dim(), lockit::features::NETWORK_LOCAL_DIM)),
            None => Arc::new(SyntheticBackend::new()),
        };
        let inner = Localizer::new(Arc::clone(&map.map), backend, cfg)?;
        *out = Box::into_raw(Box::new(LockitLocalizer { inner, scans: 0 }));
        Ok(())
    })
}

/// Pushes one scan of `n_points` xyz triples (sensor frame, metres).
/// `odometry` is the motion since the previous pushed scan and is ignored for
/// the first one; null means no motion. `scan_id` names the scan for
/// file-backed descriptors and may be null otherwise.
///
/// # Safety
/// `localizer` must come from this library; `xyz` must point to `3 * n_points`
/// doubles; `scan_id` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lockit_localizer_push(
    localizer: *mut LockitLocalizer,
    scan_id: *const c_char,
    xyz: *const f64,
    n_points: usize,
    odometry: *const LockitOdometry,
    out: *mut LockitStep,
) -> LockitStatus {
    guard(|| {
        let loc = mut_arg(localizer, "localizer")?;
        let out = mut_arg(out, "out")?;
        if xyz.is_null() && n_points > 0 {
            return Err(Failure::Argument("xyz is null".into()));
        }
        let coords = if n_points == 0 { &[][..] } else { std::slice::from_raw_parts(xyz, 3 * n_points) };
        let points: Vec<[f64; 3]> = coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let odo = odometry.as_ref().copied().unwrap_or_default();
        let id = match opt_str_arg(scan_id, "scan_id")? {
            Some(s) => s.to_string(),
            None => format!("scan{:06}", loc.scans),
        };
        let scan = QueryScan {
            id,
            odometry: OdometryDelta {
                dx: odo.dx,
                dy: odo.dy,
                dtheta: odo.dtheta,
            },
            cloud: CloudSource::Memory(Arc::new(PointCloud::from_xyz(&points))),
            truth: None,
        };
        loc.scans += 1;
        *out = LockitStep::default();
        let Some(iter) = loc.inner.push(&scan)? else {
            return Ok(());
        };
        let run = loc.inner.output();
        let trace = run.trace.last().expect("processed scan has a trace row");
        out.processed = true;
        out.iteration = iter;
        out.coarse = LockitPose {
            x: trace.est_x,
            y: trace.est_y,
            theta: trace.est_theta,
        };
        out.effective_sample_size = trace.effective_sample_size;
        if loc.inner.config().method != FineMethod::None {
            if let Some((_, f)) = run.fine.last().filter(|(i, _)| *i == iter) {
                out.has_fine = true;
                out.fine = pose(&f.pose);
                out.fine_fell_back = f.fallback.is_some();
            }
        }
        Ok(())
    })
}

/// Processed filter iterations so far; 0 for a null handle.
///
/// # Safety
/// `localizer` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn lockit_localizer_iterations(localizer: *const LockitLocalizer) -> usize {
    localizer.as_ref().map_or(0, |l| l.inner.output().trace.len())
}

/// Writes the run files (trace, poses, particles, registrations, summary) into `dir`.
///
/// # Safety
/// `localizer` must come from this library and `dir` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lockit_localizer_write(localizer: *const LockitLocalizer, dir: *const c_char) -> LockitStatus {
    guard(|| {
        let loc = ref_arg(localizer, "localizer")?;
        let dir = str_arg(dir, "dir")?;
        loc.inner.output().write(&PathBuf::from(dir), loc.inner.config())?;
        Ok(())
    })
}

/// # Safety
/// `localizer` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lockit_localizer_free(localizer: *mut LockitLocalizer) {
    if !localizer.is_null() {
        drop(Box::from_raw(localizer));
    }
}
