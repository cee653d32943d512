//! C ABI for the emodo library.
//!
//! Handles are opaque heap objects created by `*_new` functions and released by the
//! matching `*_free`. Every fallible call returns an [`EmodoStatus`]; on failure a message
//! is kept per thread and can be read with [`emodo_last_error`]. Panics never cross the
//! boundary: they are reported as [`EmodoStatus::Panic`].
//!
//! Poses are passed as [`EmodoPose`]: a row-major 3×3 rotation and a translation, mapping
//! points from the local frame to the world frame. Point clouds are packed `x, y, z`
//! triples of doubles.
//!
//! # Safety
//!
//! Every pointer argument must be null or valid for the access its type implies. Handles
//! must come from this library and not have been freed, arrays must hold the stated number
//! of elements, and paths must be NUL-terminated. Null pointers are reported as
//! [`EmodoStatus::NullPointer`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3};

use emodo::dataset::TimedPose;
use emodo::ekf::{Extrinsics, OdometryIncrement};
use emodo::elevation_map::{Cell, CellIndex, ElevationGrid, MapPoint, MapUpdateConfig};
use emodo::icp::{register, IcpConfig, RegistrationFailure};
use emodo::pipeline::{FrameStatus, Pipeline, PipelineConfig};
use emodo::so3::{check_rotation, Pose};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmodoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    MalformedInput = 4,
    RegistrationFailed = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmodoPose {
    /// Row-major rotation matrix.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// Outcome of a registration.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmodoRegistration {
    /// World-frame correction; the registered pose is `correction * prior`.
    pub correction: EmodoPose,
    /// Row-major 6×6 covariance of the correction, rotation first.
    pub covariance: [f64; 36],
    pub iterations: u32,
    pub converged: bool,
    pub correspondences: u32,
}

/// One odometry increment, expressed in the body frame at the start of the interval.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmodoIncrement {
    pub timestamp: f64,
    pub dt: f64,
    /// Row-major relative rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    /// Row-major 6×6 noise covariance, rotation first; all zeros selects the configured default.
    pub noise: [f64; 36],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmodoFrameStatus {
    Bootstrap = 0,
    ProprioceptiveOnly = 1,
    Fused = 2,
    RegistrationFailed = 3,
    GateRejected = 4,
    EmptyCloud = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmodoFrameResult {
    pub status: EmodoFrameStatus,
    /// Body pose after the frame.
    pub body_pose: EmodoPose,
    /// Normalized innovation squared, or NaN when no correction was attempted.
    pub nis: f64,
}

/// Opaque elevation grid.
pub struct EmodoGrid {
    grid: ElevationGrid,
}

/// Opaque pipeline: filter state plus its rolling grid.
pub struct EmodoPipeline {
    pipeline: Pipeline,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(EmodoStatus, String);

fn fail<T>(status: EmodoStatus, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, message.into()))
}

/// Runs `f`, records any failure message and converts panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EmodoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EmodoStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {message}"));
            EmodoStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(EmodoStatus::NullPointer, format!("{what} is null")))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(EmodoStatus::NullPointer, format!("{what} is null")))
}

unsafe fn points(xyz: *const f64, count: usize) -> Result<Vec<Vector3<f64>>, Failure> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if xyz.is_null() {
        return fail(EmodoStatus::NullPointer, "point buffer is null");
    }
    let flat = std::slice::from_raw_parts(xyz, count * 3);
    Ok(flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
}

unsafe fn path_arg(path: *const c_char) -> Result<String, Failure> {
    if path.is_null() {
        return fail(EmodoStatus::NullPointer, "path is null");
    }
    CStr::from_ptr(path)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(EmodoStatus::InvalidArgument, "path is not UTF-8".into()))
}

fn pose_in(p: &EmodoPose) -> Result<Pose, Failure> {
    let rotation = Matrix3::from_row_slice(&p.rotation);
    check_rotation(&rotation).map_err(|e| Failure(EmodoStatus::InvalidArgument, e.to_string()))?;
    let pose = Pose::new(rotation, Vector3::from(p.translation));
    if !pose.is_finite() {
        return fail(EmodoStatus::InvalidArgument, "pose is not finite");
    }
    Ok(pose)
}

fn pose_out(p: &Pose) -> EmodoPose {
    let mut rotation = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            rotation[r * 3 + c] = p.rotation[(r, c)];
        }
    }
    EmodoPose {
        rotation,
        translation: [p.translation.x, p.translation.y, p.translation.z],
    }
}

fn matrix6_out(m: &Matrix6<f64>) -> [f64; 36] {
    let mut out = [0.0; 36];
    for r in 0..6 {
        for c in 0..6 {
            out[r * 6 + c] = m[(r, c)];
        }
    }
    out
}

/// Copies the calling thread's last error message into `buffer` (NUL-terminated,
/// truncated to `capacity`). Returns the full message length in bytes, 0 when none.
#[no_mangle]
pub unsafe extern "C" fn emodo_last_error(buffer: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buffer.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buffer, n);
            *buffer.add(n) = 0;
        }
        bytes.len()
    })
}

/// Creates an empty grid whose cell (0, 0) has its lower corner at `(origin_x, origin_y)`.
#[no_mangle]
pub unsafe extern "C" fn emodo_grid_new(
    resolution: f64,
    side_cells: u32,
    origin_x: f64,
    origin_y: f64,
    out: *mut *mut EmodoGrid,
) -> EmodoStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let grid = ElevationGrid::new(resolution, side_cells as usize, Vector2::new(origin_x, origin_y))
            .map_err(|e| Failure(EmodoStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(EmodoGrid { grid }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn emodo_grid_free(grid: *mut EmodoGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Fuses world-frame points with per-point vertical variances into the grid, using the
/// variance inflation rate `lambda`. Points outside the grid are skipped.
#[no_mangle]
pub unsafe extern "C" fn emodo_grid_integrate(
    grid: *mut EmodoGrid,
    xyz: *const f64,
    variances: *const f64,
    count: usize,
    lambda: f64,
) -> EmodoStatus {
    guard(|| {
        let grid = borrow_mut(grid, "grid")?;
        let pts = points(xyz, count)?;
        if count > 0 && variances.is_null() {
            return fail(EmodoStatus::NullPointer, "variance buffer is null");
        }
        let cfg = MapUpdateConfig {
            lambda,
            ..MapUpdateConfig::default()
        };
        cfg.validate().map_err(|e| Failure(EmodoStatus::InvalidArgument, e.to_string()))?;
        let vars = if count == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(variances, count)
        };
        let map_points: Vec<MapPoint> = pts
            .iter()
            .zip(vars)
            .map(|(p, &var)| MapPoint { position: *p, var })
            .collect();
        let stats = grid.grid.integrate_cloud(&map_points, &cfg);
        if stats.invalid > 0 {
            return fail(
                EmodoStatus::InvalidArgument,
                format!("{} points had an invalid height or variance", stats.invalid),
            );
        }
        Ok(())
    })
}

/// Reads one cell. `occupied` is set to false for empty cells, in which case `height` and
/// `variance` are left untouched.
#[no_mangle]
pub unsafe extern "C" fn emodo_grid_cell(
    grid: *const EmodoGrid,
    ix: u32,
    iy: u32,
    occupied: *mut bool,
    height: *mut f64,
    variance: *mut f64,
) -> EmodoStatus {
    guard(|| {
        let grid = borrow(grid, "grid")?;
        let occupied = borrow_mut(occupied, "occupied")?;
        let n = grid.grid.side_cells();
        if ix as usize >= n || iy as usize >= n {
            return fail(EmodoStatus::InvalidArgument, format!("cell ({ix}, {iy}) outside {n}×{n} grid"));
        }
        match grid.grid.cell(CellIndex::new(ix as usize, iy as usize)) {
            Cell::Empty => *occupied = false,
            Cell::Occupied { h, var } => {
                *occupied = true;
                *borrow_mut(height, "height")? = h;
                *borrow_mut(variance, "variance")? = var;
            }
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn emodo_grid_occupied_count(grid: *const EmodoGrid, out: *mut usize) -> EmodoStatus {
    guard(|| {
        *borrow_mut(out, "out")? = borrow(grid, "grid")?.grid.occupied_count();
        Ok(())
    })
}

/// Writes a binary snapshot of the grid to `path`.
#[no_mangle]
pub unsafe extern "C" fn emodo_grid_write_snapshot(grid: *const EmodoGrid, path: *const c_char) -> EmodoStatus {
    guard(|| {
        let grid = borrow(grid, "grid")?;
        let path = path_arg(path)?;
        let file = File::create(&path).map_err(|e| Failure(EmodoStatus::Io, format!("{path}: {e}")))?;
        grid.grid
            .write_snapshot(BufWriter::new(file))
            .map_err(|e| Failure(EmodoStatus::Io, format!("{path}: {e}")))
    })
}

/// Loads a grid from a binary snapshot.
#[no_mangle]
pub unsafe extern "C" fn emodo_grid_read_snapshot(path: *const c_char, out: *mut *mut EmodoGrid) -> EmodoStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let path = path_arg(path)?;
        let file = File::open(&path).map_err(|e| Failure(EmodoStatus::Io, format!("{path}: {e}")))?;
        let grid = ElevationGrid::read_snapshot(BufReader::new(file)).map_err(|e| match e {
            emodo::elevation_map::MapError::Io(_) => Failure(EmodoStatus::Io, format!("{path}: {e}")),
            _ => Failure(EmodoStatus::MalformedInput, format!("{path}: {e}")),
        })?;
        *out = Box::into_raw(Box::new(EmodoGrid { grid }));
        Ok(())
    })
}

/// Registers a camera-frame cloud against the grid starting from `prior_camera_pose`,
/// with default registration settings. Returns `RegistrationFailed` when no estimate was
/// produced; `out` is then left untouched.
#[no_mangle]
pub unsafe extern "C" fn emodo_register(
    grid: *const EmodoGrid,
    xyz: *const f64,
    count: usize,
    prior_camera_pose: *const EmodoPose,
    out: *mut EmodoRegistration,
) -> EmodoStatus {
    guard(|| {
        let grid = borrow(grid, "grid")?;
        let prior = pose_in(borrow(prior_camera_pose, "prior_camera_pose")?)?;
        let out = borrow_mut(out, "out")?;
        let cloud = points(xyz, count)?;
        let reg = register(&cloud, &prior, &grid.grid, &IcpConfig::default());
        let r = reg.result;
        if let Some(f) = r.failure {
            return fail(EmodoStatus::RegistrationFailed, f.as_str());
        }
        *out = EmodoRegistration {
            correction: pose_out(&r.correction),
            covariance: matrix6_out(&r.covariance),
            iterations: r.iterations as u32,
            converged: r.converged,
            correspondences: r.n_corr as u32,
        };
        Ok(())
    })
}

/// Creates a pipeline. `config_toml` may be null for defaults; otherwise it holds the
/// pipeline settings in TOML.
#[no_mangle]
pub unsafe extern "C" fn emodo_pipeline_new(
    config_toml: *const c_char,
    extrinsics: *const EmodoPose,
    initial_body_pose: *const EmodoPose,
    initial_timestamp: f64,
    out: *mut *mut EmodoPipeline,
) -> EmodoStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let cfg = if config_toml.is_null() {
            PipelineConfig::default()
        } else {
            let text = CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|_| Failure(EmodoStatus::InvalidArgument, "config is not UTF-8".into()))?;
            PipelineConfig::from_toml(text).map_err(|e| Failure(EmodoStatus::MalformedInput, e.to_string()))?
        };
        let ext = pose_in(borrow(extrinsics, "extrinsics")?)?;
        let initial = pose_in(borrow(initial_body_pose, "initial_body_pose")?)?;
        let pipeline = Pipeline::new(
            cfg,
            Extrinsics {
                rotation: ext.rotation,
                translation: ext.translation,
            },
            TimedPose {
                timestamp: initial_timestamp,
                pose: initial,
            },
        )
        .map_err(|e| Failure(EmodoStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(EmodoPipeline { pipeline }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn emodo_pipeline_free(pipeline: *mut EmodoPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Propagates the filter through one odometry increment.
#[no_mangle]
pub unsafe extern "C" fn emodo_pipeline_predict(
    pipeline: *mut EmodoPipeline,
    increment: *const EmodoIncrement,
) -> EmodoStatus {
    guard(|| {
        let p = borrow_mut(pipeline, "pipeline")?;
        let inc = borrow(increment, "increment")?;
        let rotation = Matrix3::from_row_slice(&inc.rotation);
        check_rotation(&rotation).map_err(|e| Failure(EmodoStatus::InvalidArgument, e.to_string()))?;
        let noise = Matrix6::from_row_slice(&inc.noise);
        if !(inc.dt >= 0.0 && inc.dt.is_finite() && inc.timestamp.is_finite())
            || !inc.translation.iter().all(|v| v.is_finite())
            || !noise.iter().all(|v| v.is_finite())
        {
            return fail(EmodoStatus::InvalidArgument, "increment has non-finite or negative fields");
        }
        if inc.timestamp < p.pipeline.timestamp() {
            return fail(EmodoStatus::InvalidArgument, "increment timestamp goes backwards");
        }
        p.pipeline.predict(&emodo::dataset::TimedIncrement {
            timestamp: inc.timestamp,
            increment: OdometryIncrement {
                dt: inc.dt,
                delta_rotation: rotation,
                delta_translation: Vector3::from(inc.translation),
                noise,
            },
        });
        Ok(())
    })
}

/// Registers, corrects and integrates one camera-frame cloud.
#[no_mangle]
pub unsafe extern "C" fn emodo_pipeline_process_frame(
    pipeline: *mut EmodoPipeline,
    timestamp: f64,
    xyz: *const f64,
    count: usize,
    out: *mut EmodoFrameResult,
) -> EmodoStatus {
    guard(|| {
        let p = borrow_mut(pipeline, "pipeline")?;
        let out = borrow_mut(out, "out")?;
        let cloud = points(xyz, count)?;
        let record = p.pipeline.process_frame(timestamp, &cloud);
        let status = match record.status {
            FrameStatus::Bootstrap => EmodoFrameStatus::Bootstrap,
            FrameStatus::ProprioceptiveOnly => EmodoFrameStatus::ProprioceptiveOnly,
            FrameStatus::Fused => EmodoFrameStatus::Fused,
            FrameStatus::RegistrationFailed(RegistrationFailure::EmptyCloud) | FrameStatus::EmptyCloud => {
                EmodoFrameStatus::EmptyCloud
            }
            FrameStatus::RegistrationFailed(_) => EmodoFrameStatus::RegistrationFailed,
            FrameStatus::GateRejected => EmodoFrameStatus::GateRejected,
        };
        *out = EmodoFrameResult {
            status,
            body_pose: pose_out(&record.state.pose()),
            nis: record.nis.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Current body pose estimate.
#[no_mangle]
pub unsafe extern "C" fn emodo_pipeline_pose(pipeline: *const EmodoPipeline, out: *mut EmodoPose) -> EmodoStatus {
    guard(|| {
        let p = borrow(pipeline, "pipeline")?;
        *borrow_mut(out, "out")? = pose_out(&p.pipeline.state().pose());
        Ok(())
    })
}

/// Copies the pipeline's current grid into a new, independently owned grid handle.
#[no_mangle]
pub unsafe extern "C" fn emodo_pipeline_copy_grid(
    pipeline: *const EmodoPipeline,
    out: *mut *mut EmodoGrid,
) -> EmodoStatus {
    guard(|| {
        let p = borrow(pipeline, "pipeline")?;
        let out = borrow_mut(out, "out")?;
        *out = Box::into_raw(Box::new(EmodoGrid {
            grid: p.pipeline.grid().clone(),
        }));
        Ok(())
    })
}
