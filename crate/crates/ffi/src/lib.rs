//! C interface to the part-segmentation toolkit.
//!
//! Every function returns a [`VoxsegStatus`]; anything other than `Ok`
//! leaves a human-readable description behind that [`voxseg_last_error`]
//! can copy out. Objects cross the boundary as opaque pointers created and
//! released by their matching `_load`/`_free` pairs, and panics are caught
//! at the boundary and reported as [`VoxsegStatus::Panic`] rather than
//! unwinding into the caller.
//!
//! Checkpoints store their scalar width, so a loaded model transparently
//! runs in whichever precision it was trained with.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::str::FromStr;

use voxseg::checkpoint::{checkpoint_dtype, load_checkpoint};
use voxseg::dilation::validate_schedule;
use voxseg::model::{Model, Variant};
use voxseg::voxel::{
    normalize_cloud, project_labels_to_points, voxelize, LabeledPointCloud, VoxelGrid,
};
use voxseg::{Dtype, Error};

/// Outcome of one call. Anything other than `Ok` stores a message
/// retrievable through `voxseg_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxsegStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Tensor or buffer extents do not line up.
    ShapeMismatch = 3,
    /// A value lies outside the accepted domain.
    InvalidArgument = 4,
    /// An architecture or schedule is inconsistent.
    InvalidConfig = 5,
    /// Autodiff misuse inside the library.
    Autodiff = 6,
    /// A serialized artifact does not follow its format.
    MalformedFile = 7,
    /// Filesystem failure.
    Io = 8,
    /// JSON failure.
    Json = 9,
    /// The library panicked; the boundary absorbed it.
    Panic = 10,
}

/// A loaded network, in whichever precision its checkpoint stored.
pub struct VoxsegModel(ModelKind);

enum ModelKind {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// A labeled point cloud.
pub struct VoxsegCloud(LabeledPointCloud);

/// A voxel grid, possibly carrying per-voxel labels.
pub struct VoxsegGrid(VoxelGrid);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: String) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message);
}

fn status_of(error: &Error) -> VoxsegStatus {
    match error {
        Error::ShapeMismatch(_) => VoxsegStatus::ShapeMismatch,
        Error::InvalidArgument(_) => VoxsegStatus::InvalidArgument,
        Error::InvalidConfig(_) => VoxsegStatus::InvalidConfig,
        Error::Autodiff(_) => VoxsegStatus::Autodiff,
        Error::Format { .. } => VoxsegStatus::MalformedFile,
        Error::Io(_) => VoxsegStatus::Io,
        Error::Json(_) => VoxsegStatus::Json,
    }
}

/// Runs a fallible body, translating errors and panics into statuses.
fn guarded(body: impl FnOnce() -> Result<(), (VoxsegStatus, String)>) -> VoxsegStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(String::new());
            VoxsegStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {message}"));
            VoxsegStatus::Panic
        }
    }
}

fn lifted(error: Error) -> (VoxsegStatus, String) {
    (status_of(&error), error.to_string())
}

fn null(name: &str) -> (VoxsegStatus, String) {
    (VoxsegStatus::NullArgument, format!("{name} is null"))
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn text<'a>(
    ptr: *const c_char,
    name: &str,
) -> Result<&'a str, (VoxsegStatus, String)> {
    if ptr.is_null() {
        return Err(null(name));
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        (
            VoxsegStatus::InvalidUtf8,
            format!("{name} is not valid UTF-8"),
        )
    })
}

unsafe fn deref<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, (VoxsegStatus, String)> {
    unsafe { ptr.as_ref() }.ok_or_else(|| null(name))
}

unsafe fn deref_mut<'a, T>(
    ptr: *mut T,
    name: &str,
) -> Result<&'a mut T, (VoxsegStatus, String)> {
    unsafe { ptr.as_mut() }.ok_or_else(|| null(name))
}

fn store<T>(out: &mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Copies the labels of a finished segmentation into a caller buffer.
fn copy_labels(
    labels: &[u8],
    buf: *mut u8,
    len: usize,
) -> Result<(), (VoxsegStatus, String)> {
    if buf.is_null() {
        return Err(null("labels"));
    }
    if len != labels.len() {
        return Err((
            VoxsegStatus::ShapeMismatch,
            format!("label buffer holds {len} entries but {} are needed", labels.len()),
        ));
    }
    unsafe { std::slice::from_raw_parts_mut(buf, len) }.copy_from_slice(labels);
    Ok(())
}

// ===== Library =====

/// Version of the linked library, as a static string.
#[no_mangle]
pub extern "C" fn voxseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// `cap` bytes) and returns the full message length in bytes. Passing a
/// null buffer or zero capacity just measures.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null.
#[no_mangle]
pub unsafe extern "C" fn voxseg_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        if !buf.is_null() && cap > 0 {
            let n = message.len().min(cap - 1);
            let out = unsafe { std::slice::from_raw_parts_mut(buf as *mut u8, cap) };
            out[..n].copy_from_slice(&message.as_bytes()[..n]);
            out[n] = 0;
        }
        message.len()
    })
}

// ===== Dilation arithmetic =====

/// Checks a dilation-rate schedule for gap-free kernel support. On success
/// writes whether the schedule is feasible; an infeasible schedule is not
/// an error.
///
/// # Safety
/// `rates` must point to `count` readable values; `feasible` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_validate_dilations(
    rates: *const usize,
    count: usize,
    kernel: usize,
    feasible: *mut bool,
) -> VoxsegStatus {
    guarded(|| {
        if rates.is_null() {
            return Err(null("rates"));
        }
        let out = unsafe { deref_mut(feasible, "feasible") }?;
        let rates = unsafe { std::slice::from_raw_parts(rates, count) };
        let schedule = validate_schedule(rates, kernel).map_err(lifted)?;
        *out = schedule.feasible;
        Ok(())
    })
}

/// Receptive-field side length of a built-in architecture variant.
///
/// # Safety
/// `variant` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_receptive_field(
    variant: *const c_char,
    out: *mut usize,
) -> VoxsegStatus {
    guarded(|| {
        let name = unsafe { text(variant, "variant") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        let variant = Variant::from_str(name).map_err(lifted)?;
        let spec = voxseg::model::ArchitectureSpec::for_variant(variant, 32, 2);
        spec.validate().map_err(lifted)?;
        *out = spec.receptive_field();
        Ok(())
    })
}

// ===== Point clouds =====

/// Loads a labeled cloud from a `x y z label` text file. The file stem
/// becomes the shape id.
///
/// # Safety
/// `path` and `category` must be valid NUL-terminated strings; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_cloud_load(
    path: *const c_char,
    category: *const c_char,
    out: *mut *mut VoxsegCloud,
) -> VoxsegStatus {
    guarded(|| {
        let path = unsafe { text(path, "path") }?;
        let category = unsafe { text(category, "category") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        let content = std::fs::read_to_string(path).map_err(|e| lifted(e.into()))?;
        let shape_id = Path::new(path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned());
        let cloud =
            LabeledPointCloud::from_text(&content, category, shape_id).map_err(lifted)?;
        store(out, VoxsegCloud(cloud));
        Ok(())
    })
}

/// Releases a cloud. Null is ignored.
///
/// # Safety
/// `cloud` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn voxseg_cloud_free(cloud: *mut VoxsegCloud) {
    if !cloud.is_null() {
        drop(unsafe { Box::from_raw(cloud) });
    }
}

/// Number of points in the cloud.
///
/// # Safety
/// `cloud` must be a live cloud handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_cloud_point_count(
    cloud: *const VoxsegCloud,
    out: *mut usize,
) -> VoxsegStatus {
    guarded(|| {
        let cloud = unsafe { deref(cloud, "cloud") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        *out = cloud.0.points.len();
        Ok(())
    })
}

/// Centers the cloud on its centroid and scales it into the unit ball,
/// in place.
///
/// # Safety
/// `cloud` must be a live cloud handle.
#[no_mangle]
pub unsafe extern "C" fn voxseg_cloud_normalize(cloud: *mut VoxsegCloud) -> VoxsegStatus {
    guarded(|| {
        let cloud = unsafe { deref_mut(cloud, "cloud") }?;
        cloud.0 = normalize_cloud(cloud.0.clone()).map_err(lifted)?;
        Ok(())
    })
}

/// Quantizes a normalized cloud onto a cubic lattice with majority-vote
/// labels.
///
/// # Safety
/// `cloud` must be a live cloud handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_cloud_voxelize(
    cloud: *const VoxsegCloud,
    resolution: usize,
    out: *mut *mut VoxsegGrid,
) -> VoxsegStatus {
    guarded(|| {
        let cloud = unsafe { deref(cloud, "cloud") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        let grid = voxelize(&cloud.0, resolution).map_err(lifted)?;
        store(out, VoxsegGrid(grid));
        Ok(())
    })
}

/// Reads one label per cloud point out of a labeled grid. Points in
/// unoccupied voxels take the label of the nearest occupied voxel. `len`
/// must equal the cloud's point count.
///
/// # Safety
/// `cloud` and `grid` must be live handles; `labels` must point to `len`
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn voxseg_cloud_project_labels(
    cloud: *const VoxsegCloud,
    grid: *const VoxsegGrid,
    labels: *mut u8,
    len: usize,
) -> VoxsegStatus {
    guarded(|| {
        let cloud = unsafe { deref(cloud, "cloud") }?;
        let grid = unsafe { deref(grid, "grid") }?;
        let projected = project_labels_to_points(&grid.0, &cloud.0).map_err(lifted)?;
        copy_labels(&projected, labels, len)
    })
}

// ===== Voxel grids =====

/// Releases a grid. Null is ignored.
///
/// # Safety
/// `grid` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn voxseg_grid_free(grid: *mut VoxsegGrid) {
    if !grid.is_null() {
        drop(unsafe { Box::from_raw(grid) });
    }
}

/// Side length of the grid.
///
/// # Safety
/// `grid` must be a live grid handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_grid_resolution(
    grid: *const VoxsegGrid,
    out: *mut usize,
) -> VoxsegStatus {
    guarded(|| {
        let grid = unsafe { deref(grid, "grid") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        *out = grid.0.resolution;
        Ok(())
    })
}

/// Number of occupied voxels.
///
/// # Safety
/// `grid` must be a live grid handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_grid_occupied_count(
    grid: *const VoxsegGrid,
    out: *mut usize,
) -> VoxsegStatus {
    guarded(|| {
        let grid = unsafe { deref(grid, "grid") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        *out = grid.0.occupied();
        Ok(())
    })
}

/// Copies the grid's per-voxel labels (zero marks empty space) into a
/// caller buffer of `len == resolution^3` bytes. Errors if the grid
/// carries no labels.
///
/// # Safety
/// `grid` must be a live grid handle; `labels` must point to `len`
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn voxseg_grid_labels(
    grid: *const VoxsegGrid,
    labels: *mut u8,
    len: usize,
) -> VoxsegStatus {
    guarded(|| {
        let grid = unsafe { deref(grid, "grid") }?;
        let stored = grid.0.labels.as_ref().ok_or((
            VoxsegStatus::InvalidArgument,
            "grid carries no labels".to_string(),
        ))?;
        copy_labels(stored, labels, len)
    })
}

/// Reads a grid from a volume file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_grid_read(
    path: *const c_char,
    out: *mut *mut VoxsegGrid,
) -> VoxsegStatus {
    guarded(|| {
        let path = unsafe { text(path, "path") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        let grid = VoxelGrid::read_file(path).map_err(lifted)?;
        store(out, VoxsegGrid(grid));
        Ok(())
    })
}

/// Writes a grid to a volume file.
///
/// # Safety
/// `grid` must be a live grid handle; `path` must be a valid
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn voxseg_grid_write(
    grid: *const VoxsegGrid,
    path: *const c_char,
) -> VoxsegStatus {
    guarded(|| {
        let grid = unsafe { deref(grid, "grid") }?;
        let path = unsafe { text(path, "path") }?;
        grid.0.write_file(path).map_err(lifted)
    })
}

// ===== Models =====

/// Loads a trained checkpoint, restoring the architecture and weights in
/// the precision they were saved with.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_model_load(
    path: *const c_char,
    out: *mut *mut VoxsegModel,
) -> VoxsegStatus {
    guarded(|| {
        let path = unsafe { text(path, "path") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        let path = Path::new(path);
        let kind = match checkpoint_dtype(path).map_err(lifted)? {
            Dtype::F32 => ModelKind::F32(load_checkpoint::<f32>(path).map_err(lifted)?.0),
            Dtype::F64 => ModelKind::F64(load_checkpoint::<f64>(path).map_err(lifted)?.0),
        };
        store(out, VoxsegModel(kind));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn voxseg_model_free(model: *mut VoxsegModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

fn model_spec(model: &VoxsegModel) -> &voxseg::model::ArchitectureSpec {
    match &model.0 {
        ModelKind::F32(m) => m.spec(),
        ModelKind::F64(m) => m.spec(),
    }
}

/// Grid side length the model was built for.
///
/// # Safety
/// `model` must be a live model handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_model_resolution(
    model: *const VoxsegModel,
    out: *mut usize,
) -> VoxsegStatus {
    guarded(|| {
        let model = unsafe { deref(model, "model") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        *out = model_spec(model).resolution;
        Ok(())
    })
}

/// Number of part labels the model predicts.
///
/// # Safety
/// `model` must be a live model handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_model_part_count(
    model: *const VoxsegModel,
    out: *mut usize,
) -> VoxsegStatus {
    guarded(|| {
        let model = unsafe { deref(model, "model") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        *out = model_spec(model).labels;
        Ok(())
    })
}

/// Receptive-field side length of the model's dilation schedule.
///
/// # Safety
/// `model` must be a live model handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_model_receptive_field(
    model: *const VoxsegModel,
    out: *mut usize,
) -> VoxsegStatus {
    guarded(|| {
        let model = unsafe { deref(model, "model") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        *out = model_spec(model).receptive_field();
        Ok(())
    })
}

/// Segments an occupancy grid, producing a new grid whose labels mark every
/// occupied voxel with a predicted part (zero stays empty space).
///
/// # Safety
/// `model` and `grid` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxseg_model_segment(
    model: *mut VoxsegModel,
    grid: *const VoxsegGrid,
    out: *mut *mut VoxsegGrid,
) -> VoxsegStatus {
    guarded(|| {
        let model = unsafe { deref_mut(model, "model") }?;
        let grid = unsafe { deref(grid, "grid") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        let labels = match &mut model.0 {
            ModelKind::F32(m) => m.forward_segment(&grid.0).map_err(lifted)?.1,
            ModelKind::F64(m) => m.forward_segment(&grid.0).map_err(lifted)?.1,
        };
        let labeled = VoxelGrid {
            resolution: grid.0.resolution,
            occupancy: grid.0.occupancy.clone(),
            labels: Some(labels),
            field: None,
        };
        store(out, VoxsegGrid(labeled));
        Ok(())
    })
}
