//! C ABI for the reduced order modeling toolkit: opaque handles, status
//! codes, and a thread-local last-error message. The generated header lives
//! in `include/rom_bayes.h`.
//!
//! Conventions: functions return `RbStatus` (zero on success) and write
//! results through out-pointers; handle-returning functions return null on
//! failure. Every handle has a matching `*_free` function. Buffers are
//! caller-allocated; matrix data is row-major with the time index as the
//! slowest dimension.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use rom_bayes::config::PipelineConfig;
use rom_bayes::error::RomError;
use rom_bayes::fom::{simulate_burgers, BurgersRun, Grid1D, SnapshotMatrix};
use rom_bayes::pce;
use rom_bayes::pipeline::run_pipeline;
use rom_bayes::pod::{compute_pod, project_snapshots, PodBasis};
use rom_bayes::rom::{assemble_reduced_operators, integrate_rom, CorrectionVector, ReducedSystem};
use rom_bayes::{io, Result};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Divergence = 4,
    RankDeficient = 5,
    NumericalFailure = 6,
    Io = 7,
    Config = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(err: &RomError) -> RbStatus {
    let status = match err {
        RomError::Divergence { .. } | RomError::NewtonFailure { .. } => RbStatus::Divergence,
        RomError::RankDeficient { .. } => RbStatus::RankDeficient,
        RomError::DimensionMismatch(_) | RomError::IncompatibleDiscretization(_) => {
            RbStatus::DimensionMismatch
        }
        RomError::InvalidArgument(_) => RbStatus::InvalidArgument,
        RomError::NumericalConditioning(_)
        | RomError::EnsembleDegenerate { .. }
        | RomError::IterationFailure(_) => RbStatus::NumericalFailure,
        RomError::Io { .. } | RomError::Parse { .. } => RbStatus::Io,
        RomError::Config(_) => RbStatus::Config,
    };
    let msg = CString::new(err.to_string()).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
    status
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Message for the most recent error on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |s| s.as_ptr())
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn rb_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

// Opaque handle types.
pub struct RbSnapshots(SnapshotMatrix);
pub struct RbBasis(PodBasis);
pub struct RbSystem(ReducedSystem);

unsafe fn cstr_to_path<'a>(ptr: *const c_char) -> Option<&'a Path> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok().map(Path::new)
}

fn boxed_or_null<T>(result: Result<T>) -> *mut T {
    match result {
        Ok(value) => {
            clear_error();
            Box::into_raw(Box::new(value))
        }
        Err(err) => {
            set_error(&err);
            std::ptr::null_mut()
        }
    }
}

fn status_of(result: Result<()>) -> RbStatus {
    match result {
        Ok(()) => {
            clear_error();
            RbStatus::Ok
        }
        Err(err) => set_error(&err),
    }
}

// ---------------------------------------------------------------------------
// snapshots

/// Reads a `# snapshot v1` file. Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rb_snapshots_read(path: *const c_char) -> *mut RbSnapshots {
    let Some(path) = cstr_to_path(path) else {
        set_error(&RomError::InvalidArgument("null or non-UTF8 path".into()));
        return std::ptr::null_mut();
    };
    boxed_or_null(io::read_snapshots(path).map(RbSnapshots))
}

/// Writes a snapshot set in the `# snapshot v1` format.
///
/// # Safety
/// `snapshots` must be a live handle, `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rb_snapshots_write(
    snapshots: *const RbSnapshots,
    path: *const c_char,
) -> RbStatus {
    let (Some(snaps), Some(path)) = (snapshots.as_ref(), cstr_to_path(path)) else {
        return set_error(&RomError::InvalidArgument("null argument".into()));
    };
    status_of(io::write_snapshots(path, &snaps.0))
}

/// Runs the 1D viscous Burgers solver.
///
/// # Safety
/// `initial` must point to `n_cells` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn rb_simulate_burgers(
    n_cells: usize,
    x_min: f64,
    x_max: f64,
    viscosity: f64,
    initial: *const f64,
    bc_left: f64,
    bc_right: f64,
    t_end: f64,
    dt: f64,
    save_every: usize,
) -> *mut RbSnapshots {
    if initial.is_null() {
        set_error(&RomError::InvalidArgument("null initial state".into()));
        return std::ptr::null_mut();
    }
    let init = DVector::from_column_slice(std::slice::from_raw_parts(initial, n_cells));
    let result = Grid1D::new(n_cells, x_min, x_max).and_then(|grid| {
        simulate_burgers(
            &grid,
            viscosity,
            &init,
            (bc_left, bc_right),
            BurgersRun {
                t_end,
                dt,
                save_every,
            },
        )
    });
    boxed_or_null(result.map(RbSnapshots))
}

/// # Safety
/// `snapshots` must be a live handle (or null).
#[no_mangle]
pub unsafe extern "C" fn rb_snapshots_n_cells(snapshots: *const RbSnapshots) -> usize {
    snapshots.as_ref().map_or(0, |s| s.0.n_cells())
}

/// # Safety
/// `snapshots` must be a live handle (or null).
#[no_mangle]
pub unsafe extern "C" fn rb_snapshots_n_times(snapshots: *const RbSnapshots) -> usize {
    snapshots.as_ref().map_or(0, |s| s.0.n_times())
}

/// Copies the state at time index `t` into `out` (`n_cells` doubles).
///
/// # Safety
/// `out` must point to at least `n_cells` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rb_snapshots_state(
    snapshots: *const RbSnapshots,
    t: usize,
    out: *mut f64,
) -> RbStatus {
    let Some(snaps) = snapshots.as_ref() else {
        return set_error(&RomError::InvalidArgument("null snapshots".into()));
    };
    if out.is_null() {
        return set_error(&RomError::InvalidArgument("null output buffer".into()));
    }
    if t >= snaps.0.n_times() {
        return set_error(&RomError::InvalidArgument(format!(
            "time index {t} out of range"
        )));
    }
    let n = snaps.0.n_cells();
    let slice = std::slice::from_raw_parts_mut(out, n);
    for c in 0..n {
        slice[c] = snaps.0.values[(c, t)];
    }
    clear_error();
    RbStatus::Ok
}

/// # Safety
/// `snapshots` must be a pointer previously returned by this library and
/// not yet freed (null is ignored).
#[no_mangle]
pub unsafe extern "C" fn rb_snapshots_free(snapshots: *mut RbSnapshots) {
    if !snapshots.is_null() {
        drop(Box::from_raw(snapshots));
    }
}

// ---------------------------------------------------------------------------
// POD basis

/// Computes the POD basis with `n_modes` modes.
///
/// # Safety
/// `snapshots` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rb_pod_compute(
    snapshots: *const RbSnapshots,
    n_modes: usize,
) -> *mut RbBasis {
    let Some(snaps) = snapshots.as_ref() else {
        set_error(&RomError::InvalidArgument("null snapshots".into()));
        return std::ptr::null_mut();
    };
    boxed_or_null(compute_pod(&snaps.0, n_modes).map(RbBasis))
}

/// # Safety
/// `basis` must be a live handle (or null).
#[no_mangle]
pub unsafe extern "C" fn rb_basis_n_modes(basis: *const RbBasis) -> usize {
    basis.as_ref().map_or(0, |b| b.0.n_modes())
}

/// Fraction of snapshot energy captured by the retained modes.
///
/// # Safety
/// `basis` must be a live handle (or null).
#[no_mangle]
pub unsafe extern "C" fn rb_basis_energy_fraction(basis: *const RbBasis) -> f64 {
    basis.as_ref().map_or(f64::NAN, |b| b.0.energy_fraction())
}

/// Projects snapshots onto the basis; `out` receives n_times × n_modes
/// coefficients, time-major.
///
/// # Safety
/// `out` must point to `n_times * n_modes` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rb_project(
    snapshots: *const RbSnapshots,
    basis: *const RbBasis,
    out: *mut f64,
) -> RbStatus {
    let (Some(snaps), Some(basis)) = (snapshots.as_ref(), basis.as_ref()) else {
        return set_error(&RomError::InvalidArgument("null argument".into()));
    };
    if out.is_null() {
        return set_error(&RomError::InvalidArgument("null output buffer".into()));
    }
    match project_snapshots(&snaps.0, &basis.0) {
        Ok(ms) => {
            let (n_t, n_r) = ms.coefficients.shape();
            let slice = std::slice::from_raw_parts_mut(out, n_t * n_r);
            for t in 0..n_t {
                for j in 0..n_r {
                    slice[t * n_r + j] = ms.coefficients[(t, j)];
                }
            }
            clear_error();
            RbStatus::Ok
        }
        Err(err) => set_error(&err),
    }
}

/// # Safety
/// `basis` must be a pointer previously returned by this library and not
/// yet freed (null is ignored).
#[no_mangle]
pub unsafe extern "C" fn rb_basis_free(basis: *mut RbBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

// ---------------------------------------------------------------------------
// reduced system

/// Galerkin-projects the discrete operators of the uniform grid onto the
/// basis.
///
/// # Safety
/// `basis` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rb_assemble_rom(
    basis: *const RbBasis,
    n_cells: usize,
    x_min: f64,
    x_max: f64,
    viscosity: f64,
) -> *mut RbSystem {
    let Some(basis) = basis.as_ref() else {
        set_error(&RomError::InvalidArgument("null basis".into()));
        return std::ptr::null_mut();
    };
    let result = Grid1D::new(n_cells, x_min, x_max)
        .and_then(|grid| assemble_reduced_operators(&basis.0, &grid, viscosity));
    boxed_or_null(result.map(RbSystem))
}

/// Reads a `# rom v1` file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rb_system_read(path: *const c_char) -> *mut RbSystem {
    let Some(path) = cstr_to_path(path) else {
        set_error(&RomError::InvalidArgument("null or non-UTF8 path".into()));
        return std::ptr::null_mut();
    };
    boxed_or_null(io::read_reduced_system(path).map(RbSystem))
}

/// # Safety
/// `system` must be a live handle, `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rb_system_write(
    system: *const RbSystem,
    path: *const c_char,
) -> RbStatus {
    let (Some(system), Some(path)) = (system.as_ref(), cstr_to_path(path)) else {
        return set_error(&RomError::InvalidArgument("null argument".into()));
    };
    status_of(io::write_reduced_system(path, &system.0))
}

/// # Safety
/// `system` must be a live handle (or null).
#[no_mangle]
pub unsafe extern "C" fn rb_system_n_modes(system: *const RbSystem) -> usize {
    system.as_ref().map_or(0, |s| s.0.n_modes())
}

/// # Safety
/// `system` must be a pointer previously returned by this library and not
/// yet freed (null is ignored).
#[no_mangle]
pub unsafe extern "C" fn rb_system_free(system: *mut RbSystem) {
    if !system.is_null() {
        drop(Box::from_raw(system));
    }
}

/// Length of the flattened correction vector for `n_modes`:
/// s = n²(1 + n).
#[no_mangle]
pub extern "C" fn rb_correction_param_len(n_modes: usize) -> usize {
    CorrectionVector::param_len(n_modes)
}

/// Integrates the corrected reduced ODE on the given time grid; `out`
/// receives n_times × n_modes states, time-major. `correction` may be null
/// for the uncorrected model.
///
/// # Safety
/// `a0` points to n_modes doubles, `times` to n_times doubles, `correction`
/// to `rb_correction_param_len(n_modes)` doubles when non-null, `out` to
/// `n_times * n_modes` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rb_integrate_rom(
    system: *const RbSystem,
    correction: *const f64,
    a0: *const f64,
    times: *const f64,
    n_times: usize,
    out: *mut f64,
) -> RbStatus {
    let Some(system) = system.as_ref() else {
        return set_error(&RomError::InvalidArgument("null system".into()));
    };
    if a0.is_null() || times.is_null() || out.is_null() {
        return set_error(&RomError::InvalidArgument("null buffer argument".into()));
    }
    let n = system.0.n_modes();
    let s = CorrectionVector::param_len(n);
    let q = if correction.is_null() {
        CorrectionVector::zeros(n)
    } else {
        let values = DVector::from_column_slice(std::slice::from_raw_parts(correction, s));
        match CorrectionVector::from_values(n, values) {
            Ok(q) => q,
            Err(err) => return set_error(&err),
        }
    };
    let a0 = DVector::from_column_slice(std::slice::from_raw_parts(a0, n));
    let times = std::slice::from_raw_parts(times, n_times);
    match integrate_rom(&system.0, &q, &a0, times) {
        Ok(traj) => {
            let slice = std::slice::from_raw_parts_mut(out, n_times * n);
            for t in 0..n_times {
                for j in 0..n {
                    slice[t * n + j] = traj.states[(t, j)];
                }
            }
            clear_error();
            RbStatus::Ok
        }
        Err(err) => set_error(&err),
    }
}

// ---------------------------------------------------------------------------
// misc

/// Cardinality C(m+p, p) of the total-degree multi-index set, or 0 on
/// overflow.
#[no_mangle]
pub extern "C" fn rb_multiindex_cardinality(m: usize, p: usize) -> u64 {
    pce::cardinality(m, p).unwrap_or(0)
}

/// Runs the full pipeline for a TOML config. `seed` overrides the config
/// seed when non-negative.
///
/// # Safety
/// `config_path` and `output_dir` must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rb_run_pipeline(
    config_path: *const c_char,
    output_dir: *const c_char,
    seed: i64,
) -> RbStatus {
    let (Some(config_path), Some(output_dir)) =
        (cstr_to_path(config_path), cstr_to_path(output_dir))
    else {
        return set_error(&RomError::InvalidArgument("null or non-UTF8 path".into()));
    };
    let config = match PipelineConfig::load(config_path) {
        Ok(c) => c,
        Err(err) => return set_error(&err),
    };
    let seed_override = (seed >= 0).then_some(seed as u64);
    match run_pipeline(config, output_dir, seed_override) {
        Ok(_) => {
            clear_error();
            RbStatus::Ok
        }
        Err(err) => set_error(&err),
    }
}

// Keep DMatrix in the public-dependency graph out of the generated header:
// cbindgen only sees opaque struct declarations for the handle types.
#[allow(dead_code)]
fn _assert_handles_are_opaque(_: &DMatrix<f64>) {}
