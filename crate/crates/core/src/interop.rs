//! C-callable session API over flat `f64` arrays.
//!
//! A session binds a mesh, spectra, measurements, `α`, `β` and `F̂` loaded
//! from files. Fractions cross the boundary as row-major `N × T` arrays and
//! outputs are written into caller-allocated buffers. Every function returns
//! one of the `MFEIT_*` status codes; the message of the last failure on the
//! calling thread is available from [`mfeit_last_error`].
//!
//! Sessions may be used from several threads; calls on one session are not
//! serialized internally.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

use crate::cem::{read_measurements, MeasurementVector};
use crate::context::ForwardContext;
use crate::error::{Error, Result};
use crate::fraction::{read_fractions, read_spectra, FractionMatrix};
use crate::mesh::{read_mesh, triangle_areas, Mesh};
use crate::prgn::linearized_state;
use crate::sensitivity::gradient_step;

pub const MFEIT_OK: i32 = 0;
pub const MFEIT_NULL_ARGUMENT: i32 = 1;
pub const MFEIT_INVALID_INPUT: i32 = 2;
pub const MFEIT_DIMENSION_MISMATCH: i32 = 3;
pub const MFEIT_IO_ERROR: i32 = 4;
pub const MFEIT_FORMAT_ERROR: i32 = 5;
pub const MFEIT_NUMERICAL_FAILURE: i32 = 6;
pub const MFEIT_INVALID_HANDLE: i32 = 7;
pub const MFEIT_PANIC: i32 = 8;

/// Tolerance on `F ∈ Γ` for [`Session::physics_step`].
pub const STEP_GAMMA_TOLERANCE: f64 = 1e-6;

pub fn error_code(e: &Error) -> i32 {
    match e {
        Error::DimensionMismatch(_) => MFEIT_DIMENSION_MISMATCH,
        Error::Io { .. } => MFEIT_IO_ERROR,
        Error::Format { .. } => MFEIT_FORMAT_ERROR,
        e if e.is_numerical() => MFEIT_NUMERICAL_FAILURE,
        _ => MFEIT_INVALID_INPUT,
    }
}

/// Area-weighted average of the triangles around each node.
pub fn tri_to_node(mesh: &Mesh, areas: &[f64], field: &[f64]) -> Result<Vec<f64>> {
    if field.len() != mesh.num_triangles() || areas.len() != mesh.num_triangles() {
        return Err(Error::DimensionMismatch(format!(
            "triangle field of length {} on {} triangles",
            field.len(),
            mesh.num_triangles()
        )));
    }
    let mut sum = vec![0.0; mesh.num_nodes()];
    let mut weight = vec![0.0; mesh.num_nodes()];
    for ((tri, a), v) in mesh.triangles.iter().zip(areas).zip(field) {
        for &i in tri {
            sum[i] += a * v;
            weight[i] += a;
        }
    }
    Ok(sum.iter().zip(&weight).map(|(s, w)| s / w).collect())
}

/// Mean of the three vertex values.
pub fn node_to_tri(mesh: &Mesh, field: &[f64]) -> Result<Vec<f64>> {
    if field.len() != mesh.num_nodes() {
        return Err(Error::DimensionMismatch(format!(
            "node field of length {} on {} nodes",
            field.len(),
            mesh.num_nodes()
        )));
    }
    Ok(mesh
        .triangles
        .iter()
        .map(|t| (field[t[0]] + field[t[1]] + field[t[2]]) / 3.0)
        .collect())
}

pub struct Session {
    pub context: ForwardContext,
    pub data: MeasurementVector,
    pub reference: FractionMatrix,
    pub alpha: f64,
    pub beta: f64,
    areas: Vec<f64>,
}

impl Session {
    pub fn new(
        context: ForwardContext,
        data: MeasurementVector,
        reference: FractionMatrix,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        context.check_data(&data)?;
        context.check_fractions(&reference)?;
        if !(alpha > 0.0) || !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidInput(format!(
                "α = {alpha} must be positive and β = {beta} in [0, 1]"
            )));
        }
        let areas = triangle_areas(&context.mesh)?;
        Ok(Self {
            context,
            data,
            reference,
            alpha,
            beta,
            areas,
        })
    }

    pub fn open(
        mesh: &Path,
        spectra: &Path,
        measurements: &Path,
        alpha: f64,
        beta: f64,
        reference: &Path,
    ) -> Result<Self> {
        let (mesh, electrodes) = read_mesh(mesh)?;
        let spectra = read_spectra(spectra)?;
        let record = read_measurements(measurements)?;
        let context = ForwardContext::new(mesh, electrodes, record.patterns()?, spectra)?;
        Self::new(
            context,
            record.measurement_vector()?,
            read_fractions(reference)?,
            alpha,
            beta,
        )
    }

    pub fn num_triangles(&self) -> usize {
        self.context.num_triangles()
    }

    pub fn num_nodes(&self) -> usize {
        self.context.mesh.num_nodes()
    }

    pub fn num_tissues(&self) -> usize {
        self.context.num_tissues()
    }

    /// `z = F - βH⁻¹∇f_α(F)` with `J_Φ` and `H` recomputed at `F`; both in
    /// row-major `N × T` layout.
    pub fn physics_step(&self, f_row_major: &[f64]) -> Result<Vec<f64>> {
        let (n, t) = (self.num_triangles(), self.num_tissues());
        if f_row_major.len() != n * t {
            return Err(Error::DimensionMismatch(format!(
                "{} values for N·T = {}",
                f_row_major.len(),
                n * t
            )));
        }
        let f = FractionMatrix::new_in_gamma(
            DMatrix::from_row_slice(n, t, f_row_major),
            STEP_GAMMA_TOLERANCE,
        )?;
        let (state, _) = linearized_state(
            &self.context,
            &self.data,
            &f,
            &self.reference,
            self.alpha,
            self.beta,
        )?;
        let z = gradient_step(&state);
        let z = DMatrix::from_column_slice(n, t, z.as_slice());
        Ok(z.transpose().as_slice().to_vec())
    }

    pub fn tri_to_node(&self, field: &[f64]) -> Result<Vec<f64>> {
        tri_to_node(&self.context.mesh, &self.areas, field)
    }

    pub fn node_to_tri(&self, field: &[f64]) -> Result<Vec<f64>> {
        node_to_tri(&self.context.mesh, field)
    }
}

fn registry() -> &'static Mutex<HashMap<u64, Arc<Session>>> {
    static SESSIONS: OnceLock<Mutex<HashMap<u64, Arc<Session>>>> = OnceLock::new();
    SESSIONS.get_or_init(Default::default)
}

static NEXT_HANDLE: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(code: i32, message: String) -> i32 {
    LAST_ERROR.with(|e| *e.borrow_mut() = message);
    code
}

fn lookup(handle: u64) -> std::result::Result<Arc<Session>, i32> {
    registry()
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .get(&handle)
        .cloned()
        .ok_or_else(|| {
            set_error(
                MFEIT_INVALID_HANDLE,
                format!("no open session with handle {handle}"),
            )
        })
}

/// Runs `body`, mapping errors and panics to status codes.
fn guarded(body: impl FnOnce() -> std::result::Result<(), i32>) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => MFEIT_OK,
        Ok(Err(code)) => code,
        Err(_) => set_error(MFEIT_PANIC, "internal panic".into()),
    }
}

fn fail(e: Error) -> i32 {
    set_error(error_code(&e), e.to_string())
}

unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> std::result::Result<&'a Path, i32> {
    if p.is_null() {
        return Err(set_error(MFEIT_NULL_ARGUMENT, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| set_error(MFEIT_INVALID_INPUT, format!("{name} is not valid UTF-8")))
}

unsafe fn input<'a>(p: *const f64, len: usize) -> std::result::Result<&'a [f64], i32> {
    if p.is_null() {
        return Err(set_error(MFEIT_NULL_ARGUMENT, "input array is null".into()));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_output(
    values: &[f64],
    out: *mut f64,
    out_len: usize,
) -> std::result::Result<(), i32> {
    if out.is_null() {
        return Err(set_error(
            MFEIT_NULL_ARGUMENT,
            "output array is null".into(),
        ));
    }
    if out_len != values.len() {
        return Err(set_error(
            MFEIT_DIMENSION_MISMATCH,
            format!(
                "output buffer holds {out_len} values, {} required",
                values.len()
            ),
        ));
    }
    std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(values);
    Ok(())
}

/// Opens a session and stores its handle in `*handle`.
///
/// # Safety
/// Path arguments must be null or NUL-terminated strings; `handle` must be
/// null or valid for a write.
#[no_mangle]
pub unsafe extern "C" fn mfeit_open_session(
    mesh: *const c_char,
    spectra: *const c_char,
    measurements: *const c_char,
    alpha: f64,
    beta: f64,
    reference: *const c_char,
    handle: *mut u64,
) -> i32 {
    guarded(|| {
        if handle.is_null() {
            return Err(set_error(MFEIT_NULL_ARGUMENT, "handle is null".into()));
        }
        let session = Session::open(
            path_arg(mesh, "mesh path")?,
            path_arg(spectra, "spectra path")?,
            path_arg(measurements, "measurement path")?,
            alpha,
            beta,
            path_arg(reference, "reference path")?,
        )
        .map_err(fail)?;
        let id = NEXT_HANDLE.fetch_add(1, Ordering::Relaxed);
        registry()
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id, Arc::new(session));
        *handle = id;
        Ok(())
    })
}

/// # Safety
/// Each pointer must be null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn mfeit_session_dims(
    handle: u64,
    num_triangles: *mut usize,
    num_nodes: *mut usize,
    num_tissues: *mut usize,
) -> i32 {
    guarded(|| {
        let s = lookup(handle)?;
        if num_triangles.is_null() || num_nodes.is_null() || num_tissues.is_null() {
            return Err(set_error(
                MFEIT_NULL_ARGUMENT,
                "dimension output is null".into(),
            ));
        }
        *num_triangles = s.num_triangles();
        *num_nodes = s.num_nodes();
        *num_tissues = s.num_tissues();
        Ok(())
    })
}

/// # Safety
/// `f` must point to `len` readable values and `out` to `out_len` writable ones.
#[no_mangle]
pub unsafe extern "C" fn mfeit_physics_step(
    handle: u64,
    f: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> i32 {
    guarded(|| {
        let s = lookup(handle)?;
        let z = s.physics_step(input(f, len)?).map_err(fail)?;
        write_output(&z, out, out_len)
    })
}

/// # Safety
/// As for [`mfeit_physics_step`].
#[no_mangle]
pub unsafe extern "C" fn mfeit_tri_to_node(
    handle: u64,
    field: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> i32 {
    guarded(|| {
        let s = lookup(handle)?;
        let v = s.tri_to_node(input(field, len)?).map_err(fail)?;
        write_output(&v, out, out_len)
    })
}

/// # Safety
/// As for [`mfeit_physics_step`].
#[no_mangle]
pub unsafe extern "C" fn mfeit_node_to_tri(
    handle: u64,
    field: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> i32 {
    guarded(|| {
        let s = lookup(handle)?;
        let v = s.node_to_tri(input(field, len)?).map_err(fail)?;
        write_output(&v, out, out_len)
    })
}

#[no_mangle]
pub extern "C" fn mfeit_release_session(handle: u64) -> i32 {
    guarded(|| {
        registry()
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(&handle)
            .map(drop)
            .ok_or_else(|| {
                set_error(
                    MFEIT_INVALID_HANDLE,
                    format!("no open session with handle {handle}"),
                )
            })
    })
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn mfeit_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
