//! C ABI over `nvsim`.
//!
//! Every object crosses the boundary as an opaque pointer created by a `*_new`/`*_run`
//! function and released by the matching `*_free`. Functions return an
//! [`NvsimStatus`]; on failure the message is available from
//! [`nvsim_last_error_message`] on the same thread. Frequencies are in Hz.
//!
//! Strings returned through caller buffers follow one rule: the function writes at
//! most `capacity` bytes including the terminating NUL and always reports the
//! full length (without NUL) through `needed`, so callers can size a second call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nvsim::cli::{self, Experiment, ExperimentConfig};
use nvsim::constants::Constants;
use nvsim::experiments::NvSetup;
use nvsim::{hz, to_hz, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NvsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Numerical = 5,
    Invariant = 6,
    Io = 7,
    BufferTooSmall = 8,
    OutOfRange = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NvsimExperiment {
    Ple = 0,
    Pump = 1,
    RabiMw = 2,
    RabiTwoPhoton = 3,
    Darkmap = 4,
    Simulate = 5,
}

impl From<NvsimExperiment> for Experiment {
    fn from(e: NvsimExperiment) -> Self {
        match e {
            NvsimExperiment::Ple => Experiment::Ple,
            NvsimExperiment::Pump => Experiment::Pump,
            NvsimExperiment::RabiMw => Experiment::RabiMw,
            NvsimExperiment::RabiTwoPhoton => Experiment::RabiTwoPhoton,
            NvsimExperiment::Darkmap => Experiment::Darkmap,
            NvsimExperiment::Simulate => Experiment::Simulate,
        }
    }
}

/// Physical-constants table.
pub struct NvsimConstants(Constants);

/// Level structure at a given Zeeman splitting with calibrated strain.
pub struct NvsimModel(NvSetup);

/// Tabular output of an experiment run.
pub struct NvsimResult {
    columns: Vec<String>,
    values: Vec<Vec<f64>>,
    csv: String,
    fits: String,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> NvsimStatus {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Compile(_) | Error::Dimension(_) => NvsimStatus::Config,
        Error::Parse { .. } => NvsimStatus::Parse,
        Error::Stiffness { .. } | Error::Numerical { .. } => NvsimStatus::Numerical,
        Error::Invariant(_) => NvsimStatus::Invariant,
        Error::Io(_) => NvsimStatus::Io,
    }
}

/// Runs `f`, converting errors and panics into a status plus the thread's last message.
fn guard(f: impl FnOnce() -> Result<(), (NvsimStatus, String)>) -> NvsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            NvsimStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NvsimStatus::Internal
        }
    }
}

fn lib<T>(r: nvsim::Result<T>) -> Result<T, (NvsimStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (NvsimStatus, String) {
    (NvsimStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (NvsimStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (NvsimStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn write_str(s: &str, buf: *mut c_char, capacity: usize, needed: *mut usize) -> Result<(), (NvsimStatus, String)> {
    if !needed.is_null() {
        *needed = s.len();
    }
    // A zero-capacity call is a pure length query.
    if capacity == 0 {
        return if needed.is_null() { Err(null("needed")) } else { Ok(()) };
    }
    if buf.is_null() {
        return Err(null("output buffer"));
    }
    let n = s.len().min(capacity - 1);
    ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, n);
    *buf.add(n) = 0;
    if n < s.len() {
        return Err((NvsimStatus::BufferTooSmall, format!("need {} bytes, got {capacity}", s.len() + 1)));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nvsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message. Empty after a successful call.
///
/// # Safety
/// `buf` must point to `capacity` writable bytes (or be null with `capacity` 0);
/// `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn nvsim_last_error_message(buf: *mut c_char, capacity: usize, needed: *mut usize) -> NvsimStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match write_str(&msg, buf, capacity, needed) {
        Ok(()) => NvsimStatus::Ok,
        Err((s, _)) => s,
    }
}

/// Built-in constants table.
///
/// # Safety
/// `out` must be a valid pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn nvsim_constants_default(out: *mut *mut NvsimConstants) -> NvsimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(NvsimConstants(Constants::default())));
        Ok(())
    })
}

/// Constants table from its JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nvsim_constants_from_json(json: *const c_char, out: *mut *mut NvsimConstants) -> NvsimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = read_str(json, "json")?;
        let c = lib(Constants::from_json_str(text))?;
        *out = Box::into_raw(Box::new(NvsimConstants(c)));
        Ok(())
    })
}

/// # Safety
/// `c` must come from a constants constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nvsim_constants_free(c: *mut NvsimConstants) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Zero-field splitting of the table, Hz.
///
/// # Safety
/// `c` must be a live constants handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nvsim_constants_zero_field_splitting_hz(c: *const NvsimConstants, out: *mut f64) -> NvsimStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("constants"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = to_hz(c.0.zero_field_splitting);
        Ok(())
    })
}

/// Level model with strain calibrated to the table and the given |±1⟩ splitting.
///
/// # Safety
/// `c` must be a live constants handle or null for the built-in table; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nvsim_model_new(
    c: *const NvsimConstants,
    zeeman_hz: f64,
    out: *mut *mut NvsimModel,
) -> NvsimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(zeeman_hz.is_finite() && zeeman_hz >= 0.0) {
            return Err((NvsimStatus::InvalidArgument, format!("Zeeman splitting must be finite and >= 0, got {zeeman_hz}")));
        }
        let constants = c.as_ref().map(|c| c.0.clone()).unwrap_or_default();
        let setup = lib(NvSetup::calibrated(&constants, hz(zeeman_hz)))?;
        *out = Box::into_raw(Box::new(NvsimModel(setup)));
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`nvsim_model_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nvsim_model_free(m: *mut NvsimModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of dipole-allowed optical transitions.
///
/// # Safety
/// `m` must be a live model handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nvsim_model_transition_count(m: *const NvsimModel, out: *mut usize) -> NvsimStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.0.model.table.entries.len();
        Ok(())
    })
}

/// One transition: basis indices of its ground and excited states (0, +1, −1, A1,
/// A2, Ex, Ey, E1, E2 in that order), frequency in Hz and dipole strength.
///
/// # Safety
/// `m` must be a live model handle; every output pointer must be valid.
#[no_mangle]
pub unsafe extern "C" fn nvsim_model_transition(
    m: *const NvsimModel,
    index: usize,
    ground: *mut u32,
    excited: *mut u32,
    frequency_hz: *mut f64,
    strength: *mut f64,
) -> NvsimStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        if ground.is_null() || excited.is_null() || frequency_hz.is_null() || strength.is_null() {
            return Err(null("output pointer"));
        }
        let entries = &m.0.model.table.entries;
        let t = entries
            .get(index)
            .ok_or_else(|| (NvsimStatus::OutOfRange, format!("transition {index} of {}", entries.len())))?;
        *ground = t.ground.index() as u32;
        *excited = t.excited.index() as u32;
        *frequency_hz = to_hz(t.frequency);
        *strength = t.dipole.strength();
        Ok(())
    })
}

fn parse_table(csv: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), (NvsimStatus, String)> {
    let mut lines = csv.lines();
    let columns: Vec<String> = lines.next().unwrap_or_default().split(',').map(str::to_string).collect();
    let mut values = vec![Vec::new(); columns.len()];
    for line in lines {
        for (k, v) in line.split(',').enumerate() {
            let x = v.parse::<f64>().map_err(|e| (NvsimStatus::Internal, format!("bad result cell `{v}`: {e}")))?;
            values[k].push(x);
        }
    }
    Ok((columns, values))
}

/// Runs an experiment from its JSON config (same format as the command-line tool).
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `c` a live constants handle or
/// null for the built-in table; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nvsim_run(
    kind: NvsimExperiment,
    config_json: *const c_char,
    c: *const NvsimConstants,
    out: *mut *mut NvsimResult,
) -> NvsimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = read_str(config_json, "config_json")?;
        let constants = c.as_ref().map(|c| c.0.clone()).unwrap_or_default();
        let cfg = lib(ExperimentConfig::from_str(kind.into(), text, "config"))?;
        let normalized = lib(cfg.normalize(&constants))?;
        let output = lib(cli::execute(&normalized))?;
        let file = |name: &str| output.files.iter().find(|(n, _)| *n == name).map(|(_, s)| s.clone());
        let csv = file("result.csv").or_else(|| file("trajectory.csv")).unwrap_or_default();
        let fits = file("fits.json").unwrap_or_else(|| "{}".into());
        let (columns, values) = parse_table(&csv)?;
        *out = Box::into_raw(Box::new(NvsimResult { columns, values, csv, fits }));
        Ok(())
    })
}

/// # Safety
/// `r` must come from [`nvsim_run`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nvsim_result_free(r: *mut NvsimResult) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Table shape.
///
/// # Safety
/// `r` must be a live result handle; `rows` and `columns` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nvsim_result_shape(r: *const NvsimResult, rows: *mut usize, columns: *mut usize) -> NvsimStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("result"))?;
        if rows.is_null() || columns.is_null() {
            return Err(null("output pointer"));
        }
        *rows = r.values.first().map_or(0, Vec::len);
        *columns = r.columns.len();
        Ok(())
    })
}

/// Name of column `column`.
///
/// # Safety
/// `r` must be a live result handle; see the module docs for the buffer contract.
#[no_mangle]
pub unsafe extern "C" fn nvsim_result_column_name(
    r: *const NvsimResult,
    column: usize,
    buf: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> NvsimStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("result"))?;
        let name = r
            .columns
            .get(column)
            .ok_or_else(|| (NvsimStatus::OutOfRange, format!("column {column} of {}", r.columns.len())))?;
        write_str(name, buf, capacity, needed)
    })
}

/// Copies column `column` into `dst`, which must hold `rows` values.
///
/// # Safety
/// `r` must be a live result handle and `dst` point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn nvsim_result_column(
    r: *const NvsimResult,
    column: usize,
    dst: *mut f64,
    len: usize,
) -> NvsimStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("result"))?;
        let v = r
            .values
            .get(column)
            .ok_or_else(|| (NvsimStatus::OutOfRange, format!("column {column} of {}", r.values.len())))?;
        if dst.is_null() {
            return Err(null("dst"));
        }
        if len < v.len() {
            return Err((NvsimStatus::BufferTooSmall, format!("need {} values, got {len}", v.len())));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), dst, v.len());
        Ok(())
    })
}

/// The result table as CSV text.
///
/// # Safety
/// `r` must be a live result handle; see the module docs for the buffer contract.
#[no_mangle]
pub unsafe extern "C" fn nvsim_result_csv(
    r: *const NvsimResult,
    buf: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> NvsimStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("result"))?;
        write_str(&r.csv, buf, capacity, needed)
    })
}

/// Fit summaries as JSON text.
///
/// # Safety
/// `r` must be a live result handle; see the module docs for the buffer contract.
#[no_mangle]
pub unsafe extern "C" fn nvsim_result_fits_json(
    r: *const NvsimResult,
    buf: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> NvsimStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("result"))?;
        write_str(&r.fits, buf, capacity, needed)
    })
}
