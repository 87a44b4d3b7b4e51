//! C ABI over the eqquant library.
//!
//! Graphs and calibration records cross the boundary as opaque handles that
//! the caller releases with the matching `_free` function. Every fallible
//! call returns an [`EqqStatus`]; on failure `eqq_last_error` holds a message
//! for the calling thread. Strings returned by the library are released with
//! `eqq_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use eqquant::equalize::{one_step_equalize, two_step_equalize, TwoStepMode};
use eqquant::fixture::{make_fixture, FixtureSpec};
use eqquant::model_io::{load_model, save_model, Dtype, ModelPaths};
use eqquant::quant::{calibrate, quantize_graph};
use eqquant::{BitWidths, CalibrationRecord, Error, Graph, QuantMode, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    InvalidGraph = 6,
    ShapeMismatch = 7,
    Runtime = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqqEqualization {
    OneStep = 0,
    TwoStep = 1,
    TwoStepMobilenet = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqqQuantMode {
    WeightsOnly = 0,
    ActivationsOnly = 1,
    Full = 2,
}

/// Opaque network handle.
pub struct EqqGraph(Graph);

/// Opaque calibration handle.
pub struct EqqCalibration(CalibrationRecord);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> EqqStatus {
    match err {
        Error::Config(_) => EqqStatus::Config,
        Error::Io { .. } => EqqStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Checksum { .. } | Error::MissingTensor(_) => EqqStatus::Format,
        Error::InvalidGraph(_) | Error::Cyclic(_) | Error::UnknownNode(_) | Error::UnsupportedTopology { .. } => {
            EqqStatus::InvalidGraph
        }
        Error::ShapeMismatch { .. } => EqqStatus::ShapeMismatch,
        _ => EqqStatus::Runtime,
    }
}

enum Failure {
    Status(EqqStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(EqqStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EqqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EqqStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(&msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            EqqStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(EqqStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message for the last failed call on this thread, or "" after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn eqq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn eqq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn eqq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a model. `weights` may be null to use the manifest path with `.bin`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eqq_graph_load(
    manifest: *const c_char,
    weights: *const c_char,
    fold_batchnorm: bool,
    out: *mut *mut EqqGraph,
) -> EqqStatus {
    guard(|| {
        let manifest = Path::new(str_arg(manifest, "manifest")?);
        let weights = if weights.is_null() {
            manifest.with_extension("bin")
        } else {
            Path::new(str_arg(weights, "weights")?).to_path_buf()
        };
        let g = load_model(manifest, &weights, fold_batchnorm)?;
        put(out, EqqGraph(g))
    })
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`.
///
/// # Safety
/// `graph` must be a live handle; string arguments must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn eqq_graph_save(
    graph: *const EqqGraph,
    dir: *const c_char,
    stem: *const c_char,
    single_precision: bool,
) -> EqqStatus {
    guard(|| {
        let g = handle(graph, "graph")?;
        let paths = ModelPaths::new(str_arg(dir, "dir")?, str_arg(stem, "stem")?);
        let dtype = if single_precision { Dtype::F32 } else { Dtype::F64 };
        save_model(&g.0, &paths, dtype, "eqquant-ffi", None)?;
        Ok(())
    })
}

/// Builds a synthetic fixture from a JSON spec (null for defaults), e.g.
/// `{"layers": 4, "imbalance": 100, "topology": "depthwise-chain"}`.
///
/// # Safety
/// `spec_json` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eqq_fixture(spec_json: *const c_char, out: *mut *mut EqqGraph) -> EqqStatus {
    guard(|| {
        let spec: FixtureSpec = if spec_json.is_null() {
            FixtureSpec::default()
        } else {
            serde_json::from_str(str_arg(spec_json, "spec_json")?)
                .map_err(|e| Failure::Status(EqqStatus::Config, format!("fixture spec: {e}")))?
        };
        put(out, EqqGraph(make_fixture(&spec)?))
    })
}

/// Releases a graph handle. Null is ignored.
///
/// # Safety
/// `graph` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn eqq_graph_free(graph: *mut EqqGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Input shape as `(height, width, channels)`.
///
/// # Safety
/// `graph` must be a live handle; `shape` must point to three `size_t`.
#[no_mangle]
pub unsafe extern "C" fn eqq_graph_input_shape(graph: *const EqqGraph, shape: *mut usize) -> EqqStatus {
    guard(|| {
        let g = handle(graph, "graph")?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        ptr::copy_nonoverlapping(g.0.input_shape().as_ptr(), shape, 3);
        Ok(())
    })
}

/// Number of values the first output holds for one sample.
///
/// # Safety
/// `graph` must be a live handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eqq_graph_output_len(graph: *const EqqGraph, len: *mut usize) -> EqqStatus {
    guard(|| {
        let g = handle(graph, "graph")?;
        if len.is_null() {
            return Err(null("len"));
        }
        let [h, w, c] = g.0.output_shape(&g.0.outputs()[0])?;
        *len = h * w * c;
        Ok(())
    })
}

fn sample_len(g: &Graph) -> usize {
    g.input_shape().iter().product()
}

unsafe fn read_samples(g: &Graph, data: *const f64, count: usize) -> Result<Vec<Tensor>, Failure> {
    if data.is_null() {
        return Err(null("samples"));
    }
    let [h, w, c] = g.input_shape();
    let n = h * w * c;
    let all = std::slice::from_raw_parts(data, n * count);
    all.chunks_exact(n)
        .map(|chunk| Tensor::new(vec![1, h, w, c], chunk.to_vec()).map_err(Failure::from))
        .collect()
}

/// Runs one sample (`h * w * c` values, channel-last) and writes the first
/// output into `output`, which must hold `output_len` values.
///
/// # Safety
/// `input` must hold `input_len` values and `output` `output_len` values.
#[no_mangle]
pub unsafe extern "C" fn eqq_graph_run(
    graph: *const EqqGraph,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> EqqStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.0;
        if input_len != sample_len(g) {
            return Err(Failure::Status(
                EqqStatus::ShapeMismatch,
                format!("input holds {input_len} values, the graph takes {}", sample_len(g)),
            ));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        let x = read_samples(g, input, 1)?.remove(0);
        let y = g.run(&x)?;
        if y.len() != output_len {
            return Err(Failure::Status(
                EqqStatus::ShapeMismatch,
                format!("output buffer holds {output_len} values, the graph produces {}", y.len()),
            ));
        }
        ptr::copy_nonoverlapping(y.data().as_ptr(), output, output_len);
        Ok(())
    })
}

/// Calibrates on `count` consecutive samples of `h * w * c` values each.
///
/// # Safety
/// `samples` must hold `count * h * w * c` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eqq_calibrate(
    graph: *const EqqGraph,
    samples: *const f64,
    count: usize,
    bits_weights: u32,
    bits_activations: u32,
    bits_biases: u32,
    out: *mut *mut EqqCalibration,
) -> EqqStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.0;
        let xs = read_samples(g, samples, count)?;
        let bits = BitWidths {
            weights: bits_weights,
            activations: bits_activations,
            biases: bits_biases,
        };
        put(out, EqqCalibration(calibrate(g, xs, count, bits)?))
    })
}

/// Calibration record as JSON; release with `eqq_string_free`.
///
/// # Safety
/// `calib` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eqq_calibration_to_json(calib: *const EqqCalibration, out: *mut *mut c_char) -> EqqStatus {
    guard(|| {
        let c = handle(calib, "calibration")?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = to_c_string(c.0.to_json()?);
        Ok(())
    })
}

/// Releases a calibration handle. Null is ignored.
///
/// # Safety
/// `calib` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn eqq_calibration_free(calib: *mut EqqCalibration) {
    if !calib.is_null() {
        drop(Box::from_raw(calib));
    }
}

/// Equalizes `graph` into a new graph plus the matching calibration. The
/// scale vectors are returned as JSON in `scales_json` when it is non-null.
///
/// # Safety
/// Handles must be live; `out_graph` and `out_calib` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eqq_equalize(
    graph: *const EqqGraph,
    calib: *const EqqCalibration,
    mode: EqqEqualization,
    s_max: f64,
    attenuation_floor: f64,
    out_graph: *mut *mut EqqGraph,
    out_calib: *mut *mut EqqCalibration,
    scales_json: *mut *mut c_char,
) -> EqqStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.0;
        let c = &handle(calib, "calibration")?.0;
        if out_graph.is_null() || out_calib.is_null() {
            return Err(null("output pointer"));
        }
        let eq = match mode {
            EqqEqualization::OneStep => one_step_equalize(g, c, s_max)?,
            EqqEqualization::TwoStep => two_step_equalize(g, c, s_max, TwoStepMode::Standard)?,
            EqqEqualization::TwoStepMobilenet => {
                two_step_equalize(g, c, s_max, TwoStepMode::Mobilenet { attenuation_floor })?
            }
        };
        if !scales_json.is_null() {
            *scales_json = to_c_string(eq.audit_json()?);
        }
        put(out_graph, EqqGraph(eq.graph))?;
        put(out_calib, EqqCalibration(eq.calibration))
    })
}

/// Fake-quantized copy of `graph` under the calibration's bit widths.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eqq_quantize(
    graph: *const EqqGraph,
    calib: *const EqqCalibration,
    mode: EqqQuantMode,
    out: *mut *mut EqqGraph,
) -> EqqStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.0;
        let c = &handle(calib, "calibration")?.0;
        let mode = match mode {
            EqqQuantMode::WeightsOnly => QuantMode::WeightsOnly,
            EqqQuantMode::ActivationsOnly => QuantMode::ActivationsOnly,
            EqqQuantMode::Full => QuantMode::Full,
        };
        put(out, EqqGraph(quantize_graph(g, c, mode)?))
    })
}
