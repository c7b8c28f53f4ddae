//! C interface to the dacen library.
//!
//! Every function returns a [`DacenStatus`]. On failure a human-readable
//! message is kept per thread and can be read with
//! [`dacen_last_error_message`]. Handles are opaque and must be released with
//! their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dacen::chansim::{make_dataset, DatasetBundle, DatasetRequest, Split, SystemConfig};
use dacen::complexity::{count_params, Convention};
use dacen::dacen::Dacen;
use dacen::domainxform::nmse_db;
use dacen::harness::experiment::{read_train, source_data, train_scratch};
use dacen::harness::store::read_model_spec;
use dacen::harness::sweep::{test_pilots, Density, DensityPlan, Estimator, Lmmse, Ls, Network};
use dacen::harness::{load_dataset, load_model, save_dataset, save_model, ConfigText};
use dacen::training::TrainConfig;
use dacen::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DacenStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Io = 5,
    Format = 6,
    Data = 7,
    Numeric = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Parsed `key = value` configuration text.
pub struct DacenConfig(ConfigText);

/// Simulated dataset with its system description.
pub struct DacenDataset(DatasetBundle);

/// Single-precision network.
pub struct DacenModel(Dacen<f32>);

/// Which parameters [`dacen_model_param_count`] counts.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DacenConvention {
    /// Linear weights and biases only.
    Layer = 0,
    /// Every learnable tensor.
    Full = 1,
}

struct Failure(DacenStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let mut root = &e;
        while let Error::Stage { source, .. } = root {
            root = source;
        }
        let status = match root {
            Error::Shape { .. } => DacenStatus::Shape,
            Error::Config(_) => DacenStatus::Config,
            Error::Index { .. } => DacenStatus::InvalidArgument,
            Error::Io { .. } => DacenStatus::Io,
            Error::Format { .. } | Error::Incompatible(_) => DacenStatus::Format,
            Error::Data { .. } => DacenStatus::Data,
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => DacenStatus::Numeric,
            Error::Stage { .. } => unreachable!(),
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> DacenStatus {
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(DacenStatus::Panic, format!("panic: {msg}")))
    });
    match res {
        Ok(()) => {
            set_last_error("");
            DacenStatus::Ok
        }
        Err(Failure(status, msg)) => {
            set_last_error(&msg);
            status
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DacenStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure(DacenStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| Failure(DacenStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| Failure(DacenStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn give<T>(out: *mut *mut T, v: T) -> FfiResult<()> {
    *out_ptr(out, "out")? = Box::into_raw(Box::new(v));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dacen_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into the library on the
/// same thread.
#[no_mangle]
pub extern "C" fn dacen_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses configuration text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dacen_config_parse(text: *const c_char, out: *mut *mut DacenConfig) -> DacenStatus {
    guard(|| {
        let c = ConfigText::parse(str_arg(text, "text")?)?;
        give(out, DacenConfig(c))
    })
}

/// Reads a configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dacen_config_load(path: *const c_char, out: *mut *mut DacenConfig) -> DacenStatus {
    guard(|| {
        let c = ConfigText::load(str_arg(path, "path")?)?;
        give(out, DacenConfig(c))
    })
}

/// # Safety
/// `config` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dacen_config_free(config: *mut DacenConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Simulates a dataset with all resource blocks carrying pilots.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dacen_dataset_generate(
    preset: *const c_char,
    n_ue: usize,
    snapshots_per_ue: usize,
    val_ue: usize,
    test_ue: usize,
    snr_db: f64,
    seed: u64,
    out: *mut *mut DacenDataset,
) -> DacenStatus {
    guard(|| {
        let cfg = SystemConfig::preset(str_arg(preset, "preset")?)?;
        let req = DatasetRequest { n_ue, snapshots_per_ue, val_ue, test_ue, snr_db, seed };
        let plan = DensityPlan::for_system(&cfg)?;
        let ds = make_dataset(&cfg, &req, &plan.high)?;
        give(out, DacenDataset(ds))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dacen_dataset_load(path: *const c_char, out: *mut *mut DacenDataset) -> DacenStatus {
    guard(|| {
        let ds = load_dataset(str_arg(path, "path")?)?;
        give(out, DacenDataset(ds))
    })
}

/// Writes the dataset into directory `path`.
///
/// # Safety
/// `dataset` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dacen_dataset_save(dataset: *const DacenDataset, path: *const c_char) -> DacenStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        save_dataset(PathBuf::from(str_arg(path, "path")?), &ds.0)?;
        Ok(())
    })
}

/// Number of samples across all splits.
///
/// # Safety
/// `dataset` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dacen_dataset_len(dataset: *const DacenDataset, out: *mut usize) -> DacenStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(dataset, "dataset")?.0.len();
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dacen_dataset_free(dataset: *mut DacenDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

fn density_of(ds: &DatasetBundle, label: Option<&str>) -> FfiResult<Density> {
    let plan = DensityPlan::for_system(&ds.cfg)?;
    match label {
        None => Ok(Density { pattern: ds.pattern.clone(), sampler: None }),
        Some(s) => {
            let d = plan.parse(s)?;
            if d.pattern != ds.pattern && ds.pattern != plan.high {
                return Err(invalid(format!("density {s} cannot be carved from this dataset")));
            }
            Ok(d)
        }
    }
}

unsafe fn opt_str<'a>(p: *const c_char, name: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

/// Trains a network from scratch on the train and validation splits.
///
/// `config` may be null for defaults; otherwise its `[model]` and `[train]`
/// sections apply. `density` is a label such as `"2/8"`, or null for the
/// density the dataset was stored at.
///
/// # Safety
/// Handles must be live, strings NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dacen_model_train(
    config: *const DacenConfig,
    dataset: *const DacenDataset,
    density: *const c_char,
    out: *mut *mut DacenModel,
) -> DacenStatus {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.0;
        let empty = ConfigText::default();
        let c = if config.is_null() { &empty } else { &handle(config, "config")?.0 };
        let d = density_of(ds, opt_str(density, "density")?)?;
        let (spec, ab) = read_model_spec(c, "model", d.n_pilots())?;
        let cfg = read_train(c, "train", TrainConfig::desk())?;
        let data = source_data(ds)?;
        let (model, _) = train_scratch::<f32>(&data, &d, &spec, ab, &cfg)?;
        give(out, DacenModel(model))
    })
}

/// Loads a checkpoint written by [`dacen_model_save`] or the command line tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dacen_model_load(path: *const c_char, out: *mut *mut DacenModel) -> DacenStatus {
    guard(|| {
        let m = load_model::<f32>(str_arg(path, "path")?)?;
        give(out, DacenModel(m))
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dacen_model_save(model: *const DacenModel, path: *const c_char) -> DacenStatus {
    guard(|| {
        save_model(str_arg(path, "path")?, &handle(model, "model")?.0)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dacen_model_param_count(model: *const DacenModel, convention: DacenConvention, out: *mut u64) -> DacenStatus {
    guard(|| {
        let conv = match convention {
            DacenConvention::Layer => Convention::Paper,
            DacenConvention::Full => Convention::Full,
        };
        *out_ptr(out, "out")? = count_params(&handle(model, "model")?.0, conv);
        Ok(())
    })
}

/// Floats per sample at the input and output, in the layout
/// `[antenna pair][im..., re...]`, antenna pairs ordered receive-major.
///
/// # Safety
/// `model` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn dacen_model_io_len(model: *const DacenModel, input: *mut usize, output: *mut usize) -> DacenStatus {
    guard(|| {
        let spec = handle(model, "model")?.0.spec();
        let s = spec.antenna_pairs();
        if let Some(i) = input.as_mut() {
            *i = s * 2 * spec.n_l;
        }
        if let Some(o) = output.as_mut() {
            *o = s * 2 * spec.n_p;
        }
        Ok(())
    })
}

/// Runs the network on `batch` samples.
///
/// # Safety
/// `inputs` must hold `batch * input_len` floats and `out` must have room
/// for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn dacen_model_predict(
    model: *const DacenModel,
    inputs: *const f32,
    batch: usize,
    out: *mut f32,
    out_len: usize,
) -> DacenStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let spec = m.spec();
        let s = spec.antenna_pairs();
        let (per_in, per_out) = (s * 2 * spec.n_l, s * 2 * spec.n_p);
        if batch == 0 {
            return Ok(());
        }
        if inputs.is_null() || out.is_null() {
            return Err(Failure(DacenStatus::NullPointer, "`inputs` or `out` is null".into()));
        }
        if out_len < batch * per_out {
            return Err(Failure(
                DacenStatus::BufferTooSmall,
                format!("output needs {} floats, got room for {out_len}", batch * per_out),
            ));
        }
        let x = std::slice::from_raw_parts(inputs, batch * per_in);
        let y = m.predict(x, 64)?;
        std::slice::from_raw_parts_mut(out, y.len()).copy_from_slice(&y);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dacen_model_free(model: *mut DacenModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// NMSE in dB on the test split at one SNR and pilot density.
///
/// `method` is `"ls"`, `"lmmse"` or `"model"`; `model` is only read for the
/// latter and must match the density.
///
/// # Safety
/// Handles must be live (or `model` null when unused), strings
/// NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dacen_eval_nmse(
    dataset: *const DacenDataset,
    model: *const DacenModel,
    method: *const c_char,
    density: *const c_char,
    snr_db: f64,
    seed: u64,
    out: *mut f64,
) -> DacenStatus {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.0;
        let d = density_of(ds, opt_str(density, "density")?)?;
        let est: Box<dyn Estimator> = match str_arg(method, "method")? {
            "ls" => Box::new(Ls { cfg: ds.cfg.clone() }),
            "lmmse" => Box::new(Lmmse::fit(ds)?),
            "model" => {
                let m = handle(model, "model")?.0.clone();
                if m.spec().n_l != d.n_pilots() {
                    return Err(invalid(format!("model expects {} pilot RBs, density {} has {}", m.spec().n_l, d.label(), d.n_pilots())));
                }
                Box::new(Network::new("model").with(m))
            }
            other => return Err(invalid(format!("unknown method `{other}`"))),
        };
        let pilots = test_pilots(ds, &d, snr_db, seed)?;
        let labels: Vec<_> = ds.indices(Split::Test).iter().map(|&i| ds.labels[i].clone()).collect();
        let est = est.estimate(&d, snr_db, &pilots)?.ok_or_else(|| invalid("estimator does not cover this density"))?;
        *out_ptr(out, "out")? = nmse_db(&labels, &est)?;
        Ok(())
    })
}
