//! C ABI for the `aft` library.
//!
//! Every fallible function returns an [`AftStatus`]. On failure the message
//! is kept per thread and can be read with [`aft_last_error_message`] until
//! the next failing call on that thread. Objects cross the boundary as
//! opaque handles that the caller releases with the matching `*_free`.
//! Panics never unwind into C; they surface as `AFT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use aft::eval::{linear_probe, run_method, Method, ProbeConfig};
use aft::featurestore::{read_features, synth_dataset, write_features, Dataset, SyntheticSpec};
use aft::numerics::Matrix;
use aft::regularizers::{aft_regularizer, Eps, Kernel, MuWeights};
use aft::trainer::TrainConfig;
use aft::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    BatchSize = 4,
    Format = 5,
    Io = 6,
    Manifest = 7,
    Config = 8,
    Input = 9,
    NonFinite = 10,
    State = 11,
    Aggregation = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AftKernel {
    Linear = 0,
    Rbf = 1,
}

/// Parameters of the planted synthetic task.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AftSynthSpec {
    pub n_examples: usize,
    pub d_signal: usize,
    pub d_distractor: usize,
    pub d_noise: usize,
    pub n_classes: usize,
    pub label_temperature: f64,
    pub seed: u64,
}

/// Training options. With `select_beta` set, β is chosen on the holdout
/// split from the method's default grid and `beta` is ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AftTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_theta: f64,
    pub lr_mu: f64,
    pub beta: f64,
    pub select_beta: bool,
}

pub struct AftMatrix(Matrix);

pub struct AftDataset(Dataset);

pub struct AftRun {
    beta: f64,
    test_error: f64,
    mu: Option<Vec<f64>>,
    outcome: aft::trainer::RunOutcome,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(AftStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension { .. } => AftStatus::Dimension,
            Error::BatchSize { .. } => AftStatus::BatchSize,
            Error::Usage(_) => AftStatus::InvalidArgument,
            Error::State(_) => AftStatus::State,
            Error::Format { .. } => AftStatus::Format,
            Error::Manifest(_) => AftStatus::Manifest,
            Error::Config(_) => AftStatus::Config,
            Error::Input(_) => AftStatus::Input,
            Error::Aggregation(_) => AftStatus::Aggregation,
            Error::NonFinite { .. } => AftStatus::NonFinite,
            Error::Io { .. } => AftStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AftStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            AftStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(AftStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure(AftStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn path(s: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    c_str(s, what).map(PathBuf::from)
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn aft_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aft_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a `rows × cols` matrix from row-major `data`, or zeros when
/// `data` is null.
///
/// # Safety
/// `data`, when non-null, must point to `rows * cols` doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn aft_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut AftMatrix,
) -> AftStatus {
    guard(|| {
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(AftStatus::InvalidArgument, "rows * cols overflows".into()))?;
        let m = if data.is_null() {
            Matrix::zeros(rows, cols)
        } else {
            Matrix::from_vec(rows, cols, std::slice::from_raw_parts(data, len).to_vec())?
        };
        put(out, boxed(AftMatrix(m)), "out")
    })
}

/// # Safety
/// `m` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aft_matrix_free(m: *mut AftMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Row count; 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aft_matrix_rows(m: *const AftMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// Column count; 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aft_matrix_cols(m: *const AftMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Copies the row-major values into `buf`, which must hold exactly `len`
/// (= rows · cols) doubles.
///
/// # Safety
/// `buf` must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn aft_matrix_copy(m: *const AftMatrix, buf: *mut f64, len: usize) -> AftStatus {
    guard(|| {
        let m = &borrow(m, "matrix")?.0;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len != m.len() {
            return Err(Failure(
                AftStatus::Dimension,
                format!("buffer holds {len} values, matrix has {}", m.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(m.data().as_ptr(), buf, len);
        Ok(())
    })
}

/// Reads a feature file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aft_features_read(path_: *const c_char, out: *mut *mut AftMatrix) -> AftStatus {
    guard(|| {
        let m = read_features(path(path_, "path")?)?;
        put(out, boxed(AftMatrix(m)), "out")
    })
}

/// Writes a feature file (values narrowed to f32).
///
/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aft_features_write(m: *const AftMatrix, path_: *const c_char) -> AftStatus {
    guard(|| {
        let m = &borrow(m, "matrix")?.0;
        write_features(m, path(path_, "path")?)?;
        Ok(())
    })
}

/// Mini-batch kernel distance between `phi` (B × d_φ) and `psi` (B × d_ψ).
/// `mu_logits` holds `d_ψ` logits `s`, weighting ψ by `σ(s)`; null means
/// the identity.
///
/// # Safety
/// `phi`, `psi` must be live handles; `mu_logits`, when non-null, must hold
/// `n_logits` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aft_kernel_distance(
    phi: *const AftMatrix,
    psi: *const AftMatrix,
    mu_logits: *const f64,
    n_logits: usize,
    kernel: AftKernel,
    out: *mut f64,
) -> AftStatus {
    guard(|| {
        let phi = &borrow(phi, "phi")?.0;
        let psi = &borrow(psi, "psi")?.0;
        let mu = if mu_logits.is_null() {
            MuWeights::identity(psi.cols())
        } else {
            MuWeights::from_logits(std::slice::from_raw_parts(mu_logits, n_logits))
        };
        let kernel = match kernel {
            AftKernel::Linear => Kernel::Linear,
            AftKernel::Rbf => Kernel::Rbf,
        };
        let v = aft_regularizer(phi, psi, &mu, kernel, Eps::default())?;
        put(out, v, "out")
    })
}

/// Generates the planted synthetic task with the standard splits.
///
/// # Safety
/// `spec` must point to a valid spec; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aft_dataset_synth(spec: *const AftSynthSpec, out: *mut *mut AftDataset) -> AftStatus {
    guard(|| {
        let s = borrow(spec, "spec")?;
        let ds = synth_dataset(&SyntheticSpec {
            n_examples: s.n_examples,
            d_signal: s.d_signal,
            d_distractor: s.d_distractor,
            d_noise: s.d_noise,
            n_classes: s.n_classes,
            label_temperature: s.label_temperature,
            seed: s.seed,
        })?;
        put(out, boxed(AftDataset(ds)), "out")
    })
}

/// Loads a dataset from its manifest.
///
/// # Safety
/// `manifest` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aft_dataset_load(manifest: *const c_char, out: *mut *mut AftDataset) -> AftStatus {
    guard(|| {
        let ds = Dataset::load(path(manifest, "manifest")?)?;
        put(out, boxed(AftDataset(ds)), "out")
    })
}

/// Writes the dataset's files and manifest into `dir` (created if needed).
///
/// # Safety
/// `ds` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aft_dataset_write(ds: *const AftDataset, dir: *const c_char) -> AftStatus {
    guard(|| {
        let ds = &borrow(ds, "dataset")?.0;
        let dir = path(dir, "dir")?;
        std::fs::create_dir_all(&dir).map_err(|e| Failure(AftStatus::Io, format!("{}: {e}", dir.display())))?;
        ds.write(&dir)?;
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aft_dataset_free(ds: *mut AftDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Row count; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aft_dataset_n_rows(ds: *const AftDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_rows())
}

/// Width of the concatenated pre-trained features; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aft_dataset_d_psi(ds: *const AftDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.psi.cols())
}

/// Copy of the pre-trained feature matrix.
///
/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aft_dataset_psi(ds: *const AftDataset, out: *mut *mut AftMatrix) -> AftStatus {
    guard(|| {
        let ds = &borrow(ds, "dataset")?.0;
        put(out, boxed(AftMatrix(ds.psi.clone())), "out")
    })
}

/// Linear-probe test accuracy on the dataset's pre-trained features (or
/// its downstream inputs when `use_inputs` is set), with default settings.
///
/// # Safety
/// `ds` must be a live handle; `out_accuracy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aft_dataset_probe(
    ds: *const AftDataset,
    use_inputs: bool,
    out_accuracy: *mut f64,
) -> AftStatus {
    guard(|| {
        let ds = &borrow(ds, "dataset")?.0;
        let x = if use_inputs { &ds.inputs } else { &ds.psi };
        let r = linear_probe(x, &ds.labels, &ds.splits, &ProbeConfig::default())?;
        put(out_accuracy, r.test_accuracy, "out_accuracy")
    })
}

/// Library defaults for [`AftTrainOptions`] (β selected on holdout).
#[no_mangle]
pub extern "C" fn aft_train_options_default() -> AftTrainOptions {
    let c = TrainConfig::default();
    AftTrainOptions {
        steps: c.steps,
        batch_size: c.batch_size,
        seed: c.seed,
        lr_theta: c.lr_theta,
        lr_mu: c.lr_mu,
        beta: 0.0,
        select_beta: true,
    }
}

/// Trains `method` (e.g. "stl", "aft", "kd", "rbf") on `ds` and evaluates
/// on its test split.
///
/// # Safety
/// `ds` must be a live handle, `method` a NUL-terminated string, `options`
/// valid, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aft_train(
    ds: *const AftDataset,
    method: *const c_char,
    options: *const AftTrainOptions,
    out: *mut *mut AftRun,
) -> AftStatus {
    guard(|| {
        let ds = &borrow(ds, "dataset")?.0;
        let method: Method = c_str(method, "method")?.parse()?;
        let o = borrow(options, "options")?;
        let config = method.configure(&TrainConfig {
            steps: o.steps,
            batch_size: o.batch_size,
            seed: o.seed,
            lr_theta: o.lr_theta,
            lr_mu: o.lr_mu,
            ..TrainConfig::default()
        });
        let fixed = [o.beta];
        let grid = if o.select_beta { None } else { Some(&fixed[..]) };
        let run = run_method(method, &config, ds, grid, None)?;
        let mu = match run.mu() {
            Some(m) if m.mode() == aft::regularizers::MuMode::Diagonal => Some(m.diagonal_weights()?),
            _ => None,
        };
        put(
            out,
            boxed(AftRun {
                beta: run.beta,
                test_error: run.test_error(),
                mu,
                outcome: run.outcome,
            }),
            "out",
        )
    })
}

/// # Safety
/// `run` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aft_run_free(run: *mut AftRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Test error (1 − accuracy) of the final model.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aft_run_test_error(run: *const AftRun, out: *mut f64) -> AftStatus {
    guard(|| put(out, borrow(run, "run")?.test_error, "out"))
}

/// The β the final model was trained with (0 for plain training).
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aft_run_beta(run: *const AftRun, out: *mut f64) -> AftStatus {
    guard(|| put(out, borrow(run, "run")?.beta, "out"))
}

/// Number of learned diagonal weights; 0 when the method has none.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aft_run_mu_len(run: *const AftRun) -> usize {
    run.as_ref().and_then(|r| r.mu.as_ref()).map_or(0, Vec::len)
}

/// Copies the learned weights `σ(sᵢ)` into `buf` (`len` must equal
/// [`aft_run_mu_len`]).
///
/// # Safety
/// `run` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn aft_run_mu_weights(run: *const AftRun, buf: *mut f64, len: usize) -> AftStatus {
    guard(|| {
        let run = borrow(run, "run")?;
        let mu = run
            .mu
            .as_ref()
            .ok_or_else(|| Failure(AftStatus::State, "run has no diagonal μ".into()))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len != mu.len() {
            return Err(Failure(
                AftStatus::Dimension,
                format!("buffer holds {len} values, μ has {}", mu.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(mu.as_ptr(), buf, len);
        Ok(())
    })
}

/// Writes `<run_id>.metrics` and `<run_id>.ckpt` into `dir`.
///
/// # Safety
/// `run` must be a live handle; `dir` and `run_id` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn aft_run_write(run: *const AftRun, dir: *const c_char, run_id: *const c_char) -> AftStatus {
    guard(|| {
        let run = borrow(run, "run")?;
        let dir = path(dir, "dir")?;
        let id = c_str(run_id, "run_id")?;
        std::fs::create_dir_all(&dir).map_err(|e| Failure(AftStatus::Io, format!("{}: {e}", dir.display())))?;
        run.outcome.record.write(dir.join(format!("{id}.metrics")))?;
        run.outcome.checkpoint().write(dir.join(format!("{id}.ckpt")))?;
        Ok(())
    })
}
