//! C ABI over the issl library: feature extraction, k-means, the PWCCA
//! score, corpus synthesis, and the full experiment runner.
//!
//! Conventions: every fallible call returns an `IsslStatus`; `ISSL_OK` is
//! zero. On failure, `issl_last_error` returns a message that stays valid
//! until the same thread's next library call. Matrices cross the boundary
//! as row-major f64 buffers. Buffers the library allocates are released
//! with `issl_buffer_free`; handles have their own `_free` functions.
//! Panics are caught at the boundary and reported as `ISSL_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use issl::cca::{cca_fit, pwcca_score};
use issl::clustering::{assign, kmeans_fit, read_centroids, write_centroids, Centroids};
use issl::features::{append_deltas, mfcc_samples, FeatureConfig};
use issl::numcore::Matrix;
use issl::pipeline::{parse_experiment_config, run_experiment, ExperimentConfig};
use issl::synthcorpus;
use issl::Error;

use rand::SeedableRng as _;

/// Result code of every fallible library call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsslStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid configuration value.
    Config = 3,
    /// An API precondition was violated.
    Contract = 4,
    /// Mismatched dimensions.
    Dimension = 5,
    /// Non-finite values or a failed numerical routine.
    Numerical = 6,
    /// Data too degenerate for the requested operation.
    Degenerate = 7,
    /// Not enough points for the requested fit.
    InsufficientPoints = 8,
    /// Training diverged.
    Divergence = 9,
    /// Malformed file or text input.
    Parse = 10,
    /// Filesystem error.
    Io = 11,
    /// A panic was caught at the boundary.
    Panic = 12,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(e: &Error) -> IsslStatus {
    match e {
        Error::Config(_) => IsslStatus::Config,
        Error::Contract(_) => IsslStatus::Contract,
        Error::Dimension(_) => IsslStatus::Dimension,
        Error::Numerical(_) => IsslStatus::Numerical,
        Error::Degenerate(_) => IsslStatus::Degenerate,
        Error::InsufficientPoints(_) => IsslStatus::InsufficientPoints,
        Error::Divergence { .. } => IsslStatus::Divergence,
        Error::Parse(_) => IsslStatus::Parse,
        Error::Io(_) => IsslStatus::Io,
    }
}

/// Run a fallible body with panic containment and error capture.
fn guarded(f: impl FnOnce() -> Result<(), (IsslStatus, String)>) -> IsslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            IsslStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&msg);
            IsslStatus::Panic
        }
    }
}

fn fail(e: Error) -> (IsslStatus, String) {
    (status_of(&e), e.to_string())
}

fn null_arg(name: &str) -> (IsslStatus, String) {
    (IsslStatus::NullArgument, format!("{name} must not be null"))
}

/// # Safety: `ptr` must be null or valid for `len` reads.
unsafe fn slice_arg<'a>(
    ptr: *const f64,
    len: usize,
    name: &str,
) -> Result<&'a [f64], (IsslStatus, String)> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, (IsslStatus, String)> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| (IsslStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

fn matrix_arg(data: &[f64], rows: usize, cols: usize) -> Result<Matrix, (IsslStatus, String)> {
    if rows == 0 || cols == 0 {
        return Err((IsslStatus::Dimension, "rows and cols must be positive".into()));
    }
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        m.row_mut(i).copy_from_slice(&data[i * cols..(i + 1) * cols]);
    }
    Ok(m)
}

/// Hand a Vec to the caller as (ptr, len); reclaimed by `issl_buffer_free`.
fn give_buffer(v: Vec<f64>, out_ptr: *mut *mut f64, out_len: *mut usize) {
    let boxed = v.into_boxed_slice();
    let len = boxed.len();
    let ptr = Box::into_raw(boxed) as *mut f64;
    unsafe {
        *out_ptr = ptr;
        *out_len = len;
    }
}

/// Library version as a static string; never freed by the caller.
#[no_mangle]
pub extern "C" fn issl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the current thread's most recent failure ("" after success).
/// Valid until this thread's next issl call.
#[no_mangle]
pub extern "C" fn issl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Free a buffer returned through an `out_*`/`out_len` pair.
///
/// # Safety
/// `ptr` and `len` must come from the same successful issl call, and the
/// buffer must not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn issl_buffer_free(ptr: *mut f64, len: usize) {
    if !ptr.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(ptr, len)));
    }
}

/// 39-dimensional MFCC+delta+delta-delta features of a mono waveform, with
/// the library's default analysis settings. On success `*out_frames` is a
/// row-major `*out_rows` x 39 buffer (free with `issl_buffer_free`, passing
/// rows*39).
///
/// # Safety
/// `samples` must be valid for `n_samples` reads; out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn issl_mfcc39(
    samples: *const f64,
    n_samples: usize,
    sample_rate: u32,
    out_frames: *mut *mut f64,
    out_rows: *mut usize,
) -> IsslStatus {
    guarded(|| {
        let wave = slice_arg(samples, n_samples, "samples")?;
        if out_frames.is_null() || out_rows.is_null() {
            return Err(null_arg("out_frames/out_rows"));
        }
        let cfg = FeatureConfig::default();
        let f = mfcc_samples(wave, sample_rate, &cfg).map_err(fail)?;
        let f = append_deltas(&f, cfg.delta_radius).map_err(fail)?;
        let m = &f.frames;
        let rows = m.rows();
        let mut flat = Vec::with_capacity(rows * m.cols());
        for i in 0..rows {
            flat.extend_from_slice(m.row(i));
        }
        let mut len_slot = 0usize;
        give_buffer(flat, out_frames, &mut len_slot);
        *out_rows = rows;
        Ok(())
    })
}

/// Opaque fitted k-means codebook.
pub struct IsslKmeans {
    inner: Centroids,
}

/// Fit k-means on `n` x `dim` row-major points. On success `*out` owns the
/// fitted codebook (free with `issl_kmeans_free`).
///
/// # Safety
/// `points` must be valid for n*dim reads; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn issl_kmeans_fit(
    points: *const f64,
    n: usize,
    dim: usize,
    k: usize,
    seed: u64,
    max_iter: usize,
    out: *mut *mut IsslKmeans,
) -> IsslStatus {
    guarded(|| {
        let data = slice_arg(points, n.saturating_mul(dim), "points")?;
        if out.is_null() {
            return Err(null_arg("out"));
        }
        let m = matrix_arg(data, n, dim)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let inner = kmeans_fit(&m, k, &mut rng, max_iter).map_err(fail)?;
        *out = Box::into_raw(Box::new(IsslKmeans { inner }));
        Ok(())
    })
}

/// Label `n` points with their nearest centroid (ties to the lowest index).
/// `out_labels` is a caller-allocated array of `n` entries.
///
/// # Safety
/// Pointers must be valid for the stated extents; `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn issl_kmeans_assign(
    h: *const IsslKmeans,
    points: *const f64,
    n: usize,
    dim: usize,
    out_labels: *mut u64,
) -> IsslStatus {
    guarded(|| {
        if h.is_null() {
            return Err(null_arg("h"));
        }
        let data = slice_arg(points, n.saturating_mul(dim), "points")?;
        if out_labels.is_null() {
            return Err(null_arg("out_labels"));
        }
        let m = matrix_arg(data, n, dim)?;
        let seq = assign(&m, &(*h).inner).map_err(fail)?;
        for (i, &label) in seq.labels.iter().enumerate() {
            *out_labels.add(i) = label as u64;
        }
        Ok(())
    })
}

/// Number of centroids, 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn issl_kmeans_k(h: *const IsslKmeans) -> usize {
    if h.is_null() {
        0
    } else {
        (*h).inner.k
    }
}

/// Point dimensionality, 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn issl_kmeans_dim(h: *const IsslKmeans) -> usize {
    if h.is_null() {
        0
    } else {
        (*h).inner.dim
    }
}

/// Copy the k x dim centroid matrix into a caller-allocated buffer of
/// k*dim entries, row-major.
///
/// # Safety
/// `h` must be a live handle; `out` must be valid for k*dim writes.
#[no_mangle]
pub unsafe extern "C" fn issl_kmeans_centroids(
    h: *const IsslKmeans,
    out: *mut f64,
) -> IsslStatus {
    guarded(|| {
        if h.is_null() || out.is_null() {
            return Err(null_arg("h/out"));
        }
        let c = &(*h).inner;
        for i in 0..c.k {
            let row = c.means.row(i);
            std::ptr::copy_nonoverlapping(row.as_ptr(), out.add(i * c.dim), c.dim);
        }
        Ok(())
    })
}

/// Persist a codebook to a text file.
///
/// # Safety
/// `h` must be a live handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn issl_kmeans_save(h: *const IsslKmeans, path: *const c_char) -> IsslStatus {
    guarded(|| {
        if h.is_null() {
            return Err(null_arg("h"));
        }
        let path = str_arg(path, "path")?;
        write_centroids(Path::new(path), &(*h).inner).map_err(fail)
    })
}

/// Load a codebook saved by `issl_kmeans_save`.
///
/// # Safety
/// `path` must be a valid C string; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn issl_kmeans_load(path: *const c_char, out: *mut *mut IsslKmeans) -> IsslStatus {
    guarded(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null_arg("out"));
        }
        let inner = read_centroids(Path::new(path)).map_err(fail)?;
        *out = Box::into_raw(Box::new(IsslKmeans { inner }));
        Ok(())
    })
}

/// Release a codebook handle. Null is a no-op.
///
/// # Safety
/// `h` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn issl_kmeans_free(h: *mut IsslKmeans) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Projection-weighted CCA similarity between an `n` x `dx` view and an
/// `n` x `dy` view (both row-major), with ridge terms `eps_x`, `eps_y`.
/// Writes the score in [0, 1] to `*out_score`.
///
/// # Safety
/// Buffers must be valid for the stated extents; `out_score` for a write.
#[no_mangle]
pub unsafe extern "C" fn issl_cca_pwcca(
    x: *const f64,
    y: *const f64,
    n: usize,
    dx: usize,
    dy: usize,
    eps_x: f64,
    eps_y: f64,
    out_score: *mut f64,
) -> IsslStatus {
    guarded(|| {
        let xs = slice_arg(x, n.saturating_mul(dx), "x")?;
        let ys = slice_arg(y, n.saturating_mul(dy), "y")?;
        if out_score.is_null() {
            return Err(null_arg("out_score"));
        }
        let xm = matrix_arg(xs, n, dx)?;
        let ym = matrix_arg(ys, n, dy)?;
        let model = cca_fit(&xm, &ym, eps_x, eps_y).map_err(fail)?;
        *out_score = pwcca_score(&model, &xm).map_err(fail)?;
        Ok(())
    })
}

fn parse_config_text(text: &str) -> Result<ExperimentConfig, (IsslStatus, String)> {
    parse_experiment_config(text, ExperimentConfig::default()).map_err(fail)
}

/// Synthesize a corpus under `out_dir` from `key = value` configuration
/// text (the experiment schema; "" for all defaults).
///
/// # Safety
/// Both arguments must be valid C strings.
#[no_mangle]
pub unsafe extern "C" fn issl_synth_generate(
    config_text: *const c_char,
    out_dir: *const c_char,
) -> IsslStatus {
    guarded(|| {
        let text = str_arg(config_text, "config_text")?;
        let dir = str_arg(out_dir, "out_dir")?;
        let cfg = parse_config_text(text)?;
        synthcorpus::generate(&cfg.synth, Path::new(dir)).map(|_| ()).map_err(fail)
    })
}

/// Run the full pretraining and probing experiment under `out_dir`,
/// configured by `key = value` text ("" for all defaults). Blocks until
/// done; progress is reported through the `log` facade.
///
/// # Safety
/// Both arguments must be valid C strings.
#[no_mangle]
pub unsafe extern "C" fn issl_experiment_run(
    config_text: *const c_char,
    out_dir: *const c_char,
) -> IsslStatus {
    guarded(|| {
        let text = str_arg(config_text, "config_text")?;
        let dir = str_arg(out_dir, "out_dir")?;
        let cfg = parse_config_text(text)?;
        run_experiment(&cfg, Path::new(dir)).map(|_| ()).map_err(fail)
    })
}
