//! C ABI over `blockflow`.
//!
//! Every function returns a status code (`BF_OK` on success) and writes results
//! through out-pointers. On failure the message is kept per thread and can be
//! copied out with `bf_last_error_message`. Handles are opaque and owned by the
//! caller, who releases them with the matching `*_free`.

use blockflow::analysis::curvature_network;
use blockflow::checkpoint;
use blockflow::datasets::{gen_gaussian_grid, gen_two_blocks, LabeledDataset};
use blockflow::prior::BlockPrior;
use blockflow::solvers::{sample, SolverConfig};
use blockflow::velocity::BlockFlowModel;
use blockflow::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

pub const BF_OK: i32 = 0;
pub const BF_ERR_GENERIC: i32 = 1;
pub const BF_ERR_CONFIG: i32 = 2;
pub const BF_ERR_DIVERGENCE: i32 = 3;
pub const BF_ERR_INTEGRITY: i32 = 4;
pub const BF_ERR_ARGUMENT: i32 = 5;
pub const BF_ERR_NULL: i32 = 6;
pub const BF_ERR_IO: i32 = 7;
pub const BF_ERR_FORMAT: i32 = 8;
pub const BF_ERR_PANIC: i32 = 9;

/// Trained model: velocity net, prior and optional encoder.
pub struct BfModel(BlockFlowModel);

/// Labeled point set.
pub struct BfDataset(LabeledDataset);

/// Per-label Gaussian prior.
pub struct BfPrior(BlockPrior);

#[repr(C)]
#[derive(Debug, Default, Clone, Copy)]
pub struct BfVarianceReport {
    pub total: f64,
    pub within: f64,
    pub between: f64,
    pub ratio: f64,
    pub degenerate: bool,
    pub collapsed: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn code_of(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => BF_ERR_CONFIG,
        Error::Divergence { .. } => BF_ERR_DIVERGENCE,
        Error::Integrity(_) => BF_ERR_INTEGRITY,
        Error::Argument(_) | Error::Dimension { .. } | Error::Domain { .. } => BF_ERR_ARGUMENT,
        Error::Io(_) => BF_ERR_IO,
        Error::Format(_) => BF_ERR_FORMAT,
        _ => BF_ERR_GENERIC,
    }
}

struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(code_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BF_ERR_NULL, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            BF_OK
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            BF_ERR_PANIC
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn bf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint file, verifying its payload hash.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bf_model_load(path: *const c_char, out: *mut *mut BfModel) -> i32 {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(BF_ERR_ARGUMENT, "path is not UTF-8".into()))?;
        let (model, _) = checkpoint::load(Path::new(p))?;
        write_out(out, Box::into_raw(Box::new(BfModel(model))), "out")
    })
}

/// # Safety
/// `model` must be null or a handle from `bf_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bf_model_free(model: *mut BfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; out-pointers must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bf_model_shape(model: *const BfModel, dim: *mut usize, num_labels: *mut usize) -> i32 {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        write_out(dim, m.dim(), "dim")?;
        write_out(num_labels, m.prior.num_labels, "num_labels")
    })
}

/// Euler sampling with `n_steps` steps. `label < 0` draws labels from the prior's
/// label weights. Writes `n * dim` coordinates to `xs` and `n` labels to `labels`
/// (which may be null).
///
/// # Safety
/// `xs` must hold `n * dim` doubles, `labels` (if non-null) `n` entries.
#[no_mangle]
pub unsafe extern "C" fn bf_model_sample(
    model: *const BfModel,
    n_steps: usize,
    n: usize,
    label: i64,
    seed: u64,
    xs: *mut f64,
    labels: *mut usize,
    mean_nfe: *mut f64,
) -> i32 {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let label = match label {
            l if l < 0 => None,
            l if (l as usize) < m.prior.num_labels => Some(l as usize),
            l => return Err(Fail(BF_ERR_ARGUMENT, format!("label {l} out of range"))),
        };
        let d = m.dim();
        let dst = out_slice(xs, n * d, "xs")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = sample(m, &SolverConfig::Euler { n_steps }, n, label, false, &mut rng)?;
        for (i, s) in res.samples.iter().enumerate() {
            dst[i * d..(i + 1) * d].copy_from_slice(&s.x);
            if !labels.is_null() {
                *labels.add(i) = s.label;
            }
        }
        if !mean_nfe.is_null() {
            *mean_nfe = res.mean_nfe;
        }
        Ok(())
    })
}

/// Network-substituted curvature over `k` Euler trajectories of `n_steps` steps.
///
/// # Safety
/// `model` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bf_model_curvature(
    model: *const BfModel,
    k: usize,
    n_steps: usize,
    seed: u64,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let rep = curvature_network(m, k, n_steps, seed)?;
        write_out(out, rep.v_estimate, "out")
    })
}

/// Copies the model's prior into a new handle.
///
/// # Safety
/// `model` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bf_model_prior(model: *const BfModel, out: *mut *mut BfPrior) -> i32 {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        write_out(out, Box::into_raw(Box::new(BfPrior(m.prior.clone()))), "out")
    })
}

/// Builds a prior from row-major `mu` and `log_sigma` (`num_labels * dim` each)
/// and `num_labels` label weights.
///
/// # Safety
/// Input arrays must hold the stated number of doubles; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bf_prior_new(
    num_labels: usize,
    dim: usize,
    mu: *const f64,
    log_sigma: *const f64,
    weights: *const f64,
    out: *mut *mut BfPrior,
) -> i32 {
    guard(|| {
        if num_labels == 0 || dim == 0 {
            return Err(Fail(BF_ERR_ARGUMENT, "num_labels and dim must be positive".into()));
        }
        if mu.is_null() || log_sigma.is_null() || weights.is_null() {
            return Err(null("mu, log_sigma or weights"));
        }
        let rows = |p: *const f64| -> Vec<Vec<f64>> {
            std::slice::from_raw_parts(p, num_labels * dim)
                .chunks(dim)
                .map(|r| r.to_vec())
                .collect()
        };
        let w = std::slice::from_raw_parts(weights, num_labels).to_vec();
        let prior = BlockPrior::from_params(rows(mu), rows(log_sigma), w)?;
        write_out(out, Box::into_raw(Box::new(BfPrior(prior))), "out")
    })
}

/// # Safety
/// `prior` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_prior_free(prior: *mut BfPrior) {
    if !prior.is_null() {
        drop(Box::from_raw(prior));
    }
}

/// # Safety
/// `prior` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bf_prior_variance(prior: *const BfPrior, out: *mut BfVarianceReport) -> i32 {
    guard(|| {
        let r = as_ref(prior, "prior")?.0.variance_decomposition();
        write_out(
            out,
            BfVarianceReport {
                total: r.total,
                within: r.within,
                between: r.between,
                ratio: r.ratio,
                degenerate: r.degenerate,
                collapsed: r.collapsed,
            },
            "out",
        )
    })
}

/// Mixture mean (`dim` doubles) and row-major covariance (`dim * dim` doubles).
///
/// # Safety
/// `mean` and `cov` must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn bf_prior_moments(prior: *const BfPrior, mean: *mut f64, cov: *mut f64) -> i32 {
    guard(|| {
        let p = &as_ref(prior, "prior")?.0;
        let d = p.dim;
        let (m, c) = p.mixture_moments();
        out_slice(mean, d, "mean")?.copy_from_slice(&m);
        let dst = out_slice(cov, d * d, "cov")?;
        for (i, row) in c.iter().enumerate() {
            dst[i * d..(i + 1) * d].copy_from_slice(row);
        }
        Ok(())
    })
}

/// Two isotropic Gaussian blocks at (-3, 0) and (3, 0).
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bf_dataset_two_blocks(n_per_block: usize, spread: f64, seed: u64, out: *mut *mut BfDataset) -> i32 {
    guard(|| {
        let d = gen_two_blocks(n_per_block, [[-3.0, 0.0], [3.0, 0.0]], spread, seed)?;
        write_out(out, Box::into_raw(Box::new(BfDataset(d))), "out")
    })
}

/// `k * k` Gaussian blocks on a grid spanning `[-box_half, box_half]²`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bf_dataset_gaussian_grid(
    k: usize,
    n_per_block: usize,
    box_half: f64,
    spread: f64,
    seed: u64,
    out: *mut *mut BfDataset,
) -> i32 {
    guard(|| {
        let d = gen_gaussian_grid(k, n_per_block, box_half, spread, seed)?;
        write_out(out, Box::into_raw(Box::new(BfDataset(d))), "out")
    })
}

/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_dataset_free(ds: *mut BfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle; out-pointers valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bf_dataset_shape(ds: *const BfDataset, len: *mut usize, dim: *mut usize, num_labels: *mut usize) -> i32 {
    guard(|| {
        let d = &as_ref(ds, "dataset")?.0;
        write_out(len, d.len(), "len")?;
        write_out(dim, d.dim, "dim")?;
        write_out(num_labels, d.num_labels, "num_labels")
    })
}

/// Copies samples (`len * dim` doubles, row-major) and labels (`len` entries).
///
/// # Safety
/// Buffers must hold the stated number of entries; `labels` may be null.
#[no_mangle]
pub unsafe extern "C" fn bf_dataset_copy(ds: *const BfDataset, xs: *mut f64, labels: *mut usize) -> i32 {
    guard(|| {
        let d = &as_ref(ds, "dataset")?.0;
        out_slice(xs, d.len() * d.dim, "xs")?.copy_from_slice(d.samples_flat());
        if !labels.is_null() {
            std::slice::from_raw_parts_mut(labels, d.len()).copy_from_slice(d.labels());
        }
        Ok(())
    })
}
