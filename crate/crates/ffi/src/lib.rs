//! C ABI over the `linflow` core.
//!
//! Every function returns an [`LfStatus`]; results come back through out
//! pointers. On failure the message is kept per thread and can be read with
//! [`lf_last_error_message`]. Objects are opaque handles that the caller
//! releases with the matching `_free` function. Panics never cross the
//! boundary; they surface as [`LfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use linflow::attention::{linear_attention_forward, naive_attention_forward, AttentionConfig};
use linflow::esgf::{detect_knee, KneeConfig, MetricTrace, Orientation};
use linflow::persist::{self, Checkpoint};
use linflow::snrmoe::{self, ExpertPartition, LogSnrSchedule};
use linflow::{Error, Tensor};

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LfStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad shape, out-of-range argument or invalid settings.
    InvalidArgument = 2,
    NonFinite = 3,
    TraceTooShort = 4,
    TraceFlat = 5,
    NoCheckpoint = 6,
    InsufficientData = 7,
    OutOfMemory = 8,
    Format = 9,
    Truncation = 10,
    Io = 11,
    /// Output buffer too small; the required size was written back.
    BufferTooSmall = 12,
    Panic = 13,
}

impl From<&Error> for LfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) | Error::Domain(_) | Error::Config(_) => LfStatus::InvalidArgument,
            Error::NonFinite(_) => LfStatus::NonFinite,
            Error::TooShort { .. } => LfStatus::TraceTooShort,
            Error::AllFlat { .. } => LfStatus::TraceFlat,
            Error::NoCheckpoint(_) => LfStatus::NoCheckpoint,
            Error::InsufficientData(_) => LfStatus::InsufficientData,
            Error::OutOfMemory(_) => LfStatus::OutOfMemory,
            Error::Format(_) => LfStatus::Format,
            Error::Truncation { .. } => LfStatus::Truncation,
            Error::Io { .. } => LfStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn fail(status: LfStatus, msg: impl Into<String>) -> LfStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), LfStatus>) -> LfStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LfStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(LfStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, LfStatus>;
}

impl<T> OrStatus<T> for linflow::Result<T> {
    fn or_status(self) -> Result<T, LfStatus> {
        self.map_err(|e| fail(LfStatus::from(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), LfStatus> {
    if p.is_null() {
        Err(fail(LfStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, LfStatus> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| fail(LfStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn lf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static description of a status code; takes a plain integer so unknown codes are safe.
#[no_mangle]
pub extern "C" fn lf_status_name(status: i32) -> *const c_char {
    let s: &'static CStr = match status {
        0 => c"ok",
        1 => c"null pointer",
        2 => c"invalid argument",
        3 => c"non-finite value",
        4 => c"trace too short",
        5 => c"trace flat",
        6 => c"no checkpoint",
        7 => c"insufficient data",
        8 => c"out of memory",
        9 => c"format error",
        10 => c"truncated",
        11 => c"i/o error",
        12 => c"buffer too small",
        13 => c"panic",
        _ => c"unknown status",
    };
    s.as_ptr()
}

// --- log-SNR ----------------------------------------------------------------------------

/// Log signal-to-noise ratio at `t` in (0, 1), where `t = 1` is pure noise.
///
/// # Safety
/// `out` must be null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lf_log_snr(t: f64, out: *mut f64) -> LfStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = snrmoe::log_snr(t).or_status()?;
        Ok(())
    })
}

/// Inverse of [`lf_log_snr`].
///
/// # Safety
/// `out` must be null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lf_inv_log_snr(lambda: f64, out: *mut f64) -> LfStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = snrmoe::inv_log_snr(lambda).or_status()?;
        Ok(())
    })
}

/// Expert partition of the log-SNR range.
pub struct LfPartition(ExpertPartition);

/// Builds a partition into `2^depth` experts.
///
/// # Safety
/// `out` must be null or valid for one write. Free the result with [`lf_partition_free`].
#[no_mangle]
pub unsafe extern "C" fn lf_partition_new(
    sigma_min: f64,
    sigma_max: f64,
    anchor_t: f64,
    depth: u32,
    out: *mut *mut LfPartition,
) -> LfStatus {
    guard(|| {
        non_null(out, "out")?;
        let schedule = LogSnrSchedule::from_sigmas(sigma_min, sigma_max).or_status()?;
        let p = snrmoe::derive_partition(&schedule, anchor_t, depth).or_status()?;
        *out = Box::into_raw(Box::new(LfPartition(p)));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from [`lf_partition_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lf_partition_free(p: *mut LfPartition) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// `p` must be a live partition handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lf_partition_num_experts(p: *const LfPartition, out: *mut usize) -> LfStatus {
    guard(|| {
        non_null(p, "partition")?;
        non_null(out, "out")?;
        *out = (&*p).0.num_experts();
        Ok(())
    })
}

/// Zero-based expert for routing time `t` in [0, 1] (`t = 1` is pure noise).
///
/// # Safety
/// `p` must be a live partition handle and `expert` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lf_partition_route(p: *const LfPartition, t: f64, expert: *mut usize) -> LfStatus {
    guard(|| {
        non_null(p, "partition")?;
        non_null(expert, "expert")?;
        *expert = (&*p).0.route(t).or_status()?.expert_index;
        Ok(())
    })
}

/// Time interval `[t_low, t_high]` owned by expert `k`.
///
/// # Safety
/// `p` must be a live partition handle; `t_low` and `t_high` valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn lf_partition_interval(
    p: *const LfPartition,
    k: usize,
    t_low: *mut f64,
    t_high: *mut f64,
) -> LfStatus {
    guard(|| {
        non_null(p, "partition")?;
        non_null(t_low, "t_low")?;
        non_null(t_high, "t_high")?;
        let part = &(&*p).0;
        if k >= part.num_experts() {
            return Err(fail(LfStatus::InvalidArgument, format!("expert {k} out of range")));
        }
        let (lo, hi) = part.t_interval(k);
        *t_low = lo;
        *t_high = hi;
        Ok(())
    })
}

// --- attention --------------------------------------------------------------------------

/// # Safety
/// Each pointer must be null or valid for `len` reads.
unsafe fn tensor_arg(p: *const f64, n: usize, width: usize, what: &str) -> Result<Tensor, LfStatus> {
    non_null(p, what)?;
    let len = n.checked_mul(width).ok_or_else(|| fail(LfStatus::InvalidArgument, "size overflow"))?;
    Tensor::new(vec![n, width], std::slice::from_raw_parts(p, len).to_vec()).or_status()
}

/// # Safety
/// See [`lf_attention`].
#[allow(clippy::too_many_arguments)]
unsafe fn attention_impl(
    q: *const f64,
    k: *const f64,
    v: *const f64,
    n: usize,
    heads: usize,
    head_dim: usize,
    epsilon: f64,
    out: *mut f64,
    naive: bool,
) -> LfStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = AttentionConfig::new(heads, head_dim, epsilon).or_status()?;
        let width = cfg.model_dim();
        let (q, k, v) = (tensor_arg(q, n, width, "q")?, tensor_arg(k, n, width, "k")?, tensor_arg(v, n, width, "v")?);
        let y = if naive { naive_attention_forward(&q, &k, &v, &cfg) } else { linear_attention_forward(&q, &k, &v, &cfg) }
            .or_status()?;
        std::slice::from_raw_parts_mut(out, y.numel()).copy_from_slice(y.data());
        Ok(())
    })
}

/// ReLU linear attention in O(N) time.
///
/// `q`, `k`, `v` and `out` are row-major `n × (heads·head_dim)` buffers; head
/// `h` occupies columns `h·head_dim .. (h+1)·head_dim`.
///
/// # Safety
/// The inputs must be valid for `n·heads·head_dim` reads and `out` for as many writes.
#[no_mangle]
pub unsafe extern "C" fn lf_attention(
    q: *const f64,
    k: *const f64,
    v: *const f64,
    n: usize,
    heads: usize,
    head_dim: usize,
    epsilon: f64,
    out: *mut f64,
) -> LfStatus {
    attention_impl(q, k, v, n, heads, head_dim, epsilon, out, false)
}

/// Reference O(N²) evaluation with the same layout as [`lf_attention`].
///
/// # Safety
/// As for [`lf_attention`].
#[no_mangle]
pub unsafe extern "C" fn lf_attention_naive(
    q: *const f64,
    k: *const f64,
    v: *const f64,
    n: usize,
    heads: usize,
    head_dim: usize,
    epsilon: f64,
    out: *mut f64,
) -> LfStatus {
    attention_impl(q, k, v, n, heads, head_dim, epsilon, out, true)
}

// --- knee detection ---------------------------------------------------------------------

/// Knee-detector settings. [`lf_knee_options_default`] fills the defaults.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct LfKneeOptions {
    pub window: usize,
    pub min_gain: f64,
    pub osc_ratio: f64,
    /// Non-zero when larger values are better.
    pub higher_is_better: i32,
}

#[no_mangle]
pub extern "C" fn lf_knee_options_default() -> LfKneeOptions {
    let d = KneeConfig::default();
    LfKneeOptions { window: d.window, min_gain: d.min_gain, osc_ratio: d.osc_ratio, higher_is_better: 1 }
}

/// Knee detection result. `oscillation_start` is meaningful only when `has_oscillation` is non-zero.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LfKneeResult {
    pub knee_iteration: u64,
    pub improve_end: u64,
    pub oscillation_start: u64,
    pub has_oscillation: i32,
}

/// Finds the knee of a metric trace given as parallel arrays.
///
/// # Safety
/// `iterations` and `values` must be valid for `len` reads; `opts` and `out` for one access each.
#[no_mangle]
pub unsafe extern "C" fn lf_detect_knee(
    iterations: *const u64,
    values: *const f64,
    len: usize,
    opts: *const LfKneeOptions,
    out: *mut LfKneeResult,
) -> LfStatus {
    guard(|| {
        non_null(iterations, "iterations")?;
        non_null(values, "values")?;
        non_null(opts, "opts")?;
        non_null(out, "out")?;
        let o = *opts;
        let orientation = if o.higher_is_better != 0 { Orientation::HigherBetter } else { Orientation::LowerBetter };
        let its = std::slice::from_raw_parts(iterations, len);
        let vals = std::slice::from_raw_parts(values, len);
        let trace = MetricTrace::new("metric", orientation, its.iter().copied().zip(vals.iter().copied()).collect())
            .or_status()?;
        let cfg = KneeConfig { window: o.window, min_gain: o.min_gain, osc_ratio: o.osc_ratio };
        let r = detect_knee(&trace, &cfg).or_status()?;
        *out = LfKneeResult {
            knee_iteration: r.knee_iteration,
            improve_end: r.improve_end,
            oscillation_start: r.oscillation_start.unwrap_or(0),
            has_oscillation: r.oscillation_start.is_some() as i32,
        };
        Ok(())
    })
}

// --- checkpoints ------------------------------------------------------------------------

/// A loaded checkpoint.
pub struct LfCheckpoint {
    inner: Checkpoint,
    names: Vec<CString>,
}

/// Checks structure and values of the checkpoint at `path` without keeping it.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lf_checkpoint_validate(path: *const c_char) -> LfStatus {
    guard(|| {
        persist::validate_checkpoint(&path_arg(path)?).or_status()?;
        Ok(())
    })
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
/// Free the result with [`lf_checkpoint_free`].
#[no_mangle]
pub unsafe extern "C" fn lf_checkpoint_open(path: *const c_char, out: *mut *mut LfCheckpoint) -> LfStatus {
    guard(|| {
        non_null(out, "out")?;
        let ck = persist::load_checkpoint(&path_arg(path)?).or_status()?;
        let names = ck.tensors.iter().map(|(n, _)| CString::new(n.as_str()).expect("names have no NUL")).collect();
        *out = Box::into_raw(Box::new(LfCheckpoint { inner: ck, names }));
        Ok(())
    })
}

/// # Safety
/// `c` must be null or a handle from [`lf_checkpoint_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lf_checkpoint_free(c: *mut LfCheckpoint) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// # Safety
/// `c` must be a live checkpoint handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lf_checkpoint_iteration(c: *const LfCheckpoint, out: *mut u64) -> LfStatus {
    guard(|| {
        non_null(c, "checkpoint")?;
        non_null(out, "out")?;
        *out = (&*c).inner.meta.iteration;
        Ok(())
    })
}

/// # Safety
/// `c` must be a live checkpoint handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lf_checkpoint_num_tensors(c: *const LfCheckpoint, out: *mut usize) -> LfStatus {
    guard(|| {
        non_null(c, "checkpoint")?;
        non_null(out, "out")?;
        *out = (&*c).inner.tensors.len();
        Ok(())
    })
}

/// Name of tensor `i`; the string lives as long as the handle.
///
/// # Safety
/// `c` must be a live checkpoint handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lf_checkpoint_tensor_name(c: *const LfCheckpoint, i: usize, out: *mut *const c_char) -> LfStatus {
    guard(|| {
        non_null(c, "checkpoint")?;
        non_null(out, "out")?;
        let name = (&*c).names.get(i).ok_or_else(|| fail(LfStatus::InvalidArgument, format!("tensor {i} out of range")))?;
        *out = name.as_ptr();
        Ok(())
    })
}

/// Copies tensor `name` into `buf` as f64 (f32 data is widened).
///
/// `*len` holds the capacity of `buf` on entry and the element count on return.
/// A null `buf` or short capacity yields [`LfStatus::BufferTooSmall`] with the count in `*len`.
///
/// # Safety
/// `c` must be a live checkpoint handle, `name` NUL-terminated, `len` valid for
/// read and write, and `buf` (when non-null) valid for `*len` writes.
#[no_mangle]
pub unsafe extern "C" fn lf_checkpoint_read_tensor(
    c: *const LfCheckpoint,
    name: *const c_char,
    buf: *mut f64,
    len: *mut usize,
) -> LfStatus {
    guard(|| {
        non_null(c, "checkpoint")?;
        non_null(name, "name")?;
        non_null(len, "len")?;
        let name = CStr::from_ptr(name).to_string_lossy();
        let t = (&*c).inner.get(&name).ok_or_else(|| fail(LfStatus::InvalidArgument, format!("no tensor `{name}`")))?;
        let data = t.to_f64();
        let need = data.numel();
        if buf.is_null() || *len < need {
            *len = need;
            return Err(fail(LfStatus::BufferTooSmall, format!("tensor `{name}` has {need} elements")));
        }
        std::slice::from_raw_parts_mut(buf, need).copy_from_slice(data.data());
        *len = need;
        Ok(())
    })
}
