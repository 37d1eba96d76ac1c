//! C interface to `dimts`.
//!
//! Every function returns a [`DimtsStatus`]. On failure a message for the
//! calling thread is available from [`dimts_last_error`]. Arrays are
//! row-major `double` buffers; windows are laid out `[n][len][channels]`.

use dimts::data::MinMaxScaler;
use dimts::diffusion::{cosine_schedule, sample, ReverseNoise};
use dimts::metrics::{evaluate, DatasetPair, Distance, EvalOptions};
use dimts::network::DimTs;
use dimts::permutation::{solve_ordering, SimilarityMatrix};
use dimts::ssm::{selective_scan, SsmParams};
use dimts::{DenseArray, Error};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimtsStatus {
    Ok = 0,
    /// bad configuration or argument value
    InvalidArgument = 1,
    /// unreadable, malformed or mismatched data
    Data = 2,
    /// non-finite values or a failed numerical routine
    Numeric = 3,
    NullPointer = 4,
    BufferTooSmall = 5,
    /// an internal panic was caught at the boundary
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimtsDistance {
    Js = 0,
    Kl = 1,
}

/// Headline scores of an evaluation. `fdds` is only meaningful when
/// `has_fdds` is true (two or more channels).
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DimtsMetrics {
    pub correlational: f64,
    pub mdd: f64,
    pub acd: f64,
    pub skewness_diff: f64,
    pub kurtosis_diff: f64,
    pub vds: f64,
    pub fdds: f64,
    pub has_fdds: bool,
}

/// Opaque trained model.
pub struct DimtsModel {
    model: DimTs,
    scaler: Option<MinMaxScaler>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: DimtsStatus, msg: impl Into<String>) -> DimtsStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> DimtsStatus {
    let status = match e.exit_code() {
        1 => DimtsStatus::InvalidArgument,
        3 => DimtsStatus::Numeric,
        _ => DimtsStatus::Data,
    };
    fail(status, e.to_string())
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), DimtsStatus>) -> DimtsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DimtsStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(DimtsStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn status(self) -> Result<T, DimtsStatus>;
}

impl<T> OrStatus<T> for dimts::Result<T> {
    fn status(self) -> Result<T, DimtsStatus> {
        self.map_err(from_error)
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], DimtsStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(DimtsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], DimtsStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(DimtsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn need(len: usize, want: usize, what: &str) -> Result<(), DimtsStatus> {
    if len < want {
        return Err(fail(
            DimtsStatus::BufferTooSmall,
            format!("{what} holds {len} values, {want} needed"),
        ));
    }
    Ok(())
}

/// Message describing the last failure on this thread; empty after a
/// success. The pointer stays valid until the next call into the library
/// on the same thread.
#[no_mangle]
pub extern "C" fn dimts_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by `dimts train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dimts_model_load(
    path: *const c_char,
    out: *mut *mut DimtsModel,
) -> DimtsStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(
                DimtsStatus::NullPointer,
                "path and out must be non-null",
            ));
        }
        *out = ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(DimtsStatus::InvalidArgument, "path is not UTF-8"))?;
        let (model, header) = dimts::checkpoint::load_model(Path::new(p)).status()?;
        *out = Box::into_raw(Box::new(DimtsModel {
            model,
            scaler: header.scaler,
        }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`dimts_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dimts_model_free(model: *mut DimtsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window length and channel count of a model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dimts_model_dims(
    model: *const DimtsModel,
    seq_len: *mut usize,
    channels: *mut usize,
) -> DimtsStatus {
    guard(|| {
        if model.is_null() || seq_len.is_null() || channels.is_null() {
            return Err(fail(DimtsStatus::NullPointer, "null argument"));
        }
        let cfg = (*model).model.config();
        *seq_len = cfg.seq_len;
        *channels = cfg.channels;
        Ok(())
    })
}

/// Draws `n` windows into `out` (`n * seq_len * channels` values). With
/// `denormalize` the stored scaling maps values back to data units,
/// otherwise they stay in [-1, 1].
///
/// # Safety
/// `model` must be valid and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dimts_model_sample(
    model: *const DimtsModel,
    n: usize,
    seed: u64,
    denormalize: bool,
    out: *mut f64,
    out_len: usize,
) -> DimtsStatus {
    guard(|| {
        if model.is_null() {
            return Err(fail(DimtsStatus::NullPointer, "model is null"));
        }
        let m = &*model;
        let cfg = m.model.config();
        need(out_len, n * cfg.seq_len * cfg.channels, "out")?;
        let dst = slice_mut(out, out_len, "out")?;
        let schedule = cosine_schedule(cfg.diffusion_steps).status()?;
        let mut x = sample(
            &m.model,
            &schedule,
            n,
            (cfg.seq_len, cfg.channels),
            ReverseNoise::Beta,
            seed,
        )
        .status()?;
        if denormalize {
            if let Some(s) = &m.scaler {
                x = s.denormalize(&x).status()?;
            }
        }
        dst[..x.len()].copy_from_slice(x.data());
        Ok(())
    })
}

/// Spectral channel order of a symmetric `c x c` similarity matrix;
/// `order[k]` is the channel scanned at position `k`.
///
/// # Safety
/// `similarity` must hold `c * c` doubles and `order` `c` entries.
#[no_mangle]
pub unsafe extern "C" fn dimts_solve_ordering(
    similarity: *const f64,
    c: usize,
    order: *mut usize,
) -> DimtsStatus {
    guard(|| {
        if c == 0 {
            return Err(fail(
                DimtsStatus::InvalidArgument,
                "empty similarity matrix",
            ));
        }
        let g = slice(similarity, c * c, "similarity")?;
        let dst = slice_mut(order, c, "order")?;
        let m = DenseArray::matrix(c, c, g.to_vec()).status()?;
        let perm = solve_ordering(&SimilarityMatrix::new(m).status()?).status()?;
        dst.copy_from_slice(&perm.pi);
        Ok(())
    })
}

/// Compares `real_n` real and `synth_n` synthetic windows of shape
/// `[len][channels]`. `max_lag = 0` selects the default of `len / 4`.
///
/// # Safety
/// Buffers must hold the stated number of windows; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dimts_evaluate(
    real: *const f64,
    real_n: usize,
    synthetic: *const f64,
    synth_n: usize,
    len: usize,
    channels: usize,
    bins: usize,
    max_lag: usize,
    distance: DimtsDistance,
    out: *mut DimtsMetrics,
) -> DimtsStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(DimtsStatus::NullPointer, "out is null"));
        }
        let w = len * channels;
        let r = DenseArray::new(
            vec![real_n, len, channels],
            slice(real, real_n * w, "real")?.to_vec(),
        )
        .status()?;
        let s = DenseArray::new(
            vec![synth_n, len, channels],
            slice(synthetic, synth_n * w, "synthetic")?.to_vec(),
        )
        .status()?;
        let names: Vec<String> = (0..channels).map(|c| format!("c{c}")).collect();
        let opts = EvalOptions {
            bins,
            max_lag: (max_lag > 0).then_some(max_lag),
            distance: match distance {
                DimtsDistance::Js => Distance::Js,
                DimtsDistance::Kl => Distance::Kl,
            },
        };
        let rep = evaluate(&DatasetPair::new(&r, &s, &names).status()?, &opts).status()?;
        *out = DimtsMetrics {
            correlational: rep.correlational_score,
            mdd: rep.mdd,
            acd: rep.acd,
            skewness_diff: rep.skewness_diff,
            kurtosis_diff: rep.kurtosis_diff,
            vds: rep.vds,
            fdds: rep.fdds.unwrap_or(0.0),
            has_fdds: rep.fdds.is_some(),
        };
        Ok(())
    })
}

/// Selective scan with frozen parameters: `a` is `[h][n]` (negative),
/// `delta` `[k][h]` (positive), `b` and `c` `[k][n]`, `x` and `y` `[k][h]`.
///
/// # Safety
/// Every buffer must hold the number of doubles implied by its shape.
#[no_mangle]
pub unsafe extern "C" fn dimts_selective_scan(
    a: *const f64,
    delta: *const f64,
    b: *const f64,
    c: *const f64,
    x: *const f64,
    k: usize,
    h: usize,
    n: usize,
    y: *mut f64,
) -> DimtsStatus {
    guard(|| {
        if k == 0 || h == 0 || n == 0 {
            return Err(fail(
                DimtsStatus::InvalidArgument,
                "k, h and n must be positive",
            ));
        }
        let arr = |p, r, c, what| -> Result<DenseArray, DimtsStatus> {
            DenseArray::matrix(r, c, slice(p, r * c, what)?.to_vec()).status()
        };
        let params = SsmParams::new(
            arr(a, h, n, "a")?,
            arr(delta, k, h, "delta")?,
            arr(b, k, n, "b")?,
            arr(c, k, n, "c")?,
        )
        .status()?;
        let out = selective_scan(&params, &arr(x, k, h, "x")?).status()?;
        slice_mut(y, k * h, "y")?.copy_from_slice(out.data());
        Ok(())
    })
}
