//! C interface to the `bcm` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`
//! functions and released by the matching `*_free`. Every fallible call
//! returns a [`BcmStatus`]; on failure a message is kept per thread and can
//! be copied out with [`bcm_last_error_message`]. Matrices are passed
//! row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use bcm::bcm::{gram_gaussian, project_simplex, solve_simplex_qp, GramMatrix, QpOptions};
use bcm::estimate::{estimate_point_clouds, EstimateOptions};
use bcm::gaussian::gaussian_barycenter;
use bcm::ot::PointCloud;
use bcm::spd::SpdMatrix;
use bcm::BcmError;
use nalgebra::DMatrix;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    NotPositiveDefinite = 3,
    DimensionMismatch = 4,
    NonConvergence = 5,
    Config = 6,
    Io = 7,
    Parse = 8,
    Panic = 9,
}

impl From<&BcmError> for BcmStatus {
    fn from(e: &BcmError) -> Self {
        match e {
            BcmError::NotPositiveDefinite { .. } | BcmError::IllConditioned { .. } => BcmStatus::NotPositiveDefinite,
            BcmError::DimensionMismatch(_) => BcmStatus::DimensionMismatch,
            BcmError::NonConvergence { .. } | BcmError::QpNonConvergence { .. } => BcmStatus::NonConvergence,
            BcmError::Config(_) => BcmStatus::Config,
            BcmError::Io(_) => BcmStatus::Io,
            BcmError::Parse { .. } | BcmError::Idx(_) => BcmStatus::Parse,
            _ => BcmStatus::InvalidInput,
        }
    }
}

/// Symmetric positive definite matrix.
pub struct BcmSpd(SpdMatrix);

/// Gram matrix of displacement inner products.
pub struct BcmGram(GramMatrix);

/// Weighted point cloud.
pub struct BcmPointCloud(PointCloud);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Core(BcmError),
}

impl From<BcmError> for Failure {
    fn from(e: BcmError) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BcmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BcmStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            BcmStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            BcmStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            BcmStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn handles<'a, T>(p: *const *const T, len: usize, what: &'static str) -> Result<Vec<&'a T>, Failure> {
    slice_in(p, len, what)?.iter().map(|&h| handle(h, what)).collect()
}

unsafe fn store<T>(out: *mut *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bcm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// NUL-terminated) and returns the full message length, or 0 if the last
/// call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bcm_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// # Safety
/// `data` must point to `dim * dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bcm_spd_new(dim: usize, data: *const f64, out: *mut *mut BcmSpd) -> BcmStatus {
    guard(|| {
        let entries = slice_in(data, dim * dim, "data")?;
        store(out, BcmSpd(SpdMatrix::from_row_slice(dim, entries)?), "out")
    })
}

/// # Safety
/// `spd` must be null or a handle from `bcm_spd_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bcm_spd_free(spd: *mut BcmSpd) {
    if !spd.is_null() {
        drop(Box::from_raw(spd));
    }
}

/// # Safety
/// `spd` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bcm_spd_dim(spd: *const BcmSpd) -> usize {
    spd.as_ref().map_or(0, |s| s.0.dim())
}

/// Copies the matrix into `data` (`dim * dim` doubles).
///
/// # Safety
/// `spd` must be a live handle and `data` writable for `dim * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn bcm_spd_get(spd: *const BcmSpd, data: *mut f64) -> BcmStatus {
    guard(|| {
        let s = &handle(spd, "spd")?.0;
        let d = s.dim();
        let dst = slice_out(data, d * d, "data")?;
        for i in 0..d {
            for j in 0..d {
                dst[i * d + j] = s.as_matrix()[(i, j)];
            }
        }
        Ok(())
    })
}

/// # Safety
/// `data` must point to `p * p` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bcm_gram_new(p: usize, data: *const f64, out: *mut *mut BcmGram) -> BcmStatus {
    guard(|| {
        let entries = slice_in(data, p * p, "data")?;
        store(out, BcmGram(GramMatrix::from_row_slice(p, entries)?), "out")
    })
}

/// # Safety
/// `gram` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bcm_gram_free(gram: *mut BcmGram) {
    if !gram.is_null() {
        drop(Box::from_raw(gram));
    }
}

/// # Safety
/// `gram` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bcm_gram_dim(gram: *const BcmGram) -> usize {
    gram.as_ref().map_or(0, |g| g.0.dim())
}

/// # Safety
/// `gram` must be a live handle and `data` writable for `p * p` doubles.
#[no_mangle]
pub unsafe extern "C" fn bcm_gram_get(gram: *const BcmGram, data: *mut f64) -> BcmStatus {
    guard(|| {
        let g = &handle(gram, "gram")?.0;
        let p = g.dim();
        let dst = slice_out(data, p * p, "data")?;
        for i in 0..p {
            for j in 0..p {
                dst[i * p + j] = g.as_matrix()[(i, j)];
            }
        }
        Ok(())
    })
}

/// Closed-form Gram matrix for centered Gaussians.
///
/// # Safety
/// `query` and the `p` entries of `refs` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn bcm_gram_gaussian(
    query: *const BcmSpd,
    refs: *const *const BcmSpd,
    p: usize,
    out: *mut *mut BcmGram,
) -> BcmStatus {
    guard(|| {
        let q = handle(query, "query")?;
        let refs: Vec<SpdMatrix> = handles(refs, p, "refs")?.into_iter().map(|r| r.0.clone()).collect();
        store(out, BcmGram(gram_gaussian(&q.0, &refs)?), "out")
    })
}

/// Minimizes `λᵀAλ` over the simplex. A `tol` or `max_iters` of zero
/// selects the default. `lambda` receives `p` doubles; `value` may be null.
///
/// # Safety
/// `gram` must be a live handle and `lambda` writable for `p` doubles.
#[no_mangle]
pub unsafe extern "C" fn bcm_solve_simplex_qp(
    gram: *const BcmGram,
    tol: f64,
    max_iters: usize,
    lambda: *mut f64,
    value: *mut f64,
) -> BcmStatus {
    guard(|| {
        let g = &handle(gram, "gram")?.0;
        let d = QpOptions::default();
        let opts = QpOptions {
            tol: if tol > 0.0 { tol } else { d.tol },
            max_iters: if max_iters > 0 { max_iters } else { d.max_iters },
        };
        let dst = slice_out(lambda, g.dim(), "lambda")?;
        let sol = solve_simplex_qp(g, None, &opts)?;
        dst.copy_from_slice(sol.lambda.as_slice());
        if !value.is_null() {
            *value = sol.value;
        }
        Ok(())
    })
}

/// Euclidean projection of `v` onto the simplex, written to `out`.
///
/// # Safety
/// `v` readable and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bcm_project_simplex(v: *const f64, len: usize, out: *mut f64) -> BcmStatus {
    guard(|| {
        if len == 0 {
            return Err(BcmError::InvalidInput("empty vector".into()).into());
        }
        let src = slice_in(v, len, "v")?;
        let proj = project_simplex(src);
        slice_out(out, len, "out")?.copy_from_slice(proj.as_slice());
        Ok(())
    })
}

/// Point cloud of `n` points in `R^dim`. A null `weights` means uniform.
///
/// # Safety
/// `points` readable for `n * dim` doubles, `weights` null or readable for
/// `n` doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bcm_point_cloud_new(
    n: usize,
    dim: usize,
    points: *const f64,
    weights: *const f64,
    out: *mut *mut BcmPointCloud,
) -> BcmStatus {
    guard(|| {
        let pts = DMatrix::from_row_slice(n, dim, slice_in(points, n * dim, "points")?);
        let cloud = if weights.is_null() {
            PointCloud::uniform(pts)?
        } else {
            PointCloud::new(pts, slice_in(weights, n, "weights")?.to_vec())?
        };
        store(out, BcmPointCloud(cloud), "out")
    })
}

/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bcm_point_cloud_free(cloud: *mut BcmPointCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Coordinates of `query` against `p` references by entropic transport.
/// `lambda` receives `p` doubles; `gram` may be null.
///
/// # Safety
/// All handles live; `lambda` writable for `p` doubles.
#[no_mangle]
pub unsafe extern "C" fn bcm_estimate_point_clouds(
    query: *const BcmPointCloud,
    refs: *const *const BcmPointCloud,
    p: usize,
    epsilon: f64,
    lambda: *mut f64,
    gram: *mut *mut BcmGram,
) -> BcmStatus {
    guard(|| {
        let q = handle(query, "query")?;
        let refs: Vec<PointCloud> = handles(refs, p, "refs")?.into_iter().map(|r| r.0.clone()).collect();
        let dst = slice_out(lambda, p, "lambda")?;
        let est = estimate_point_clouds(&q.0, &refs, &EstimateOptions::new(epsilon))?;
        dst.copy_from_slice(est.solution.lambda.as_slice());
        if !gram.is_null() {
            store(gram, BcmGram(est.gram), "gram")?;
        }
        Ok(())
    })
}

/// Barycenter of centered Gaussians with weights `lambda`.
///
/// # Safety
/// `lambda` readable for `p` doubles, `refs` holds `p` live handles, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn bcm_gaussian_barycenter(
    lambda: *const f64,
    refs: *const *const BcmSpd,
    p: usize,
    tol: f64,
    max_iters: usize,
    out: *mut *mut BcmSpd,
) -> BcmStatus {
    guard(|| {
        let lam = bcm::bcm::Coordinates::new(slice_in(lambda, p, "lambda")?.to_vec())?;
        let refs: Vec<SpdMatrix> = handles(refs, p, "refs")?.into_iter().map(|r| r.0.clone()).collect();
        let res = gaussian_barycenter(&lam, &refs, tol, max_iters)?;
        store(out, BcmSpd(res.cov), "out")
    })
}
