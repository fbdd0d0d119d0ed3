//! C ABI over the winoquant engine.
//!
//! Objects are opaque heap handles released with the matching `*_free`.
//! Every fallible call returns a [`WqStatus`]; on failure the message is
//! available from [`wq_last_error`] until the next failing call on the same
//! thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use winoquant::conv_ref::{conv_direct_fp, conv_q8, ConvShape};
use winoquant::quant::{sqnr, Precision};
use winoquant::transforms::{standard_transform, ScaleFile, ScaleSet, Tile, WinogradTransform};
use winoquant::wino::{wino_conv, Mode, WinoConfig};
use winoquant::{Fill, RngSpec, Tensor, WinoError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidShape = 2,
    Format = 3,
    Compute = 4,
    SingularTransform = 5,
    InvalidScale = 6,
    InvalidSpec = 7,
    UndefinedMetric = 8,
    InvalidArgument = 9,
    Io = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WqConvMode {
    Fp = 0,
    DirectQ8 = 1,
    WinoFp = 2,
    WinoQ8 = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WqMatrix {
    AT = 0,
    BT = 1,
    G = 2,
}

/// Opaque tensor handle.
pub struct WqTensor(Tensor);

/// Opaque transform handle.
pub struct WqTransform(WinogradTransform);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &WinoError) -> WqStatus {
    match e {
        WinoError::InvalidShape(_) => WqStatus::InvalidShape,
        WinoError::Format(_) | WinoError::Json(_) => WqStatus::Format,
        WinoError::Compute(_) | WinoError::TuneDiverged { .. } => WqStatus::Compute,
        WinoError::SingularTransform(_) => WqStatus::SingularTransform,
        WinoError::InvalidScale(_) => WqStatus::InvalidScale,
        WinoError::InvalidSpec(_) => WqStatus::InvalidSpec,
        WinoError::UndefinedMetric(_) => WqStatus::UndefinedMetric,
        WinoError::Config(_) => WqStatus::InvalidArgument,
        WinoError::Io { .. } => WqStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(WinoError),
}

impl From<WinoError> for Fail {
    fn from(e: WinoError) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WqStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            WqStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(&msg);
            WqStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            WqStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg("path is not UTF-8".into()))
}

unsafe fn dims_of<'a>(dims: *const usize, rank: usize) -> Result<&'a [usize], Fail> {
    if dims.is_null() {
        return Err(Fail::Null("dims"));
    }
    Ok(std::slice::from_raw_parts(dims, rank))
}

fn tile_of(tile: c_int) -> Result<Tile, Fail> {
    match tile {
        43 => Ok(Tile::F43),
        63 => Ok(Tile::F63),
        t => Err(Fail::Arg(format!("tile must be 43 or 63, got {t}"))),
    }
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failing call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Tensor copied from `data` (`prod(dims)` floats), or zeros if `data` is null.
///
/// # Safety
/// `dims` must point to `rank` values; `data`, when non-null, to
/// `prod(dims)` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_tensor_new(dims: *const usize, rank: usize, data: *const f32, out: *mut *mut WqTensor) -> WqStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let dims = dims_of(dims, rank)?;
        let mut t = Tensor::zeros(dims)?;
        if !data.is_null() {
            let len = t.len();
            t.data_mut().copy_from_slice(std::slice::from_raw_parts(data, len));
        }
        *out = boxed(WqTensor(t));
        Ok(())
    })
}

/// Seeded gaussian tensor.
///
/// # Safety
/// As [`wq_tensor_new`].
#[no_mangle]
pub unsafe extern "C" fn wq_tensor_random(
    dims: *const usize,
    rank: usize,
    mean: f64,
    std: f64,
    seed: u64,
    out: *mut *mut WqTensor,
) -> WqStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let t = Tensor::new(dims_of(dims, rank)?, Fill::Rng(RngSpec::gaussian(mean, std, seed)))?;
        *out = boxed(WqTensor(t));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_tensor_load(path_: *const c_char, out: *mut *mut WqTensor) -> WqStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(WqTensor(Tensor::load(path(path_)?)?));
        Ok(())
    })
}

/// # Safety
/// `t` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wq_tensor_save(t: *const WqTensor, path_: *const c_char) -> WqStatus {
    guard(|| {
        get(t, "tensor")?.0.save(path(path_)?)?;
        Ok(())
    })
}

/// Rank of `t`, 0 for null.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wq_tensor_rank(t: *const WqTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.dims().len())
}

/// Element count of `t`, 0 for null.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wq_tensor_len(t: *const WqTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Copies up to `cap` extents into `out`.
///
/// # Safety
/// `t` must be a live handle and `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn wq_tensor_dims(t: *const WqTensor, out: *mut usize, cap: usize) -> WqStatus {
    guard(|| {
        let dims = get(t, "tensor")?.0.dims();
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if cap < dims.len() {
            return Err(Fail::Arg(format!("need room for {} extents, got {cap}", dims.len())));
        }
        std::slice::from_raw_parts_mut(out, dims.len()).copy_from_slice(dims);
        Ok(())
    })
}

/// Borrowed pointer to the row-major payload, null for a null handle.
///
/// # Safety
/// `t` must be null or a live handle; the pointer dies with the handle.
#[no_mangle]
pub unsafe extern "C" fn wq_tensor_data(t: *const WqTensor) -> *const f32 {
    t.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// # Safety
/// `t` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wq_tensor_free(t: *mut WqTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Standard transform for `tile` in {43, 63}.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_transform_standard(tile: c_int, out: *mut *mut WqTransform) -> WqStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(WqTransform(standard_transform(tile_of(tile)?)));
        Ok(())
    })
}

/// Transform with custom `(s_b, s_g)`, each of length `n`.
///
/// # Safety
/// `s_b` and `s_g` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_transform_with_scales(
    tile: c_int,
    s_b: *const f64,
    s_g: *const f64,
    n: usize,
    out: *mut *mut WqTransform,
) -> WqStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let tile = tile_of(tile)?;
        if s_b.is_null() || s_g.is_null() {
            return Err(Fail::Null("scales"));
        }
        if n != tile.n() {
            return Err(Fail::Arg(format!("{tile} needs {} scales, got {n}", tile.n())));
        }
        let sb = std::slice::from_raw_parts(s_b, n).to_vec();
        let sg = std::slice::from_raw_parts(s_g, n).to_vec();
        let t = WinogradTransform::for_tile_with_scales(tile, ScaleSet::new(sb, sg)?)?;
        *out = boxed(WqTransform(t));
        Ok(())
    })
}

/// Transform from a scales JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_transform_load_scales(path_: *const c_char, out: *mut *mut WqTransform) -> WqStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (tile, s) = ScaleFile::load(path(path_)?)?;
        *out = boxed(WqTransform(WinogradTransform::for_tile_with_scales(tile, s)?));
        Ok(())
    })
}

/// Copies one matrix row-major into `out` and writes its extents.
///
/// # Safety
/// `t` must be a live handle; `out` must hold `cap` doubles; `rows` and
/// `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_transform_matrix(
    t: *const WqTransform,
    which: WqMatrix,
    out: *mut f64,
    cap: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> WqStatus {
    guard(|| {
        let t = &get(t, "transform")?.0;
        let m = match which {
            WqMatrix::AT => t.a_t(),
            WqMatrix::BT => t.b_t(),
            WqMatrix::G => t.g(),
        };
        *out_ptr(rows, "rows")? = m.rows();
        *out_ptr(cols, "cols")? = m.cols();
        let len = m.as_slice().len();
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if cap < len {
            return Err(Fail::Arg(format!("need room for {len} entries, got {cap}")));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(m.as_slice());
        Ok(())
    })
}

/// `max |s_a s_b s_g - 1|`, NaN for null.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wq_transform_residual(t: *const WqTransform) -> f64 {
    t.as_ref().map_or(f64::NAN, |t| t.0.scales().residual())
}

/// # Safety
/// `t` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wq_transform_free(t: *mut WqTransform) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// 3x3 convolution of `x [N,C,H,W]` with `w [K,C,3,3]`. `t` is required for
/// the Winograd modes and ignored otherwise. `weight_bits` is 8 or 4.
///
/// # Safety
/// Handles must be live (or `t` null for direct modes); `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wq_conv(
    x: *const WqTensor,
    w: *const WqTensor,
    t: *const WqTransform,
    mode: WqConvMode,
    padding: usize,
    group_size: usize,
    weight_bits: c_int,
    out: *mut *mut WqTensor,
) -> WqStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (x, w) = (&get(x, "x")?.0, &get(w, "w")?.0);
        let precision = match weight_bits {
            8 => Precision::W8A8,
            4 => Precision::W4A8,
            b => return Err(Fail::Arg(format!("weight_bits must be 8 or 4, got {b}"))),
        };
        let cfg = WinoConfig { group_size, precision };
        cfg.validate()?;
        let shape = ConvShape::from_tensors(x, w, padding)?;
        let y = match mode {
            WqConvMode::Fp => conv_direct_fp(x, w, &shape)?,
            WqConvMode::DirectQ8 => conv_q8(x, w, &shape, group_size, precision)?,
            WqConvMode::WinoFp => wino_conv(x, w, &get(t, "transform")?.0, Mode::Fp, padding, &cfg)?,
            WqConvMode::WinoQ8 => wino_conv(x, w, &get(t, "transform")?.0, Mode::Int8, padding, &cfg)?,
        };
        *out = boxed(WqTensor(y));
        Ok(())
    })
}

/// SQNR in dB of `test` against `reference`.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wq_sqnr(reference: *const WqTensor, test: *const WqTensor, out: *mut f64) -> WqStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = sqnr(&get(reference, "reference")?.0, &get(test, "test")?.0)?;
        Ok(())
    })
}
