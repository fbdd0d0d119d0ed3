//! Symmetric group-wise integer quantization.
//!
//! A group `x` is stored as `x_int = clamp(round(x * c_max / max|x|), -c_max, c_max)`
//! with scale `s = max|x| / c_max`, so `x ~ s * x_int`. Rounding is
//! half-to-even. An all-zero group gets `s = 1`. `c_max` is 127 for 8-bit
//! and 7 for 4-bit; there is no zero-point.
//!
//! Tensors are grouped along one axis (the reduction axis of the GEMM that
//! consumes them). Internally a [`GroupQuantized`] is a `rows x padded_cols`
//! int8 matrix where `cols` is the grouped axis, zero-padded up to a multiple
//! of the group size, and every other axis is folded into `rows`.
//!
//! Serialized form (`WINOQQ01`, little-endian): magic, `u8` bits,
//! `u32` group size, `u32` axis, `u32` rank, `u64` extents, then the int8
//! payload (`rows * padded_cols` bytes, row-major in the internal layout) and
//! the f32 scales (`rows * groups`).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WinoError};
use crate::tensor::{ByteReader, Tensor};

pub const QUANT_MAGIC: &[u8; 8] = b"WINOQQ01";

/// Group sizes accepted for activations and weights.
pub const ALLOWED_GROUP_SIZES: [usize; 4] = [32, 64, 128, 256];

/// SQNR reported when the test signal equals the reference exactly.
pub const SQNR_CAP_DB: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Bits {
    Four,
    Eight,
}

impl Bits {
    pub fn c_max(self) -> i32 {
        match self {
            Bits::Four => 7,
            Bits::Eight => 127,
        }
    }

    pub fn width(self) -> u8 {
        match self {
            Bits::Four => 4,
            Bits::Eight => 8,
        }
    }
}

impl From<Bits> for u8 {
    fn from(b: Bits) -> u8 {
        b.width()
    }
}

impl TryFrom<u8> for Bits {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Bits::Four),
            8 => Ok(Bits::Eight),
            other => Err(format!("unsupported bit width {other}")),
        }
    }
}

/// Weight/activation bit widths of a quantized convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    W8A8,
    W4A8,
}

impl Precision {
    pub fn weight_bits(self) -> Bits {
        match self {
            Precision::W8A8 => Bits::Eight,
            Precision::W4A8 => Bits::Four,
        }
    }

    pub fn activation_bits(self) -> Bits {
        Bits::Eight
    }
}

impl FromStr for Precision {
    type Err = WinoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w8a8" => Ok(Precision::W8A8),
            "w4a8" => Ok(Precision::W4A8),
            other => Err(WinoError::Config(format!("unknown precision {other:?}"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::W8A8 => "w8a8",
            Precision::W4A8 => "w4a8",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub group_size: usize,
    pub axis: usize,
}

impl GroupSpec {
    /// A spec for activations/weights; `group_size` must be one of
    /// [`ALLOWED_GROUP_SIZES`].
    pub fn new(group_size: usize, axis: usize) -> Result<Self> {
        if !ALLOWED_GROUP_SIZES.contains(&group_size) {
            return Err(WinoError::InvalidSpec(format!(
                "group size {group_size} not in {ALLOWED_GROUP_SIZES:?}"
            )));
        }
        Ok(GroupSpec { group_size, axis })
    }

    /// One group spanning the whole reduction extent.
    pub fn full(extent: usize, axis: usize) -> Self {
        GroupSpec {
            group_size: extent,
            axis,
        }
    }

    /// An allowed group size, or one group covering the whole `extent`.
    pub fn for_extent(group_size: usize, extent: usize, axis: usize) -> Result<Self> {
        if group_size == extent {
            Ok(Self::full(extent, axis))
        } else {
            Self::new(group_size, axis)
        }
    }

    fn check_for(&self, dims: &[usize]) -> Result<()> {
        if self.axis >= dims.len() {
            return Err(WinoError::InvalidSpec(format!(
                "axis {} out of range for rank {}",
                self.axis,
                dims.len()
            )));
        }
        let extent = dims[self.axis];
        if !ALLOWED_GROUP_SIZES.contains(&self.group_size) && self.group_size != extent {
            return Err(WinoError::InvalidSpec(format!(
                "group size {} is neither in {ALLOWED_GROUP_SIZES:?} nor the axis extent {extent}",
                self.group_size
            )));
        }
        Ok(())
    }
}

/// Quantizes one group into `out`, returning its scale.
///
/// Callers must have checked the input is finite.
#[inline]
pub fn quantize_into(x: &[f32], bits: Bits, out: &mut [i8]) -> f32 {
    debug_assert_eq!(x.len(), out.len());
    let amax = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if amax == 0.0 {
        out.iter_mut().for_each(|q| *q = 0);
        return 1.0;
    }
    let c = bits.c_max() as f32;
    let inv = c / amax;
    for (q, &v) in out.iter_mut().zip(x) {
        *q = quantize_value(v, inv, c);
    }
    amax / c
}

/// Reciprocal step and scale for a group with the given `max|x|`, as used by
/// [`quantize_into`]: `(c_max / amax, amax / c_max)`, or `(0, 1)` for an
/// all-zero group.
#[inline(always)]
pub(crate) fn group_params(amax: f32, bits: Bits) -> (f32, f32) {
    if amax == 0.0 {
        return (0.0, 1.0);
    }
    let c = bits.c_max() as f32;
    (c / amax, amax / c)
}

#[inline(always)]
pub(crate) fn quantize_value(v: f32, inv: f32, c: f32) -> i8 {
    round_half_even_small((v * inv).clamp(-c, c)) as i8
}

/// Round-half-to-even for `|v| < 2^22`: adding `1.5 * 2^23` leaves no
/// fraction bits, so the IEEE default rounding mode does the work. Equal to
/// `f32::round_ties_even` on that range and much cheaper on targets without
/// a rounding instruction.
#[inline(always)]
fn round_half_even_small(v: f32) -> f32 {
    const MAGIC: f32 = 12_582_912.0;
    (v + MAGIC) - MAGIC
}

pub fn quantize_group(x: &[f32], bits: Bits) -> Result<(Vec<i8>, f32)> {
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(WinoError::Compute(format!("cannot quantize non-finite value {v}")));
    }
    let mut ints = vec![0i8; x.len()];
    let s = quantize_into(x, bits, &mut ints);
    Ok((ints, s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupQuantized {
    dims: Vec<usize>,
    axis: usize,
    group_size: usize,
    bits: Bits,
    rows: usize,
    cols: usize,
    padded_cols: usize,
    ints: Vec<i8>,
    scales: Vec<f32>,
}

fn padded(cols: usize, group: usize) -> usize {
    cols.div_ceil(group) * group
}

impl GroupQuantized {
    /// Quantize a row-major `rows x cols` matrix along its columns with any
    /// positive group size. Kernel-level entry point; tensor-level callers
    /// should use [`quantize_tensor`].
    pub fn from_matrix(rows: usize, cols: usize, data: &[f32], group_size: usize, bits: Bits) -> Result<Self> {
        if group_size == 0 || rows == 0 || cols == 0 {
            return Err(WinoError::InvalidSpec(format!(
                "matrix {rows}x{cols} with group size {group_size}"
            )));
        }
        if data.len() != rows * cols {
            return Err(WinoError::InvalidShape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(WinoError::Compute(format!("cannot quantize non-finite value {v}")));
        }
        let pc = padded(cols, group_size);
        let groups = pc / group_size;
        let mut ints = vec![0i8; rows * pc];
        let mut scales = vec![1.0f32; rows * groups];
        let mut buf = vec![0.0f32; pc];
        for r in 0..rows {
            buf[..cols].copy_from_slice(&data[r * cols..(r + 1) * cols]);
            buf[cols..].iter_mut().for_each(|v| *v = 0.0);
            for g in 0..groups {
                let span = g * group_size..(g + 1) * group_size;
                scales[r * groups + g] = quantize_into(&buf[span.clone()], bits, &mut ints[r * pc + span.start..r * pc + span.end]);
            }
        }
        Ok(GroupQuantized {
            dims: vec![rows, cols],
            axis: 1,
            group_size,
            bits,
            rows,
            cols,
            padded_cols: pc,
            ints,
            scales,
        })
    }

    /// Assemble from raw parts (internal layout). Validates ranges.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        group_size: usize,
        bits: Bits,
        ints: Vec<i8>,
        scales: Vec<f32>,
    ) -> Result<Self> {
        if group_size == 0 || rows == 0 || cols == 0 {
            return Err(WinoError::InvalidSpec("empty quantized matrix".into()));
        }
        let pc = padded(cols, group_size);
        if ints.len() != rows * pc || scales.len() != rows * (pc / group_size) {
            return Err(WinoError::InvalidShape("quantized parts have wrong lengths".into()));
        }
        let c = bits.c_max();
        if ints.iter().any(|&q| (q as i32).abs() > c) {
            return Err(WinoError::Format(format!("int outside [-{c}, {c}]")));
        }
        if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(WinoError::Format("scale not positive and finite".into()));
        }
        Ok(GroupQuantized {
            dims: vec![rows, cols],
            axis: 1,
            group_size,
            bits,
            rows,
            cols,
            padded_cols: pc,
            ints,
            scales,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Reinterpret the internal matrix as a tensor of `dims` grouped along
    /// `axis`. The caller guarantees the fold matches `rows x cols`.
    pub(crate) fn set_layout(&mut self, dims: Vec<usize>, axis: usize) {
        debug_assert_eq!(dims[axis], self.cols);
        debug_assert_eq!(dims.iter().product::<usize>(), self.rows * self.cols);
        self.dims = dims;
        self.axis = axis;
    }

    pub fn axis(&self) -> usize {
        self.axis
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn bits(&self) -> Bits {
        self.bits
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Logical extent of the grouped axis.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn padded_cols(&self) -> usize {
        self.padded_cols
    }

    pub fn groups_per_row(&self) -> usize {
        self.padded_cols / self.group_size
    }

    pub fn ints(&self) -> &[i8] {
        &self.ints
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn row_ints(&self, r: usize) -> &[i8] {
        &self.ints[r * self.padded_cols..(r + 1) * self.padded_cols]
    }

    pub fn row_scales(&self, r: usize) -> &[f32] {
        let g = self.groups_per_row();
        &self.scales[r * g..(r + 1) * g]
    }

    /// Dequantized internal matrix (`rows x cols`, padding stripped) in f64.
    /// `q as f64 * s as f64` is exact.
    pub fn dequantize_matrix_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let ints = self.row_ints(r);
            let sc = self.row_scales(r);
            for c in 0..self.cols {
                out.push(ints[c] as f64 * sc[c / self.group_size] as f64);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(QUANT_MAGIC);
        out.push(self.bits.width());
        out.extend_from_slice(&(self.group_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.axis as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend(self.ints.iter().map(|&q| q as u8));
        for &s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        if rd.take(8, "magic")? != QUANT_MAGIC {
            return Err(WinoError::Format("bad magic for quantized tensor".into()));
        }
        let bits = Bits::try_from(rd.u8("bits")?).map_err(WinoError::Format)?;
        let group_size = rd.u32("group size")? as usize;
        let axis = rd.u32("axis")? as usize;
        let rank = rd.u32("rank")? as usize;
        if rank == 0 || rank > crate::tensor::MAX_RANK || axis >= rank || group_size == 0 {
            return Err(WinoError::Format(format!(
                "bad header: rank {rank}, axis {axis}, group {group_size}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = rd.u64("extent")? as usize;
            if d == 0 {
                return Err(WinoError::Format("zero extent".into()));
            }
            dims.push(d);
        }
        let total = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| WinoError::Format("dims overflow".into()))?;
        let cols = dims[axis];
        let rows = total / cols;
        let pc = padded(cols, group_size);
        let n_ints = rows
            .checked_mul(pc)
            .ok_or_else(|| WinoError::Format("payload overflow".into()))?;
        let ints: Vec<i8> = rd.take(n_ints, "int payload")?.iter().map(|&b| b as i8).collect();
        let n_scales = rows * (pc / group_size);
        let sbytes = rd.take(n_scales * 4, "scales")?;
        let scales = sbytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if rd.remaining() != 0 {
            return Err(WinoError::Format("trailing bytes after scales".into()));
        }
        let mut q = GroupQuantized::from_parts(rows, cols, group_size, bits, ints, scales)?;
        q.set_layout(dims, axis);
        Ok(q)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| WinoError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| WinoError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Splits `dims` around `axis` into (outer, axis extent, inner) products.
fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

pub fn quantize_tensor(t: &Tensor, spec: GroupSpec, bits: Bits) -> Result<GroupQuantized> {
    spec.check_for(t.dims())?;
    t.ensure_finite("quantize_tensor input")?;
    let (outer, extent, inner) = split_axis(t.dims(), spec.axis);
    // Gather each (outer, inner) fiber along the axis into one matrix row.
    let data = t.data();
    let mut mat = Vec::with_capacity(data.len());
    for o in 0..outer {
        for i in 0..inner {
            for a in 0..extent {
                mat.push(data[(o * extent + a) * inner + i]);
            }
        }
    }
    let mut q = GroupQuantized::from_matrix(outer * inner, extent, &mat, spec.group_size, bits)?;
    q.set_layout(t.dims().to_vec(), spec.axis);
    Ok(q)
}

pub fn dequantize(q: &GroupQuantized) -> Tensor {
    let (outer, extent, inner) = split_axis(&q.dims, q.axis);
    let mut data = vec![0.0f32; outer * extent * inner];
    for o in 0..outer {
        for i in 0..inner {
            let r = o * inner + i;
            let ints = q.row_ints(r);
            let sc = q.row_scales(r);
            for a in 0..extent {
                data[(o * extent + a) * inner + i] = ints[a] as f32 * sc[a / q.group_size];
            }
        }
    }
    Tensor::from_vec(&q.dims, data).expect("dims were validated on construction")
}

/// `10 log10(sum ref^2 / sum (ref - test)^2)` in dB, capped at
/// [`SQNR_CAP_DB`].
pub fn sqnr(reference: &Tensor, test: &Tensor) -> Result<f64> {
    if reference.dims() != test.dims() {
        return Err(WinoError::InvalidShape(format!(
            "sqnr shapes differ: {:?} vs {:?}",
            reference.dims(),
            test.dims()
        )));
    }
    sqnr_slices(reference.data(), test.data())
}

pub fn sqnr_slices(reference: &[f32], test: &[f32]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(WinoError::InvalidShape("sqnr lengths differ".into()));
    }
    let (mut sig, mut noise) = (0.0f64, 0.0f64);
    for (&r, &t) in reference.iter().zip(test) {
        let (r, t) = (r as f64, t as f64);
        sig += r * r;
        noise += (r - t) * (r - t);
    }
    sqnr_from_powers(sig, noise)
}

pub fn sqnr_from_powers(signal: f64, noise: f64) -> Result<f64> {
    if !signal.is_finite() || !noise.is_finite() {
        return Err(WinoError::UndefinedMetric("non-finite signal or noise power".into()));
    }
    if signal == 0.0 {
        return Err(WinoError::UndefinedMetric("reference signal is all zeros".into()));
    }
    if noise == 0.0 {
        return Ok(SQNR_CAP_DB);
    }
    Ok((10.0 * (signal / noise).log10()).min(SQNR_CAP_DB))
}
