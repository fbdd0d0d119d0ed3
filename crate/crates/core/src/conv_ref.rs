//! Direct 3x3 stride-1 convolution (cross-correlation), FP and group-wise int8.
//!
//! Both paths go through im2col: row `p = (n * H' + i) * W' + j` of the
//! column matrix holds the `C * r * r` input values under output pixel
//! `(n, i, j)`, ordered `(c, u, v)` to match a flattened `[K, C, r, r]` filter.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WinoError};
use crate::kernels::{gemm_q8_fast, pack_weights, PackedWeights, DEFAULT_VECTOR_WIDTH};
use crate::quant::{Bits, GroupQuantized, GroupSpec, Precision};
use crate::tensor::Tensor;

pub const KERNEL_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvShape {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub padding: usize,
}

impl ConvShape {
    pub fn new(n: usize, c_in: usize, h: usize, w: usize, c_out: usize, padding: usize) -> Result<Self> {
        let s = ConvShape {
            n,
            c_in,
            h,
            w,
            c_out,
            padding,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.n, self.c_in, self.h, self.w, self.c_out].contains(&0) {
            return Err(WinoError::InvalidShape(format!("zero extent in {self:?}")));
        }
        if self.h + 2 * self.padding < KERNEL_SIZE || self.w + 2 * self.padding < KERNEL_SIZE {
            return Err(WinoError::InvalidShape(format!("empty output for {self:?}")));
        }
        Ok(())
    }

    /// Infers the shape from `x: [N, C, H, W]` and `w: [K, C, 3, 3]`.
    pub fn from_tensors(x: &Tensor, w: &Tensor, padding: usize) -> Result<Self> {
        let [n, c, h, wd] = x.nchw();
        let wdims = w.dims();
        if wdims.len() != 4 || wdims[1] != c || wdims[2] != KERNEL_SIZE || wdims[3] != KERNEL_SIZE {
            return Err(WinoError::InvalidShape(format!(
                "filter {wdims:?} incompatible with input {:?}",
                x.dims()
            )));
        }
        Self::new(n, c, h, wd, wdims[0], padding)
    }

    pub fn out_h(&self) -> usize {
        self.h + 2 * self.padding + 1 - KERNEL_SIZE
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.padding + 1 - KERNEL_SIZE
    }

    pub fn input_dims(&self) -> [usize; 4] {
        [self.n, self.c_in, self.h, self.w]
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in, KERNEL_SIZE, KERNEL_SIZE]
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.n, self.c_out, self.out_h(), self.out_w()]
    }

    /// Output pixels, the rows of the im2col matrix.
    pub fn pixels(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }

    /// im2col reduction extent `C * r * r`.
    pub fn reduction(&self) -> usize {
        self.c_in * KERNEL_SIZE * KERNEL_SIZE
    }

    pub(crate) fn check(&self, x: &Tensor, w: &Tensor) -> Result<()> {
        self.validate()?;
        if x.dims() != self.input_dims() || w.dims() != self.weight_dims() {
            return Err(WinoError::InvalidShape(format!(
                "tensors {:?} / {:?} do not match {self:?}",
                x.dims(),
                w.dims()
            )));
        }
        x.ensure_finite("convolution input")?;
        w.ensure_finite("convolution weights")
    }
}

/// The `pixels x reduction` column matrix, row-major.
pub fn im2col(x: &Tensor, shape: &ConvShape) -> Vec<f32> {
    let (oh, ow, p) = (shape.out_h(), shape.out_w(), shape.padding as isize);
    let (c_in, h, w) = (shape.c_in, shape.h as isize, shape.w as isize);
    let red = shape.reduction();
    let xd = x.data();
    let mut cols = vec![0.0f32; shape.pixels() * red];
    for n in 0..shape.n {
        for i in 0..oh {
            for j in 0..ow {
                let row = &mut cols[((n * oh + i) * ow + j) * red..][..red];
                for c in 0..c_in {
                    let plane = &xd[(n * c_in + c) * (h * w) as usize..];
                    for u in 0..KERNEL_SIZE {
                        let y = i as isize + u as isize - p;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for v in 0..KERNEL_SIZE {
                            let xx = j as isize + v as isize - p;
                            if xx >= 0 && xx < w {
                                row[(c * KERNEL_SIZE + u) * KERNEL_SIZE + v] = plane[(y * w + xx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// `[pixels, K]` GEMM output to `[N, K, H', W']`.
pub(crate) fn pixels_to_nchw(out: &[f32], shape: &ConvShape) -> Tensor {
    let (hw, k) = (shape.out_h() * shape.out_w(), shape.c_out);
    let mut y = vec![0.0f32; out.len()];
    for n in 0..shape.n {
        for q in 0..hw {
            for c in 0..k {
                y[(n * k + c) * hw + q] = out[(n * hw + q) * k + c];
            }
        }
    }
    Tensor::from_vec(&shape.output_dims(), y).expect("output dims match pixel count")
}

/// Direct convolution with f64 accumulation, returned in f64 `[N, K, H', W']`
/// order.
pub fn conv_direct_f64(x: &Tensor, w: &Tensor, shape: &ConvShape) -> Result<Vec<f64>> {
    shape.check(x, w)?;
    let cols = im2col(x, shape);
    let red = shape.reduction();
    let wd = w.data();
    let (hw, k) = (shape.out_h() * shape.out_w(), shape.c_out);
    let mut y = vec![0.0f64; shape.n * k * hw];
    for (p, row) in cols.chunks_exact(red).enumerate() {
        let (n, q) = (p / hw, p % hw);
        for c in 0..k {
            let f = &wd[c * red..(c + 1) * red];
            y[(n * k + c) * hw + q] = row.iter().zip(f).map(|(&a, &b)| a as f64 * b as f64).sum();
        }
    }
    Ok(y)
}

pub fn conv_direct_fp(x: &Tensor, w: &Tensor, shape: &ConvShape) -> Result<Tensor> {
    let y = conv_direct_f64(x, w, shape)?;
    Tensor::from_vec(&shape.output_dims(), y.into_iter().map(|v| v as f32).collect())
}

/// Quantizes the im2col matrix of `x` along the `C * r * r` reduction.
pub fn quantize_activations(x: &Tensor, shape: &ConvShape, group_size: usize, bits: Bits) -> Result<GroupQuantized> {
    let red = shape.reduction();
    GroupSpec::for_extent(group_size, red, 1)?;
    let cols = im2col(x, shape);
    GroupQuantized::from_matrix(shape.pixels(), red, &cols, group_size, bits)
}

/// Quantizes the im2col matrix of `x` and the flattened filter along the
/// `C * r * r` reduction.
pub fn quantize_conv_operands(
    x: &Tensor,
    w: &Tensor,
    shape: &ConvShape,
    group_size: usize,
    precision: Precision,
) -> Result<(GroupQuantized, GroupQuantized)> {
    shape.check(x, w)?;
    let xq = quantize_activations(x, shape, group_size, precision.activation_bits())?;
    let wq = GroupQuantized::from_matrix(shape.c_out, shape.reduction(), w.data(), group_size, precision.weight_bits())?;
    Ok((xq, wq))
}

/// Integer convolution over pre-quantized im2col operands.
pub fn conv_direct_q8(xq: &GroupQuantized, wq: &GroupQuantized, shape: &ConvShape) -> Result<Tensor> {
    shape.validate()?;
    if xq.rows() != shape.pixels() || xq.cols() != shape.reduction() {
        return Err(WinoError::InvalidSpec(format!(
            "activation layout {}x{} does not match im2col {}x{}",
            xq.rows(),
            xq.cols(),
            shape.pixels(),
            shape.reduction()
        )));
    }
    if wq.rows() != shape.c_out || wq.cols() != shape.reduction() || wq.group_size() != xq.group_size() {
        return Err(WinoError::InvalidSpec(format!(
            "weight layout {}x{} / group {} does not match activations",
            wq.rows(),
            wq.cols(),
            wq.group_size()
        )));
    }
    conv_direct_q8_packed(xq, &pack_weights(wq, DEFAULT_VECTOR_WIDTH)?, shape)
}

/// [`conv_direct_q8`] with the filter already packed.
pub fn conv_direct_q8_packed(xq: &GroupQuantized, wp: &PackedWeights, shape: &ConvShape) -> Result<Tensor> {
    if xq.rows() != shape.pixels() || wp.rows() != shape.c_out {
        return Err(WinoError::InvalidSpec("packed operands do not match the conv shape".into()));
    }
    let out = gemm_q8_fast(xq, wp)?;
    Ok(pixels_to_nchw(out.data(), shape))
}

/// Quantize-and-convolve convenience wrapper.
pub fn conv_q8(x: &Tensor, w: &Tensor, shape: &ConvShape, group_size: usize, precision: Precision) -> Result<Tensor> {
    let (xq, wq) = quantize_conv_operands(x, w, shape, group_size, precision)?;
    conv_direct_q8(&xq, &wq, shape)
}
