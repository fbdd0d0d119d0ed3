//! Winograd convolution in three fidelities.
//!
//! The pipeline is weight transform (offline), input transform, a per-tap
//! channel GEMM (the Hadamard stage) and output transform. Winograd-domain
//! tensors are stored tap-major: `[tap][row][col]`, where rows are tiles
//! (or output channels for weights) and cols are channels.
//!
//! Tile `p = (b * tiles_h + th) * tiles_w + tw` covers output rows
//! `th*m .. th*m + m` and reads padded input rows `th*m .. th*m + n`, i.e.
//! unpadded rows starting at `th*m - padding`. Out-of-range input reads are
//! zero; out-of-range output rows are dropped.

mod quantized;
mod stats;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv_ref::{ConvShape, KERNEL_SIZE};
use crate::error::{Result, WinoError};
use crate::matrix::Mat;
use crate::quant::{GroupQuantized, GroupSpec, Precision};
use crate::tensor::Tensor;
use crate::transforms::WinogradTransform;

pub use quantized::{
    hadamard_q, input_transform_q, output_transform_q, prepare_weights, PreparedWeights, WinoDomainQ,
};
pub use stats::{tap_range_stats, TapStats};

/// Largest supported `n = m + r - 1`.
pub const MAX_TILE: usize = 8;

pub const DEFAULT_GROUP_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fp,
    FakeQuant,
    Int8,
}

impl std::str::FromStr for Mode {
    type Err = WinoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp" => Ok(Mode::Fp),
            "fake_quant" | "fake-quant" => Ok(Mode::FakeQuant),
            "int8" => Ok(Mode::Int8),
            other => Err(WinoError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Arithmetic used by the quantized stages. Both see the same quantized
/// operands; `Int8` reduces in i32 per group, `FakeQuant` dequantizes and
/// reduces in f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arith {
    Int8,
    FakeQuant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinoConfig {
    pub group_size: usize,
    pub precision: Precision,
}

impl Default for WinoConfig {
    fn default() -> Self {
        WinoConfig {
            group_size: DEFAULT_GROUP_SIZE,
            precision: Precision::W8A8,
        }
    }
}

impl WinoConfig {
    pub fn validate(&self) -> Result<()> {
        GroupSpec::new(self.group_size, 0).map(|_| ())
    }
}

#[derive(Debug, Clone)]
pub struct WinoPlan {
    pub transform: WinogradTransform,
    pub shape: ConvShape,
    pub tiles_h: usize,
    pub tiles_w: usize,
}

impl WinoPlan {
    pub fn new(transform: &WinogradTransform, shape: ConvShape) -> Result<Self> {
        shape.validate()?;
        if transform.r() != KERNEL_SIZE {
            return Err(WinoError::InvalidShape(format!("filter size {} unsupported", transform.r())));
        }
        if transform.n() > MAX_TILE {
            return Err(WinoError::InvalidShape(format!("tile n = {} exceeds {MAX_TILE}", transform.n())));
        }
        let m = transform.m();
        Ok(WinoPlan {
            transform: transform.clone(),
            shape,
            tiles_h: shape.out_h().div_ceil(m),
            tiles_w: shape.out_w().div_ceil(m),
        })
    }

    pub fn tiles(&self) -> usize {
        self.shape.n * self.tiles_h * self.tiles_w
    }

    pub fn n(&self) -> usize {
        self.transform.n()
    }

    pub fn m(&self) -> usize {
        self.transform.m()
    }

    pub fn taps(&self) -> usize {
        self.n() * self.n()
    }

    /// Input tiles as `[P][C][n][n]`.
    pub fn extract_tiles(&self, x: &Tensor) -> Vec<f32> {
        let (n, m, s) = (self.n(), self.m(), &self.shape);
        let (h, w, pad) = (s.h as isize, s.w as isize, s.padding as isize);
        let mut out = vec![0.0f32; self.tiles() * s.c_in * n * n];
        let xd = x.data();
        out.par_chunks_mut(s.c_in * n * n).enumerate().for_each(|(p, tile)| {
            let (b, th, tw) = self.tile_coords(p);
            let (y0, x0) = ((th * m) as isize - pad, (tw * m) as isize - pad);
            for c in 0..s.c_in {
                let plane = &xd[(b * s.c_in + c) * s.h * s.w..][..s.h * s.w];
                let dst = &mut tile[c * n * n..(c + 1) * n * n];
                for u in 0..n {
                    let yy = y0 + u as isize;
                    if yy < 0 || yy >= h {
                        continue;
                    }
                    for v in 0..n {
                        let xx = x0 + v as isize;
                        if xx >= 0 && xx < w {
                            dst[u * n + v] = plane[(yy * w + xx) as usize];
                        }
                    }
                }
            }
        });
        out
    }

    /// `[P][K][m][m]` output tiles to `[N, K, H', W']`, dropping overhang.
    pub fn untile(&self, tiles: &[f32]) -> Tensor {
        let (m, s) = (self.m(), &self.shape);
        let (oh, ow, k) = (s.out_h(), s.out_w(), s.c_out);
        let mut y = vec![0.0f32; s.n * k * oh * ow];
        for p in 0..self.tiles() {
            let (b, th, tw) = self.tile_coords(p);
            for c in 0..k {
                let src = &tiles[(p * k + c) * m * m..][..m * m];
                for i in 0..m.min(oh - th * m) {
                    for j in 0..m.min(ow - tw * m) {
                        y[((b * k + c) * oh + th * m + i) * ow + tw * m + j] = src[i * m + j];
                    }
                }
            }
        }
        Tensor::from_vec(&s.output_dims(), y).expect("output dims")
    }

    fn tile_coords(&self, p: usize) -> (usize, usize, usize) {
        let per_image = self.tiles_h * self.tiles_w;
        (p / per_image, (p % per_image) / self.tiles_w, p % self.tiles_w)
    }
}

/// Winograd-domain values, `[tap][rows][cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WinoDomainTensor {
    n: usize,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl WinoDomainTensor {
    pub fn new(n: usize, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * n * rows * cols {
            return Err(WinoError::InvalidShape(format!(
                "{} values for {}x{}x{}",
                data.len(),
                n * n,
                rows,
                cols
            )));
        }
        Ok(WinoDomainTensor { n, rows, cols, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn taps(&self) -> usize {
        self.n * self.n
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn tap(&self, t: usize) -> &[f32] {
        &self.data[t * self.rows * self.cols..(t + 1) * self.rows * self.cols]
    }
}

/// Reorders `[rows][cols][taps]` blocks into tap-major storage.
fn to_tap_major(n: usize, rows: usize, cols: usize, blocks: &[f32]) -> WinoDomainTensor {
    let taps = n * n;
    let mut data = vec![0.0f32; blocks.len()];
    for (rc, block) in blocks.chunks_exact(taps).enumerate() {
        for (t, &v) in block.iter().enumerate() {
            data[t * rows * cols + rc] = v;
        }
    }
    WinoDomainTensor { n, rows, cols, data }
}

fn f64_matmul_into(a: &Mat, x: &[f64], inner: usize, out_cols: usize, out: &mut [f64]) {
    // out (a.rows x out_cols) = a (a.rows x inner) * x (inner x out_cols)
    for i in 0..a.rows() {
        for j in 0..out_cols {
            out[i * out_cols + j] = (0..inner).map(|k| a[(i, k)] * x[k * out_cols + j]).sum();
        }
    }
}

/// `lhs * x * lhs^T` for a small square or rectangular `lhs`.
fn sandwich(lhs: &Mat, x: &[f64], xn: usize) -> Vec<f64> {
    let r = lhs.rows();
    let mut t = vec![0.0; r * xn];
    f64_matmul_into(lhs, x, xn, xn, &mut t);
    let mut out = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..r {
            out[i * r + j] = (0..xn).map(|k| t[i * xn + k] * lhs[(j, k)]).sum();
        }
    }
    out
}

/// `G w G^T` per `(k, c)` in f64, stored as f32 `[tap][K][C]`.
pub fn weight_transform(w: &Tensor, t: &WinogradTransform) -> Result<WinoDomainTensor> {
    let dims = w.dims();
    let r = t.r();
    if dims.len() != 4 || dims[2] != r || dims[3] != r {
        return Err(WinoError::InvalidShape(format!("filter {dims:?} is not [K, C, {r}, {r}]")));
    }
    w.ensure_finite("weight_transform input")?;
    let (k, c, n) = (dims[0], dims[1], t.n());
    let mut blocks = vec![0.0f32; k * c * n * n];
    blocks
        .par_chunks_mut(n * n)
        .zip(w.data().par_chunks(r * r))
        .for_each(|(dst, f)| {
            let f: Vec<f64> = f.iter().map(|&v| v as f64).collect();
            for (d, v) in dst.iter_mut().zip(sandwich(t.g(), &f, r)) {
                *d = v as f32;
            }
        });
    Ok(to_tap_major(n, k, c, &blocks))
}

/// `B^T x B` per `(tile, channel)` without quantization, `[tap][P][C]`.
pub fn input_transform_fp(x: &Tensor, plan: &WinoPlan) -> Result<WinoDomainTensor> {
    x.ensure_finite("input_transform input")?;
    let n = plan.n();
    let mut tiles = plan.extract_tiles(x);
    let bt = plan.transform.b_t();
    tiles.par_chunks_mut(n * n).for_each(|tile| {
        let xd: Vec<f64> = tile.iter().map(|&v| v as f64).collect();
        for (d, v) in tile.iter_mut().zip(sandwich(bt, &xd, n)) {
            *d = v as f32;
        }
    });
    Ok(to_tap_major(n, plan.tiles(), plan.shape.c_in, &tiles))
}

/// Per tap `Y = X W^T` with f64 accumulation: `[tap][P][K]`.
pub fn hadamard_fp(x: &WinoDomainTensor, w: &WinoDomainTensor) -> Result<WinoDomainTensor> {
    if x.n != w.n || x.cols != w.cols {
        return Err(WinoError::InvalidShape(format!(
            "hadamard operands: {} taps x {} ch vs {} taps x {} ch",
            x.taps(),
            x.cols,
            w.taps(),
            w.cols
        )));
    }
    let (p, k, c) = (x.rows, w.rows, x.cols);
    let mut data = vec![0.0f32; x.taps() * p * k];
    data.par_chunks_mut(p * k).enumerate().for_each(|(t, out)| {
        let (xt, wt) = (x.tap(t), w.tap(t));
        for i in 0..p {
            let xi = &xt[i * c..(i + 1) * c];
            for j in 0..k {
                let wj = &wt[j * c..(j + 1) * c];
                out[i * k + j] = xi.iter().zip(wj).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
            }
        }
    });
    Ok(WinoDomainTensor {
        n: x.n,
        rows: p,
        cols: k,
        data,
    })
}

/// Gathers the `n x n` tap tile of `(row, col)` from a tap-major tensor.
fn gather_tile(y: &WinoDomainTensor, row: usize, col: usize, out: &mut [f32]) {
    let stride = y.rows * y.cols;
    for (t, o) in out.iter_mut().enumerate() {
        *o = y.data[t * stride + row * y.cols + col];
    }
}

/// `A^T Y A` per `(tile, channel)` then untile.
pub fn output_transform_fp(y: &WinoDomainTensor, plan: &WinoPlan) -> Result<Tensor> {
    let (n, m, k) = (plan.n(), plan.m(), plan.shape.c_out);
    if y.n != n || y.rows != plan.tiles() || y.cols != k {
        return Err(WinoError::InvalidShape("Winograd-domain output does not match plan".into()));
    }
    let at = plan.transform.a_t();
    let mut tiles = vec![0.0f32; plan.tiles() * k * m * m];
    tiles.par_chunks_mut(k * m * m).enumerate().for_each(|(p, out)| {
        let mut buf = vec![0.0f32; n * n];
        for c in 0..k {
            gather_tile(y, p, c, &mut buf);
            let yd: Vec<f64> = buf.iter().map(|&v| v as f64).collect();
            for (d, v) in out[c * m * m..(c + 1) * m * m].iter_mut().zip(sandwich(at, &yd, n)) {
                *d = v as f32;
            }
        }
    });
    Ok(plan.untile(&tiles))
}

/// Result of a Winograd convolution plus its Winograd-domain output `Y`
/// (before any output-stage quantization).
#[derive(Debug, Clone)]
pub struct WinoOutput {
    pub y: Tensor,
    pub y_domain: WinoDomainTensor,
}

pub fn wino_forward(x: &Tensor, w: &Tensor, t: &WinogradTransform, mode: Mode, padding: usize, cfg: &WinoConfig) -> Result<WinoOutput> {
    let shape = ConvShape::from_tensors(x, w, padding)?;
    let plan = WinoPlan::new(t, shape)?;
    shape.check(x, w)?;
    match mode {
        Mode::Fp => {
            let wd = weight_transform(w, t)?;
            let xd = input_transform_fp(x, &plan)?;
            let yd = hadamard_fp(&xd, &wd)?;
            let y = output_transform_fp(&yd, &plan)?;
            Ok(WinoOutput { y, y_domain: yd })
        }
        Mode::FakeQuant | Mode::Int8 => {
            let arith = if mode == Mode::Int8 { Arith::Int8 } else { Arith::FakeQuant };
            let prepared = prepare_weights(w, t, cfg)?;
            wino_forward_prepared(x, &plan, &prepared, arith, cfg)
        }
    }
}

pub fn wino_conv(x: &Tensor, w: &Tensor, t: &WinogradTransform, mode: Mode, padding: usize, cfg: &WinoConfig) -> Result<Tensor> {
    wino_forward(x, w, t, mode, padding, cfg).map(|o| o.y)
}

/// Quantized forward with weights already transformed, quantized and packed.
pub fn wino_forward_prepared(
    x: &Tensor,
    plan: &WinoPlan,
    w: &PreparedWeights,
    arith: Arith,
    cfg: &WinoConfig,
) -> Result<WinoOutput> {
    cfg.validate()?;
    if x.dims() != plan.shape.input_dims() {
        return Err(WinoError::InvalidShape(format!(
            "input {:?} does not match plan {:?}",
            x.dims(),
            plan.shape
        )));
    }
    let xq = input_transform_q(x, plan, cfg.group_size, arith)?;
    let yd = hadamard_q(&xq, w, arith)?;
    let y = output_transform_q(&yd, plan, arith)?;
    Ok(WinoOutput { y, y_domain: yd })
}

/// Quantizes every tap of a `[tap][rows][cols]` tensor along `cols`.
pub(crate) fn quantize_taps(d: &WinoDomainTensor, group_size: usize, bits: crate::quant::Bits) -> Result<Vec<GroupQuantized>> {
    (0..d.taps())
        .into_par_iter()
        .map(|t| GroupQuantized::from_matrix(d.rows, d.cols, d.tap(t), group_size, bits))
        .collect()
}
