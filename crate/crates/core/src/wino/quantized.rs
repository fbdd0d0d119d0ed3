//! Quantized input, Hadamard and output stages.
//!
//! Transform matrices are quantized per row (8-bit, one group per row), so
//! both `B^T` and its transpose used on the right share one set of ints.
//! Inside a tile every small GEMM reduces over an axis whose operand scales
//! are uniform:
//!
//! - input: `x` per column, `T1 = B^T x` requantized per row, `X = T1 B`;
//! - Hadamard: `X` per (tap, tile) and `W` per (tap, out channel), both in
//!   groups along `C_in`;
//! - output: `Y` per column of each (tile, channel) tap tile, `T2 = A^T Y`
//!   requantized per row, `y = T2 A`.
//!
//! Stage outputs are rounded to f32 once per stage.

use rayon::prelude::*;

use super::{quantize_taps, weight_transform, Arith, WinoConfig, WinoDomainTensor, WinoPlan, MAX_TILE};
use crate::error::{Result, WinoError};
use crate::kernels::{gemm_q8_fast, pack_weights, PackedWeights, DEFAULT_VECTOR_WIDTH};
use crate::matrix::Mat;
use crate::quant::{group_params, quantize_into, quantize_value, Bits, GroupQuantized, GroupSpec, Precision};
use crate::tensor::Tensor;
use crate::transforms::WinogradTransform;

/// A transform matrix quantized per row.
struct RowQuant {
    rows: usize,
    cols: usize,
    ints: [[i8; MAX_TILE]; MAX_TILE],
    scales: [f32; MAX_TILE],
}

impl RowQuant {
    fn new(m: &Mat) -> Self {
        let mut q = RowQuant {
            rows: m.rows(),
            cols: m.cols(),
            ints: [[0; MAX_TILE]; MAX_TILE],
            scales: [1.0; MAX_TILE],
        };
        for i in 0..m.rows() {
            let row: Vec<f32> = m.row(i).iter().map(|&v| v as f32).collect();
            q.scales[i] = quantize_into(&row, Bits::Eight, &mut q.ints[i][..m.cols()]);
        }
        q
    }

    fn row(&self, i: usize) -> (&[i8], f32) {
        (&self.ints[i][..self.cols], self.scales[i])
    }
}

/// Dot product of two single-group quantized vectors.
#[inline(always)]
fn qdot(arith: Arith, (a, sa): (&[i8], f32), (b, sb): (&[i8], f32)) -> f32 {
    match arith {
        Arith::Int8 => {
            let isum: i32 = a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum();
            (0.0 + isum as f64 * (sa as f64 * sb as f64)) as f32
        }
        Arith::FakeQuant => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 * sa as f64) * (y as f64 * sb as f64))
            .sum::<f64>() as f32,
    }
}

/// `lhs * tile * lhs^T` with quantization before each GEMM: `tile`
/// (`n x n`) per column, the intermediate per row. `lhs` has `rows` rows;
/// the `rows x rows` result goes to `out`. This is the reference form;
/// [`sandwich`] must agree with it bit for bit.
fn sandwich_dyn(lhs: &RowQuant, n: usize, tile: &[f32], arith: Arith, out: &mut [f32]) {
    let rows = lhs.rows;
    let mut tq = [[0i8; MAX_TILE]; MAX_TILE];
    let mut ts = [0.0f32; MAX_TILE];
    let mut col = [0.0f32; MAX_TILE];
    for j in 0..n {
        for k in 0..n {
            col[k] = tile[k * n + j];
        }
        ts[j] = quantize_into(&col[..n], Bits::Eight, &mut tq[j][..n]);
    }
    let mut t1 = [0.0f32; MAX_TILE];
    let mut t1q = [[0i8; MAX_TILE]; MAX_TILE];
    let mut t1s = [0.0f32; MAX_TILE];
    for i in 0..rows {
        for j in 0..n {
            t1[j] = qdot(arith, lhs.row(i), (&tq[j][..n], ts[j]));
        }
        t1s[i] = quantize_into(&t1[..n], Bits::Eight, &mut t1q[i][..n]);
    }
    for i in 0..rows {
        for j in 0..rows {
            out[i * rows + j] = qdot(arith, (&t1q[i][..n], t1s[i]), lhs.row(j));
        }
    }
}

/// `R x N` transform matrix widened and transposed for [`sandwich`].
struct FixedLhs<const N: usize, const R: usize> {
    rows: [[i32; N]; R],
    /// `cols[k][j] = lhs[j][k]`
    cols: [[i32; R]; N],
    deq_rows: [[f64; N]; R],
    deq_cols: [[f64; R]; N],
    scales: [f32; R],
}

impl<const N: usize, const R: usize> FixedLhs<N, R> {
    fn new(q: &RowQuant) -> Self {
        assert_eq!((q.rows, q.cols), (R, N));
        let mut f = FixedLhs {
            rows: [[0; N]; R],
            cols: [[0; R]; N],
            deq_rows: [[0.0; N]; R],
            deq_cols: [[0.0; R]; N],
            scales: [0.0; R],
        };
        for i in 0..R {
            f.scales[i] = q.scales[i];
            for k in 0..N {
                let v = q.ints[i][k];
                let d = v as f64 * q.scales[i] as f64;
                f.rows[i][k] = v as i32;
                f.cols[k][i] = v as i32;
                f.deq_rows[i][k] = d;
                f.deq_cols[k][i] = d;
            }
        }
        f
    }
}

/// Fixed-size [`sandwich_dyn`] with loops along the contiguous index.
#[inline(always)]
fn sandwich<const N: usize, const R: usize>(lhs: &FixedLhs<N, R>, tile: &[f32], arith: Arith, out: &mut [f32]) {
    let c = Bits::Eight.c_max() as f32;
    let tile: &[f32] = &tile[..N * N];
    // x per column: x[k][j] ~ xq[k][j] * sx[j]
    let mut amax = [0.0f32; N];
    for k in 0..N {
        for j in 0..N {
            amax[j] = amax[j].max(tile[k * N + j].abs());
        }
    }
    let (mut inv, mut sx) = ([0.0f32; N], [0.0f32; N]);
    for j in 0..N {
        (inv[j], sx[j]) = group_params(amax[j], Bits::Eight);
    }
    let mut xq = [[0i32; N]; N];
    for k in 0..N {
        for j in 0..N {
            xq[k][j] = quantize_value(tile[k * N + j], inv[j], c) as i32;
        }
    }
    // T1 = lhs * x, requantized per row
    let mut t1q = [[0i8; N]; R];
    let mut t1s = [0.0f32; R];
    for i in 0..R {
        let mut t1 = [0.0f32; N];
        match arith {
            Arith::Int8 => {
                let mut acc = [0i32; N];
                for k in 0..N {
                    let a = lhs.rows[i][k];
                    for j in 0..N {
                        acc[j] += a * xq[k][j];
                    }
                }
                let sa = lhs.scales[i] as f64;
                for j in 0..N {
                    t1[j] = (0.0 + acc[j] as f64 * (sa * sx[j] as f64)) as f32;
                }
            }
            Arith::FakeQuant => {
                let mut acc = [0.0f64; N];
                for k in 0..N {
                    let a = lhs.deq_rows[i][k];
                    for j in 0..N {
                        acc[j] += a * (xq[k][j] as f64 * sx[j] as f64);
                    }
                }
                for j in 0..N {
                    t1[j] = acc[j] as f32;
                }
            }
        }
        t1s[i] = quantize_into(&t1, Bits::Eight, &mut t1q[i]);
    }
    // out = T1 * lhs^T
    for i in 0..R {
        let o = &mut out[i * R..(i + 1) * R];
        match arith {
            Arith::Int8 => {
                let mut acc = [0i32; R];
                for k in 0..N {
                    let a = t1q[i][k] as i32;
                    for j in 0..R {
                        acc[j] += a * lhs.cols[k][j];
                    }
                }
                let sa = t1s[i] as f64;
                for j in 0..R {
                    o[j] = (0.0 + acc[j] as f64 * (sa * lhs.scales[j] as f64)) as f32;
                }
            }
            Arith::FakeQuant => {
                let mut acc = [0.0f64; R];
                for k in 0..N {
                    let a = t1q[i][k] as f64 * t1s[i] as f64;
                    for j in 0..R {
                        acc[j] += a * lhs.deq_cols[k][j];
                    }
                }
                for j in 0..R {
                    o[j] = acc[j] as f32;
                }
            }
        }
    }
}

/// Applies the sandwich to consecutive `n x n` tiles of `src`, writing
/// consecutive `rows x rows` results to `dst`.
#[inline(always)]
fn sandwich_all(lhs: &RowQuant, n: usize, src: &[f32], dst: &mut [f32], arith: Arith) {
    fn fixed<const N: usize, const R: usize>(lhs: &RowQuant, src: &[f32], dst: &mut [f32], arith: Arith) {
        let f = FixedLhs::<N, R>::new(lhs);
        for (s, d) in src.chunks_exact(N * N).zip(dst.chunks_exact_mut(R * R)) {
            sandwich::<N, R>(&f, s, arith, d);
        }
    }
    match (n, lhs.rows) {
        (6, 6) => fixed::<6, 6>(lhs, src, dst, arith),
        (6, 4) => fixed::<6, 4>(lhs, src, dst, arith),
        (8, 8) => fixed::<8, 8>(lhs, src, dst, arith),
        (8, 6) => fixed::<8, 6>(lhs, src, dst, arith),
        (_, r) => {
            for (s, d) in src.chunks_exact(n * n).zip(dst.chunks_exact_mut(r * r)) {
                sandwich_dyn(lhs, n, s, arith, d);
            }
        }
    }
}

/// One tile's channels: `src` is `[C][n*n]`, `dst` is `[n*n][C]`.
fn input_tiles(bq: &RowQuant, src: &[f32], dst: &mut [f32], n: usize, c_in: usize, arith: Arith) {
    let mut tmp = vec![0.0f32; src.len()];
    sandwich_all(bq, n, src, &mut tmp, arith);
    for (c, block) in tmp.chunks_exact(n * n).enumerate() {
        for (t, &v) in block.iter().enumerate() {
            dst[t * c_in + c] = v;
        }
    }
}

fn output_tile(aq: &RowQuant, y: &WinoDomainTensor, p: usize, out: &mut [f32], arith: Arith) {
    let n = y.n();
    let k = y.cols();
    let mut buf = vec![0.0f32; k * n * n];
    for (c, b) in buf.chunks_exact_mut(n * n).enumerate() {
        super::gather_tile(y, p, c, b);
    }
    sandwich_all(aq, n, &buf, out, arith);
}

/// Runs `f` compiled with AVX2 when the CPU has it. Integer sums are exact
/// and no float operation is reassociated, so results do not depend on the
/// path taken.
#[inline(always)]
fn dispatch<F: FnOnce()>(f: F) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        #[target_feature(enable = "avx2")]
        unsafe fn avx2<F: FnOnce()>(f: F) {
            f()
        }
        // SAFETY: the feature was detected at runtime.
        unsafe { avx2(f) };
        return;
    }
    f()
}

/// Quantized Winograd-domain operand: one `rows x C_in` matrix per tap,
/// grouped along `C_in`.
#[derive(Debug, Clone)]
pub struct WinoDomainQ {
    pub n: usize,
    pub taps: Vec<GroupQuantized>,
}

impl WinoDomainQ {
    pub fn dequantize(&self) -> WinoDomainTensor {
        let (rows, cols) = (self.taps[0].rows(), self.taps[0].cols());
        let data = self
            .taps
            .iter()
            .flat_map(|q| q.dequantize_matrix_f64().into_iter().map(|v| v as f32))
            .collect();
        WinoDomainTensor::new(self.n, rows, cols, data).expect("tap matrices share a shape")
    }

    fn group_size(&self) -> usize {
        self.taps[0].group_size()
    }
}

/// `B^T x B` per tile and channel in quantized arithmetic, then grouped
/// requantization along `C_in`.
pub fn input_transform_q(x: &Tensor, plan: &WinoPlan, group_size: usize, arith: Arith) -> Result<WinoDomainQ> {
    x.ensure_finite("input_transform_q input")?;
    GroupSpec::for_extent(group_size, plan.shape.c_in, 0)?;
    let n = plan.n();
    let bq = RowQuant::new(plan.transform.b_t());
    let c_in = plan.shape.c_in;
    let tiles = plan.extract_tiles(x);
    // per tile: [C][tap] -> [tap][C], then tiles -> taps with whole-row copies
    let mut per_tile = vec![0.0f32; tiles.len()];
    per_tile
        .par_chunks_mut(n * n * c_in)
        .zip(tiles.par_chunks(n * n * c_in))
        .for_each(|(dst, src)| dispatch(|| input_tiles(&bq, src, dst, n, c_in, arith)));
    let p_count = plan.tiles();
    let mut data = vec![0.0f32; tiles.len()];
    for (p, block) in per_tile.chunks_exact(n * n * c_in).enumerate() {
        for (t, row) in block.chunks_exact(c_in).enumerate() {
            data[(t * p_count + p) * c_in..][..c_in].copy_from_slice(row);
        }
    }
    let xd = WinoDomainTensor::new(n, p_count, c_in, data)?;
    Ok(WinoDomainQ {
        n,
        taps: quantize_taps(&xd, group_size, Bits::Eight)?,
    })
}

/// Weights transformed offline in f64, quantized per (tap, out channel)
/// along `C_in`, and packed for the fast kernel.
#[derive(Debug, Clone)]
pub struct PreparedWeights {
    pub n: usize,
    pub precision: Precision,
    pub taps: Vec<GroupQuantized>,
    pub packed: Vec<PackedWeights>,
}

impl PreparedWeights {
    pub fn from_domain(w: &WinoDomainTensor, cfg: &WinoConfig) -> Result<Self> {
        GroupSpec::for_extent(cfg.group_size, w.cols(), 0)?;
        let taps = quantize_taps(w, cfg.group_size, cfg.precision.weight_bits())?;
        let packed = taps
            .iter()
            .map(|q| pack_weights(q, DEFAULT_VECTOR_WIDTH))
            .collect::<Result<_>>()?;
        Ok(PreparedWeights {
            n: w.n(),
            precision: cfg.precision,
            taps,
            packed,
        })
    }
}

pub fn prepare_weights(w: &Tensor, t: &WinogradTransform, cfg: &WinoConfig) -> Result<PreparedWeights> {
    PreparedWeights::from_domain(&weight_transform(w, t)?, cfg)
}

/// Per tap `Y = X W^T` over grouped int8 operands. Returns `Y` in f32,
/// `[tap][P][K]`; the output stage requantizes it.
pub fn hadamard_q(x: &WinoDomainQ, w: &PreparedWeights, arith: Arith) -> Result<WinoDomainTensor> {
    if x.n != w.n || x.taps.len() != w.taps.len() {
        return Err(WinoError::InvalidShape(format!(
            "hadamard operands have {} and {} taps",
            x.taps.len(),
            w.taps.len()
        )));
    }
    if x.group_size() != w.taps[0].group_size() {
        return Err(WinoError::InvalidSpec(format!(
            "activation group {} != weight group {}",
            x.group_size(),
            w.taps[0].group_size()
        )));
    }
    let (p, k) = (x.taps[0].rows(), w.taps[0].rows());
    let per_tap: Vec<Vec<f32>> = (0..x.taps.len())
        .into_par_iter()
        .map(|t| match arith {
            Arith::Int8 => gemm_q8_fast(&x.taps[t], &w.packed[t]).map(Tensor::into_data),
            Arith::FakeQuant => fake_gemm(&x.taps[t], &w.taps[t]),
        })
        .collect::<Result<_>>()?;
    WinoDomainTensor::new(x.n, p, k, per_tap.concat())
}

fn fake_gemm(a: &GroupQuantized, b: &GroupQuantized) -> Result<Vec<f32>> {
    if a.cols() != b.cols() {
        return Err(WinoError::InvalidShape("reduction extents differ".into()));
    }
    let (da, db, c) = (a.dequantize_matrix_f64(), b.dequantize_matrix_f64(), a.cols());
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for i in 0..a.rows() {
        let ai = &da[i * c..(i + 1) * c];
        for j in 0..b.rows() {
            let bj = &db[j * c..(j + 1) * c];
            out.push(ai.iter().zip(bj).map(|(x, y)| x * y).sum::<f64>() as f32);
        }
    }
    Ok(out)
}

/// `A^T Y A` per tile and channel in quantized arithmetic, then untile.
pub fn output_transform_q(y: &WinoDomainTensor, plan: &WinoPlan, arith: Arith) -> Result<Tensor> {
    let (n, m, k) = (plan.n(), plan.m(), plan.shape.c_out);
    if y.n() != n || y.rows() != plan.tiles() || y.cols() != k {
        return Err(WinoError::InvalidShape("Winograd-domain output does not match plan".into()));
    }
    if let Some(v) = y.data().iter().find(|v| !v.is_finite()) {
        return Err(WinoError::Compute(format!("non-finite Winograd-domain value {v}")));
    }
    let aq = RowQuant::new(plan.transform.a_t());
    let mut tiles = vec![0.0f32; plan.tiles() * k * m * m];
    tiles
        .par_chunks_mut(k * m * m)
        .enumerate()
        .for_each(|(p, out)| dispatch(|| output_tile(&aq, y, p, out, arith)));
    Ok(plan.untile(&tiles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngSpec;
    use crate::transforms::{standard_transform, Tile};

    #[test]
    fn fixed_sandwich_matches_reference() {
        let mut rng = RngSpec::gaussian(0.0, 1.0, 42).sampler();
        for tile in Tile::ALL {
            let t = standard_transform(tile);
            let n = t.n();
            for lhs in [RowQuant::new(t.b_t()), RowQuant::new(t.a_t())] {
                let r = lhs.rows;
                let mut src = vec![0.0f32; 200 * n * n];
                rng.fill_f32(&mut src);
                // an all-zero tile and a tile with an all-zero column
                src[..n * n].iter_mut().for_each(|v| *v = 0.0);
                (0..n).for_each(|k| src[n * n + k * n + 2] = 0.0);
                for arith in [Arith::Int8, Arith::FakeQuant] {
                    let mut fast = vec![0.0f32; 200 * r * r];
                    sandwich_all(&lhs, n, &src, &mut fast, arith);
                    let mut slow = vec![0.0f32; 200 * r * r];
                    for (s, d) in src.chunks_exact(n * n).zip(slow.chunks_exact_mut(r * r)) {
                        sandwich_dyn(&lhs, n, s, arith, d);
                    }
                    assert_eq!(fast, slow, "{tile} rows={r} {arith:?}");
                }
            }
        }
    }
}
