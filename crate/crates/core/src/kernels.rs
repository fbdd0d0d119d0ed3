//! Group-wise quantized int8 GEMM.
//!
//! Both kernels compute `out[i][j] = sum_k a[i][k] * b[j][k]` where `a` is
//! `M x Kred` and `b` is `N x Kred`, both grouped along `Kred` with the same
//! group size. Each group is reduced exactly in i32; the partial is then
//! scaled by `sa * sb` and accumulated in f64, groups in ascending order,
//! and the sum is rounded to f32 once. The fast kernel performs the identical
//! sequence of floating-point operations, so its output is bit-identical.

use rayon::prelude::*;

use crate::error::{Result, WinoError};
use crate::quant::{Bits, GroupQuantized};
use crate::tensor::Tensor;

pub const DEFAULT_VECTOR_WIDTH: usize = 16;

/// Rows of `a` processed together so each packed weight load is reused.
const MR: usize = 4;

/// Largest group size whose i32 partial cannot overflow.
pub const MAX_GROUP_SIZE: usize = (i32::MAX as usize) / (127 * 127);

#[inline(always)]
fn accumulate(acc: f64, isum: i32, sa: f32, sb: f32) -> f64 {
    acc + isum as f64 * (sa as f64 * sb as f64)
}

fn check_operands(a: &GroupQuantized, b_cols: usize, b_group: usize) -> Result<()> {
    if a.cols() != b_cols {
        return Err(WinoError::InvalidShape(format!(
            "gemm reduction extents differ: {} vs {b_cols}",
            a.cols()
        )));
    }
    if a.group_size() != b_group {
        return Err(WinoError::InvalidSpec(format!(
            "gemm group sizes differ: {} vs {b_group}",
            a.group_size()
        )));
    }
    assert!(
        a.group_size() <= MAX_GROUP_SIZE,
        "group size {} could overflow the i32 accumulator",
        a.group_size()
    );
    Ok(())
}

/// Reference kernel. Returns an `[M, N]` tensor.
pub fn gemm_q8_scalar(a: &GroupQuantized, b: &GroupQuantized) -> Result<Tensor> {
    check_operands(a, b.cols(), b.group_size())?;
    let (m, n, gs) = (a.rows(), b.rows(), a.group_size());
    let groups = a.groups_per_row();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let (ai, sa) = (a.row_ints(i), a.row_scales(i));
        for j in 0..n {
            let (bj, sb) = (b.row_ints(j), b.row_scales(j));
            let mut acc = 0.0f64;
            for g in 0..groups {
                let mut isum = 0i32;
                for k in g * gs..(g + 1) * gs {
                    isum += ai[k] as i32 * bj[k] as i32;
                }
                acc = accumulate(acc, isum, sa[g], sb[g]);
            }
            out.push(acc as f32);
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Weights reordered into panels of `vector_width` output channels.
///
/// Element `i` of group `g` of output channel `k` lives at
/// `((k / V * groups + g) * group_size + i) * V + k % V` with
/// `V = vector_width`; its group scale lives at `(k / V * groups + g) * V + k % V`.
/// Channels are zero-padded up to a multiple of `V` (padding scales are 1).
/// With `V = 1` the layout equals the unpacked row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights {
    vector_width: usize,
    source: GroupQuantized,
    panels: usize,
    ints: Vec<i8>,
    scales: Vec<f32>,
}

impl PackedWeights {
    pub fn vector_width(&self) -> usize {
        self.vector_width
    }

    pub fn rows(&self) -> usize {
        self.source.rows()
    }

    pub fn cols(&self) -> usize {
        self.source.cols()
    }

    pub fn group_size(&self) -> usize {
        self.source.group_size()
    }

    pub fn bits(&self) -> Bits {
        self.source.bits()
    }

    pub fn panels(&self) -> usize {
        self.panels
    }

    pub fn ints(&self) -> &[i8] {
        &self.ints
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn offset(&self, k: usize, g: usize, i: usize) -> usize {
        let v = self.vector_width;
        let groups = self.source.groups_per_row();
        ((k / v * groups + g) * self.group_size() + i) * v + k % v
    }

    pub fn scale_offset(&self, k: usize, g: usize) -> usize {
        let v = self.vector_width;
        (k / v * self.source.groups_per_row() + g) * v + k % v
    }
}

pub fn pack_weights(wq: &GroupQuantized, vector_width: usize) -> Result<PackedWeights> {
    if vector_width == 0 {
        return Err(WinoError::InvalidSpec("vector width must be positive".into()));
    }
    let v = vector_width;
    let (n, gs, groups) = (wq.rows(), wq.group_size(), wq.groups_per_row());
    let panels = n.div_ceil(v);
    let mut p = PackedWeights {
        vector_width: v,
        source: wq.clone(),
        panels,
        ints: vec![0; panels * v * wq.padded_cols()],
        scales: vec![1.0; panels * v * groups],
    };
    for k in 0..n {
        let (row, sc) = (wq.row_ints(k), wq.row_scales(k));
        for g in 0..groups {
            for i in 0..gs {
                let off = p.offset(k, g, i);
                p.ints[off] = row[g * gs + i];
            }
            let off = p.scale_offset(k, g);
            p.scales[off] = sc[g];
        }
    }
    Ok(p)
}

pub fn unpack_weights(p: &PackedWeights) -> GroupQuantized {
    let src = &p.source;
    let (n, gs, groups) = (src.rows(), src.group_size(), src.groups_per_row());
    let mut ints = Vec::with_capacity(n * src.padded_cols());
    let mut scales = Vec::with_capacity(n * groups);
    for k in 0..n {
        for g in 0..groups {
            ints.extend((0..gs).map(|i| p.ints[p.offset(k, g, i)]));
        }
        scales.extend((0..groups).map(|g| p.scales[p.scale_offset(k, g)]));
    }
    let mut q = GroupQuantized::from_parts(n, src.cols(), gs, src.bits(), ints, scales)
        .expect("packed payload came from a valid GroupQuantized");
    q.set_layout(src.dims().to_vec(), src.axis());
    q
}

/// Optimized kernel, bit-identical to [`gemm_q8_scalar`]. Row blocks of `a`
/// run in parallel on the current rayon pool.
pub fn gemm_q8_fast(a: &GroupQuantized, b: &PackedWeights) -> Result<Tensor> {
    check_operands(a, b.cols(), b.group_size())?;
    let (m, n) = (a.rows(), b.rows());
    let mut out = vec![0.0f32; m * n];
    out.par_chunks_mut(MR * n).enumerate().for_each(|(blk, chunk)| {
        let r0 = blk * MR;
        let rows = chunk.len() / n;
        match rows {
            4 => run_block::<4>(a, b, r0, chunk),
            3 => run_block::<3>(a, b, r0, chunk),
            2 => run_block::<2>(a, b, r0, chunk),
            _ => run_block::<1>(a, b, r0, chunk),
        }
    });
    Tensor::from_vec(&[m, n], out)
}

fn run_block<const R: usize>(a: &GroupQuantized, b: &PackedWeights, r0: usize, out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { run_block_avx2::<R>(a, b, r0, out) };
        return;
    }
    run_block_generic::<R>(a, b, r0, out);
}

/// Same code compiled with AVX2 enabled; results are unchanged because the
/// integer sums are exact and the f64 steps are not reassociated.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn run_block_avx2<const R: usize>(a: &GroupQuantized, b: &PackedWeights, r0: usize, out: &mut [f32]) {
    run_block_generic::<R>(a, b, r0, out);
}

#[inline(always)]
fn run_block_generic<const R: usize>(a: &GroupQuantized, b: &PackedWeights, r0: usize, out: &mut [f32]) {
    match b.vector_width {
        4 => block::<R, 4>(a, b, r0, out),
        8 => block::<R, 8>(a, b, r0, out),
        16 => block::<R, 16>(a, b, r0, out),
        32 => block::<R, 32>(a, b, r0, out),
        _ => block_dyn::<R>(a, b, r0, out),
    }
}

/// `R` rows of `a` against every `V`-channel panel of `b`.
#[inline(always)]
fn block<const R: usize, const V: usize>(a: &GroupQuantized, b: &PackedWeights, r0: usize, out: &mut [f32]) {
    let n = b.rows();
    let gs = b.group_size();
    let groups = a.groups_per_row();
    let a_rows: [&[i8]; R] = std::array::from_fn(|r| a.row_ints(r0 + r));
    let a_scales: [&[f32]; R] = std::array::from_fn(|r| a.row_scales(r0 + r));
    for p in 0..b.panels {
        let mut facc = [[0.0f64; V]; R];
        for g in 0..groups {
            let mut acc = [[0i32; V]; R];
            let base = (p * groups + g) * gs * V;
            let panel = &b.ints[base..base + gs * V];
            for (e, bv) in panel.chunks_exact(V).enumerate() {
                let bv: &[i8; V] = bv.try_into().unwrap();
                let k = g * gs + e;
                for r in 0..R {
                    let av = a_rows[r][k] as i32;
                    for v in 0..V {
                        acc[r][v] += av * bv[v] as i32;
                    }
                }
            }
            let sb = &b.scales[(p * groups + g) * V..(p * groups + g + 1) * V];
            for r in 0..R {
                let sa = a_scales[r][g];
                for v in 0..V {
                    facc[r][v] = accumulate(facc[r][v], acc[r][v], sa, sb[v]);
                }
            }
        }
        let lanes = V.min(n - p * V);
        for r in 0..R {
            for v in 0..lanes {
                out[r * n + p * V + v] = facc[r][v] as f32;
            }
        }
    }
}

#[inline(always)]
fn block_dyn<const R: usize>(a: &GroupQuantized, b: &PackedWeights, r0: usize, out: &mut [f32]) {
    let n = b.rows();
    let v_w = b.vector_width;
    let gs = b.group_size();
    let groups = a.groups_per_row();
    let mut acc = vec![0i32; R * v_w];
    let mut facc = vec![0.0f64; R * v_w];
    for p in 0..b.panels {
        facc.iter_mut().for_each(|x| *x = 0.0);
        for g in 0..groups {
            acc.iter_mut().for_each(|x| *x = 0);
            let base = (p * groups + g) * gs * v_w;
            for e in 0..gs {
                let bv = &b.ints[base + e * v_w..base + (e + 1) * v_w];
                for r in 0..R {
                    let av = a.row_ints(r0 + r)[g * gs + e] as i32;
                    for (x, &w) in acc[r * v_w..(r + 1) * v_w].iter_mut().zip(bv) {
                        *x += av * w as i32;
                    }
                }
            }
            let sb = &b.scales[(p * groups + g) * v_w..(p * groups + g + 1) * v_w];
            for r in 0..R {
                let sa = a.row_scales(r0 + r)[g];
                for v in 0..v_w {
                    facc[r * v_w + v] = accumulate(facc[r * v_w + v], acc[r * v_w + v], sa, sb[v]);
                }
            }
        }
        let lanes = v_w.min(n - p * v_w);
        for r in 0..R {
            for v in 0..lanes {
                out[r * n + p * v_w + v] = facc[r * v_w + v] as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Sampler;
    use crate::RngSpec;
    use proptest::prelude::*;

    fn random_q(rows: usize, cols: usize, gs: usize, seed: u64) -> GroupQuantized {
        let mut s = RngSpec::gaussian(0.0, 1.0, seed).sampler();
        let mut data = vec![0.0f32; rows * cols];
        s.fill_f32(&mut data);
        GroupQuantized::from_matrix(rows, cols, &data, gs, Bits::Eight).unwrap()
    }

    fn f64_oracle(a: &GroupQuantized, b: &GroupQuantized) -> Vec<f64> {
        let (da, db) = (a.dequantize_matrix_f64(), b.dequantize_matrix_f64());
        let k = a.cols();
        let mut out = vec![0.0; a.rows() * b.rows()];
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                out[i * b.rows() + j] = (0..k).map(|t| da[i * k + t] * db[j * k + t]).sum();
            }
        }
        out
    }

    #[test]
    fn permutation_product_is_exact() {
        // unit scales by construction: ints are the values themselves
        let n = 5;
        let perm = [2usize, 0, 4, 1, 3];
        let mut a = vec![0i8; n * n];
        let mut b = vec![0i8; n * n];
        for i in 0..n {
            a[i * n + perm[i]] = 1;
            b[i * n + i] = 1;
        }
        let qa = GroupQuantized::from_parts(n, n, n, Bits::Eight, a, vec![1.0; n]).unwrap();
        let qb = GroupQuantized::from_parts(n, n, n, Bits::Eight, b, vec![1.0; n]).unwrap();
        let out = gemm_q8_scalar(&qa, &qb).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(out.data()[i * n + j], (perm[i] == j) as u8 as f32);
            }
        }
    }

    #[test]
    fn one_group_matches_f64_oracle() {
        let a = random_q(7, 50, 50, 1);
        let b = random_q(9, 50, 50, 2);
        let out = gemm_q8_scalar(&a, &b).unwrap();
        let want = f64_oracle(&a, &b);
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = out
            .data()
            .iter()
            .zip(&want)
            .map(|(&o, w)| (o as f64 - w).abs())
            .fold(0.0, f64::max);
        assert!(err / scale < 1e-6);
    }

    #[test]
    fn multi_group_is_sum_of_group_products() {
        let a = random_q(3, 96, 32, 3);
        let b = random_q(4, 96, 32, 4);
        let full = gemm_q8_scalar(&a, &b).unwrap();
        // each group as its own single-group GEMM, summed in f64
        let mut sum = vec![0.0f64; 12];
        for g in 0..3 {
            let slice = |q: &GroupQuantized| {
                let ints: Vec<i8> = (0..q.rows()).flat_map(|r| q.row_ints(r)[g * 32..(g + 1) * 32].to_vec()).collect();
                let sc: Vec<f32> = (0..q.rows()).map(|r| q.row_scales(r)[g]).collect();
                GroupQuantized::from_parts(q.rows(), 32, 32, Bits::Eight, ints, sc).unwrap()
            };
            let part = f64_oracle(&slice(&a), &slice(&b));
            sum.iter_mut().zip(part).for_each(|(s, p)| *s += p);
        }
        for (o, s) in full.data().iter().zip(sum) {
            assert!((*o as f64 - s).abs() <= 1e-6 * s.abs().max(1.0));
        }
    }

    #[test]
    fn mismatched_operands_rejected() {
        let a = random_q(2, 64, 32, 5);
        assert!(matches!(gemm_q8_scalar(&a, &random_q(2, 64, 64, 6)), Err(WinoError::InvalidSpec(_))));
        assert!(matches!(gemm_q8_scalar(&a, &random_q(2, 32, 32, 6)), Err(WinoError::InvalidShape(_))));
        let p = pack_weights(&random_q(2, 64, 64, 6), 16).unwrap();
        assert!(gemm_q8_fast(&a, &p).is_err());
    }

    #[test]
    fn degenerate_one_by_one() {
        let a = GroupQuantized::from_parts(1, 1, 1, Bits::Eight, vec![-3], vec![0.5]).unwrap();
        let b = GroupQuantized::from_parts(1, 1, 1, Bits::Eight, vec![7], vec![0.25]).unwrap();
        let want = -3.0 * 0.5 * 7.0 * 0.25;
        assert_eq!(gemm_q8_scalar(&a, &b).unwrap().data(), &[want]);
        assert_eq!(gemm_q8_fast(&a, &pack_weights(&b, 16).unwrap()).unwrap().data(), &[want]);
    }

    #[test]
    fn width_one_packing_is_identity() {
        let w = random_q(5, 70, 32, 7);
        let p = pack_weights(&w, 1).unwrap();
        assert_eq!(p.ints(), w.ints());
        assert_eq!(p.scales(), w.scales());
    }

    #[test]
    fn packed_offsets_spot_check() {
        let w = random_q(37, 100, 32, 8);
        let p = pack_weights(&w, 16).unwrap();
        let mut s: Sampler = RngSpec::uniform(0.0, 1.0, 9).sampler();
        for _ in 0..10 {
            let k = (s.next_f64() * 37.0) as usize;
            let g = (s.next_f64() * 4.0) as usize;
            let i = (s.next_f64() * 32.0) as usize;
            // independent restatement of the layout formula
            let want = (k / 16) * (4 * 32 * 16) + g * (32 * 16) + i * 16 + k % 16;
            assert_eq!(p.offset(k, g, i), want);
            assert_eq!(p.ints()[want], w.row_ints(k)[g * 32 + i]);
        }
    }

    #[test]
    fn exhaustive_small_shapes_bit_identical() {
        let mut seed = 0;
        for m in 1..=17 {
            for k in 1..=17 {
                for n in 1..=17 {
                    for gs in [k, 8] {
                        seed += 1;
                        let a = random_q(m, k, gs, seed);
                        let b = random_q(n, k, gs, seed ^ 0xabcdef);
                        let want = gemm_q8_scalar(&a, &b).unwrap();
                        for v in [16, 3] {
                            let got = gemm_q8_fast(&a, &pack_weights(&b, v).unwrap()).unwrap();
                            assert_eq!(got.data(), want.data(), "m={m} k={k} n={n} gs={gs} v={v}");
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pack_roundtrip(rows in 1usize..40, cols in 1usize..300, gs_i in 0usize..4, v in 1usize..33, seed in any::<u64>()) {
            let gs = [32, 64, 128, 256][gs_i];
            let w = random_q(rows, cols, gs, seed);
            prop_assert_eq!(unpack_weights(&pack_weights(&w, v).unwrap()), w);
        }

        #[test]
        fn large_shapes_bit_identical(m in 1usize..70, k in 1usize..600, n in 1usize..70, gs_i in 0usize..4, seed in any::<u64>()) {
            let gs = [32, 64, 128, 256][gs_i];
            let a = random_q(m, k, gs, seed);
            let b = random_q(n, k, gs, seed.wrapping_add(1));
            let want = gemm_q8_scalar(&a, &b).unwrap();
            let got = gemm_q8_fast(&a, &pack_weights(&b, DEFAULT_VECTOR_WIDTH).unwrap()).unwrap();
            prop_assert_eq!(got.data(), want.data());
        }
    }
}
