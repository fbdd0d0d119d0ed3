//! Differentiable f64 model of the quantized Winograd pipeline.
//!
//! The forward pass quantizes at the same places and granularities as the
//! engine. Each quantizer is `x_hat = s * round(x / s)` with
//! `s = |x_j*| / c_max`, `j*` the group's argmax. Rounding is straight-through
//! (derivative 1) and `s` is differentiated through `x_j*`, so
//!
//! ```text
//! dL/dx_i = g_i + [i == j*] * sign(x_j*) / c_max * sum_k g_k * r_k
//! ```
//!
//! with `r_k = round(x_k / s) - x_k / s`. Min-max scaling never clamps.
//!
//! [`QuantMode::Frozen`] replays the residuals and argmax indices recorded
//! by a [`QuantMode::Round`] pass: `x_hat = x + |x_j*| / c_max * r`. That
//! function is smooth and the formula above is its exact gradient, which is
//! what the finite-difference check exercises. [`QuantMode::Off`] removes
//! every quantizer.

use crate::conv_ref::{conv_direct_f64, ConvShape};
use crate::error::{Result, WinoError};
use crate::matrix::Mat;
use crate::quant::{sqnr_from_powers, Bits, SQNR_CAP_DB};
use crate::tensor::Tensor;
use crate::transforms::WinogradTransform;
use crate::wino::{WinoConfig, WinoPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Round,
    Frozen,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `-SQNR` in dB.
    NegSqnr,
    /// `sum (y_hat - y)^2`.
    SquaredError,
}

/// Residuals and argmax indices of one quantizer site.
#[derive(Debug, Clone, Default)]
struct Site {
    res: Vec<f64>,
    idx: Vec<usize>,
}

/// Every quantizer site of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    b: Site,
    x_in: Site,
    t1: Site,
    x: Site,
    w: Site,
    y: Site,
    a: Site,
    t2: Site,
}

/// Groups of a `[rows][row_len]` buffer: consecutive `gs`-chunks of a row.
fn groups(len: usize, row_len: usize, gs: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..len / row_len).flat_map(move |r| {
        let base = r * row_len;
        (0..row_len.div_ceil(gs)).map(move |g| base + g * gs..base + ((g + 1) * gs).min(row_len))
    })
}

fn quant_fwd(x: &[f64], row_len: usize, gs: usize, c: f64, mode: QuantMode, site: &mut Site) -> Vec<f64> {
    if mode == QuantMode::Off {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    if mode == QuantMode::Round {
        site.res = vec![0.0; x.len()];
        site.idx.clear();
    }
    for (gi, span) in groups(x.len(), row_len, gs).enumerate() {
        let xs = &x[span.clone()];
        let j = match mode {
            QuantMode::Round => {
                let j = xs
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if v.abs() > xs[best].abs() { i } else { best });
                site.idx.push(j);
                j
            }
            _ => site.idx[gi],
        };
        let s = xs[j].abs() / c;
        let (o, r) = (&mut out[span.clone()], &mut site.res[span]);
        if s == 0.0 {
            o.copy_from_slice(xs);
            continue;
        }
        for i in 0..xs.len() {
            if mode == QuantMode::Round {
                let u = xs[i] / s;
                let q = u.round_ties_even().clamp(-c, c);
                r[i] = q - u;
                o[i] = s * q;
            } else {
                o[i] = xs[i] + s * r[i];
            }
        }
    }
    out
}

/// In-place backward of [`quant_fwd`]: `g` arrives as `dL/dx_hat`.
fn quant_bwd(g: &mut [f64], x: &[f64], row_len: usize, gs: usize, c: f64, mode: QuantMode, site: &Site) {
    if mode == QuantMode::Off {
        return;
    }
    for (gi, span) in groups(x.len(), row_len, gs).enumerate() {
        let j = site.idx[gi];
        let xj = x[span.start + j];
        if xj == 0.0 {
            continue;
        }
        let dot: f64 = g[span.clone()].iter().zip(&site.res[span.clone()]).map(|(a, b)| a * b).sum();
        g[span.start + j] += xj.signum() / c * dot;
    }
}

/// `out[i][j] = sum_k a[i][k] * b[j][k]` for row-major `a: r x k`, `b: c x k`.
fn mul_abt(a: &[f64], b: &[f64], r: usize, k: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..c {
            out[i * c + j] = ai.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
}

/// Gradients with respect to the three transform matrices.
#[derive(Debug, Clone)]
pub struct MatGrads {
    pub a_t: Mat,
    pub b_t: Mat,
    pub g: Mat,
}

/// One layer with a fixed input batch and its FP64 reference output.
#[derive(Debug, Clone)]
pub struct LayerProblem {
    pub shape: ConvShape,
    pub x: Tensor,
    pub w: Tensor,
    pub cfg: WinoConfig,
    y_ref: Vec<f64>,
    signal: f64,
}

impl LayerProblem {
    pub fn new(shape: ConvShape, x: Tensor, w: Tensor, cfg: WinoConfig) -> Result<Self> {
        cfg.validate()?;
        let y_ref = conv_direct_f64(&x, &w, &shape)?;
        let signal = y_ref.iter().map(|v| v * v).sum();
        if signal == 0.0 {
            return Err(WinoError::UndefinedMetric("layer reference output is all zeros".into()));
        }
        Ok(LayerProblem {
            shape,
            x,
            w,
            cfg,
            y_ref,
            signal,
        })
    }

    pub fn reference(&self) -> &[f64] {
        &self.y_ref
    }

    /// Objective value only.
    pub fn loss(&self, t: &WinogradTransform, mode: QuantMode, tape: &mut Tape, objective: Objective) -> Result<f64> {
        let y = self.forward(t, mode, tape)?.y;
        Ok(self.objective(&y, objective).0)
    }

    /// Fake-quantized output `[N, K, H', W']` in f64.
    pub fn output(&self, t: &WinogradTransform, mode: QuantMode) -> Result<Vec<f64>> {
        Ok(self.forward(t, mode, &mut Tape::default())?.y)
    }

    /// SQNR of the f64 fake-quant output against the reference.
    pub fn sqnr(&self, t: &WinogradTransform, mode: QuantMode) -> Result<f64> {
        let y = self.output(t, mode)?;
        let noise: f64 = y.iter().zip(&self.y_ref).map(|(a, b)| (a - b) * (a - b)).sum();
        sqnr_from_powers(self.signal, noise)
    }

    fn objective(&self, y: &[f64], objective: Objective) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = y.iter().zip(&self.y_ref).map(|(a, b)| a - b).collect();
        let e: f64 = diff.iter().map(|d| d * d).sum();
        match objective {
            Objective::SquaredError => (e, diff.iter().map(|d| 2.0 * d).collect()),
            Objective::NegSqnr => {
                if e == 0.0 {
                    return (-SQNR_CAP_DB, vec![0.0; y.len()]);
                }
                let k = 10.0 / std::f64::consts::LN_10;
                let loss = k * (e / self.signal).ln();
                (loss, diff.iter().map(|d| k * 2.0 * d / e).collect())
            }
        }
    }

    pub fn loss_and_grad(
        &self,
        t: &WinogradTransform,
        mode: QuantMode,
        tape: &mut Tape,
        objective: Objective,
    ) -> Result<(f64, MatGrads)> {
        let fw = self.forward(t, mode, tape)?;
        let (loss, g_y) = self.objective(&fw.y, objective);
        let grads = self.backward(t, mode, tape, &fw, &g_y);
        Ok((loss, grads))
    }

    fn plan(&self, t: &WinogradTransform) -> Result<WinoPlan> {
        WinoPlan::new(t, self.shape)
    }

    fn forward(&self, t: &WinogradTransform, mode: QuantMode, tape: &mut Tape) -> Result<Forward> {
        let plan = self.plan(t)?;
        let (n, m, r) = (t.n(), t.m(), t.r());
        let (p_count, c_in, k_out) = (plan.tiles(), self.shape.c_in, self.shape.c_out);
        let (nn, pc, pk) = (n * n, p_count * c_in, p_count * k_out);
        let gs = self.cfg.group_size;
        let c8 = Bits::Eight.c_max() as f64;
        let cw = self.cfg.precision.weight_bits().c_max() as f64;

        let bt = t.b_t().as_slice().to_vec();
        let bq = quant_fwd(&bt, n, n, c8, mode, &mut tape.b);
        let at = t.a_t().as_slice().to_vec();
        let aq = quant_fwd(&at, n, n, c8, mode, &mut tape.a);
        let gm = t.g().as_slice().to_vec();

        // input tiles, transposed so each column of x is a row
        let tiles = plan.extract_tiles(&self.x);
        let mut xt = vec![0.0; tiles.len()];
        for (dst, src) in xt.chunks_exact_mut(nn).zip(tiles.chunks_exact(nn)) {
            for k in 0..n {
                for j in 0..n {
                    dst[j * n + k] = src[k * n + j] as f64;
                }
            }
        }
        let xtq = quant_fwd(&xt, n, n, c8, mode, &mut tape.x_in);
        let mut t1 = vec![0.0; pc * nn];
        for (o, xs) in t1.chunks_exact_mut(nn).zip(xtq.chunks_exact(nn)) {
            mul_abt(&bq, xs, n, n, n, o);
        }
        let t1q = quant_fwd(&t1, n, n, c8, mode, &mut tape.t1);
        let mut xw = vec![0.0; pc * nn];
        for (o, ts) in xw.chunks_exact_mut(nn).zip(t1q.chunks_exact(nn)) {
            mul_abt(ts, &bq, n, n, n, o);
        }
        // [P][C][tap] -> [tap][P][C]
        let mut xd = vec![0.0; pc * nn];
        for (pcx, block) in xw.chunks_exact(nn).enumerate() {
            for (tap, &v) in block.iter().enumerate() {
                xd[tap * pc + pcx] = v;
            }
        }
        let xq = quant_fwd(&xd, c_in, gs, c8, mode, &mut tape.x);

        // weights: G w G^T per (k, c) -> [tap][K][C]
        let kc = k_out * c_in;
        let mut gw = vec![0.0; kc * n * r];
        let mut wd = vec![0.0; kc * nn];
        let wdat = self.w.data();
        for f in 0..kc {
            let wf: Vec<f64> = wdat[f * r * r..(f + 1) * r * r].iter().map(|&v| v as f64).collect();
            // gw = G w  (n x r)
            let gwf = &mut gw[f * n * r..(f + 1) * n * r];
            for i in 0..n {
                for j in 0..r {
                    gwf[i * r + j] = (0..r).map(|l| gm[i * r + l] * wf[l * r + j]).sum();
                }
            }
            let mut full = vec![0.0; nn];
            mul_abt(gwf, &gm, n, r, n, &mut full);
            for (tap, v) in full.into_iter().enumerate() {
                wd[tap * kc + f] = v;
            }
        }
        let wq = quant_fwd(&wd, c_in, gs, cw, mode, &mut tape.w);

        // per tap Y = Xq Wq^T
        let mut yd = vec![0.0; nn * pk];
        for tap in 0..nn {
            mul_abt(
                &xq[tap * pc..(tap + 1) * pc],
                &wq[tap * kc..(tap + 1) * kc],
                p_count,
                c_in,
                k_out,
                &mut yd[tap * pk..(tap + 1) * pk],
            );
        }
        // [tap][P][K] -> [P][K][col j][row i]
        let mut yt = vec![0.0; pk * nn];
        for tap in 0..nn {
            let (i, j) = (tap / n, tap % n);
            for q in 0..pk {
                yt[q * nn + j * n + i] = yd[tap * pk + q];
            }
        }
        let ytq = quant_fwd(&yt, n, n, c8, mode, &mut tape.y);
        let mut t2 = vec![0.0; pk * m * n];
        for (o, ys) in t2.chunks_exact_mut(m * n).zip(ytq.chunks_exact(nn)) {
            mul_abt(&aq, ys, m, n, n, o);
        }
        let t2q = quant_fwd(&t2, n, n, c8, mode, &mut tape.t2);
        let mut o = vec![0.0; pk * m * m];
        for (dst, ts) in o.chunks_exact_mut(m * m).zip(t2q.chunks_exact(m * n)) {
            mul_abt(ts, &aq, m, n, m, dst);
        }
        let y = untile_f64(&plan, &o);
        Ok(Forward {
            bt,
            bq,
            at,
            aq,
            gw,
            t1,
            t1q,
            xtq,
            xd,
            xq,
            wd,
            wq,
            yt,
            ytq,
            t2,
            t2q,
            y,
        })
    }

    fn backward(&self, t: &WinogradTransform, mode: QuantMode, tape: &Tape, fw: &Forward, g_y: &[f64]) -> MatGrads {
        let plan = self.plan(t).expect("forward succeeded with this plan");
        let (n, m, r) = (t.n(), t.m(), t.r());
        let (p_count, c_in, k_out) = (plan.tiles(), self.shape.c_in, self.shape.c_out);
        let (nn, pc, pk, kc) = (n * n, p_count * c_in, p_count * k_out, k_out * c_in);
        let gs = self.cfg.group_size;
        let c8 = Bits::Eight.c_max() as f64;
        let cw = self.cfg.precision.weight_bits().c_max() as f64;
        let gm = t.g().as_slice();

        let g_o = tile_grad_f64(&plan, g_y);
        let mut g_aq = vec![0.0; m * n];
        // o = T2q Aq^T
        let mut g_t2 = vec![0.0; pk * m * n];
        for q in 0..pk {
            let go = &g_o[q * m * m..(q + 1) * m * m];
            let t2q = &fw.t2q[q * m * n..(q + 1) * m * n];
            let gt = &mut g_t2[q * m * n..(q + 1) * m * n];
            for i in 0..m {
                for j in 0..m {
                    let g = go[i * m + j];
                    if g == 0.0 {
                        continue;
                    }
                    for tp in 0..n {
                        gt[i * n + tp] += g * fw.aq[j * n + tp];
                        g_aq[j * n + tp] += g * t2q[i * n + tp];
                    }
                }
            }
        }
        quant_bwd(&mut g_t2, &fw.t2, n, n, c8, mode, &tape.t2);
        // T2 = Aq YTq^T
        let mut g_yt = vec![0.0; pk * nn];
        for q in 0..pk {
            let gt = &g_t2[q * m * n..(q + 1) * m * n];
            let ys = &fw.ytq[q * nn..(q + 1) * nn];
            let gys = &mut g_yt[q * nn..(q + 1) * nn];
            for i in 0..m {
                for j in 0..n {
                    let g = gt[i * n + j];
                    for tp in 0..n {
                        g_aq[i * n + tp] += g * ys[j * n + tp];
                        gys[j * n + tp] += g * fw.aq[i * n + tp];
                    }
                }
            }
        }
        quant_bwd(&mut g_yt, &fw.yt, n, n, c8, mode, &tape.y);
        let mut g_yd = vec![0.0; nn * pk];
        for tap in 0..nn {
            let (i, j) = (tap / n, tap % n);
            for q in 0..pk {
                g_yd[tap * pk + q] = g_yt[q * nn + j * n + i];
            }
        }
        // Y = Xq Wq^T per tap
        let mut g_xq = vec![0.0; nn * pc];
        let mut g_wq = vec![0.0; nn * kc];
        for tap in 0..nn {
            let gy = &g_yd[tap * pk..(tap + 1) * pk];
            let xq = &fw.xq[tap * pc..(tap + 1) * pc];
            let wq = &fw.wq[tap * kc..(tap + 1) * kc];
            let gx = &mut g_xq[tap * pc..(tap + 1) * pc];
            for p in 0..p_count {
                for k in 0..k_out {
                    let g = gy[p * k_out + k];
                    let wk = &wq[k * c_in..(k + 1) * c_in];
                    for (d, &w) in gx[p * c_in..(p + 1) * c_in].iter_mut().zip(wk) {
                        *d += g * w;
                    }
                }
            }
            let gw = &mut g_wq[tap * kc..(tap + 1) * kc];
            for k in 0..k_out {
                for p in 0..p_count {
                    let g = gy[p * k_out + k];
                    let xp = &xq[p * c_in..(p + 1) * c_in];
                    for (d, &x) in gw[k * c_in..(k + 1) * c_in].iter_mut().zip(xp) {
                        *d += g * x;
                    }
                }
            }
        }
        quant_bwd(&mut g_wq, &fw.wd, c_in, gs, cw, mode, &tape.w);
        quant_bwd(&mut g_xq, &fw.xd, c_in, gs, c8, mode, &tape.x);

        // W = G w G^T: dG += gW (G w)  +  gW^T (G w) ... via gw = G w
        let mut g_g = vec![0.0; n * r];
        let wdat = self.w.data();
        for f in 0..kc {
            let gwf = &fw.gw[f * n * r..(f + 1) * n * r];
            let wf = &wdat[f * r * r..(f + 1) * r * r];
            // gW tile for this filter
            let gwt: Vec<f64> = (0..nn).map(|tap| g_wq[tap * kc + f]).collect();
            for i in 0..n {
                for j in 0..n {
                    let g = gwt[i * n + j];
                    if g == 0.0 {
                        continue;
                    }
                    for l in 0..r {
                        // W[i][j] = sum_l (G w)[i][l] G[j][l]
                        g_g[j * r + l] += g * gwf[i * r + l];
                        // (G w)[i][l] = sum_b G[i][b] w[b][l]
                        let gj = gm[j * r + l];
                        for b in 0..r {
                            g_g[i * r + b] += g * gj * wf[b * r + l] as f64;
                        }
                    }
                }
            }
        }

        // X = T1q Bq^T per (p, c)
        let mut g_bq = vec![0.0; nn];
        let mut g_t1 = vec![0.0; pc * nn];
        for pcx in 0..pc {
            let t1q = &fw.t1q[pcx * nn..(pcx + 1) * nn];
            let gt = &mut g_t1[pcx * nn..(pcx + 1) * nn];
            for i in 0..n {
                for j in 0..n {
                    let g = g_xq[(i * n + j) * pc + pcx];
                    if g == 0.0 {
                        continue;
                    }
                    for k in 0..n {
                        gt[i * n + k] += g * fw.bq[j * n + k];
                        g_bq[j * n + k] += g * t1q[i * n + k];
                    }
                }
            }
        }
        quant_bwd(&mut g_t1, &fw.t1, n, n, c8, mode, &tape.t1);
        // T1 = Bq xTq^T
        for pcx in 0..pc {
            let gt = &g_t1[pcx * nn..(pcx + 1) * nn];
            let xs = &fw.xtq[pcx * nn..(pcx + 1) * nn];
            for i in 0..n {
                for j in 0..n {
                    let g = gt[i * n + j];
                    for k in 0..n {
                        g_bq[i * n + k] += g * xs[j * n + k];
                    }
                }
            }
        }
        quant_bwd(&mut g_bq, &fw.bt, n, n, c8, mode, &tape.b);
        quant_bwd(&mut g_aq, &fw.at, n, n, c8, mode, &tape.a);
        MatGrads {
            a_t: Mat::from_vec(m, n, g_aq),
            b_t: Mat::from_vec(n, n, g_bq),
            g: Mat::from_vec(n, r, g_g),
        }
    }
}

struct Forward {
    bt: Vec<f64>,
    bq: Vec<f64>,
    at: Vec<f64>,
    aq: Vec<f64>,
    gw: Vec<f64>,
    t1: Vec<f64>,
    t1q: Vec<f64>,
    xtq: Vec<f64>,
    xd: Vec<f64>,
    xq: Vec<f64>,
    wd: Vec<f64>,
    wq: Vec<f64>,
    yt: Vec<f64>,
    ytq: Vec<f64>,
    t2: Vec<f64>,
    t2q: Vec<f64>,
    y: Vec<f64>,
}

fn untile_f64(plan: &WinoPlan, tiles: &[f64]) -> Vec<f64> {
    let s = &plan.shape;
    let mut y = vec![0.0; s.n * s.c_out * s.out_h() * s.out_w()];
    for_each_tile_pixel(plan, |src, dst| y[dst] = tiles[src]);
    y
}

fn tile_grad_f64(plan: &WinoPlan, g_y: &[f64]) -> Vec<f64> {
    let m = plan.m();
    let mut g = vec![0.0; plan.tiles() * plan.shape.c_out * m * m];
    for_each_tile_pixel(plan, |src, dst| g[src] = g_y[dst]);
    g
}

/// Calls `f(tile_index, output_index)` for every output pixel covered by a
/// tile, in the layout used by `WinoPlan::untile`.
fn for_each_tile_pixel(plan: &WinoPlan, mut f: impl FnMut(usize, usize)) {
    let (m, s) = (plan.m(), &plan.shape);
    let (oh, ow, k) = (s.out_h(), s.out_w(), s.c_out);
    let per_image = plan.tiles_h * plan.tiles_w;
    for p in 0..plan.tiles() {
        let (b, th, tw) = (p / per_image, (p % per_image) / plan.tiles_w, p % plan.tiles_w);
        for c in 0..k {
            for i in 0..m.min(oh - th * m) {
                for j in 0..m.min(ow - tw * m) {
                    f(((p * k + c) * m + i) * m + j, ((b * k + c) * oh + th * m + i) * ow + tw * m + j);
                }
            }
        }
    }
}

/// Chains matrix gradients to `(d s_b, d s_g)` through `A^T = V_A diag(s_a)`,
/// `B^T = diag(s_b) V_B`, `G = diag(s_g) V_G` and `s_a = 1 / (s_b s_g)`.
pub fn scale_grads(t: &WinogradTransform, g: &MatGrads) -> (Vec<f64>, Vec<f64>) {
    let (v_a, v_b, v_g) = t.factors();
    let s = t.scales();
    let n = t.n();
    let mut d_sb = vec![0.0; n];
    let mut d_sg = vec![0.0; n];
    for i in 0..n {
        let d_sa: f64 = (0..t.m()).map(|row| g.a_t[(row, i)] * v_a[(row, i)]).sum();
        d_sb[i] = g.b_t.row(i).iter().zip(v_b.row(i)).map(|(a, b)| a * b).sum::<f64>()
            - d_sa * s.s_a()[i] / s.s_b()[i];
        d_sg[i] = g.g.row(i).iter().zip(v_g.row(i)).map(|(a, b)| a * b).sum::<f64>()
            - d_sa * s.s_a()[i] / s.s_g()[i];
    }
    (d_sb, d_sg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Precision;
    use crate::tensor::{Fill, RngSpec};
    use crate::transforms::{rescale_transform, standard_transform, Tile};
    use crate::wino::{wino_conv, Mode};

    fn problem(c: usize, k: usize, hw: usize, seed: u64) -> LayerProblem {
        let s = ConvShape::new(1, c, hw, hw, k, 1).unwrap();
        let x = Tensor::new(&s.input_dims(), Fill::Rng(RngSpec::gaussian(0.0, 1.0, seed))).unwrap();
        let w = Tensor::new(&s.weight_dims(), Fill::Rng(RngSpec::gaussian(0.0, 0.1, seed + 1))).unwrap();
        LayerProblem::new(s, x, w, WinoConfig::default()).unwrap()
    }

    #[test]
    fn off_mode_is_exact() {
        for tile in Tile::ALL {
            let p = problem(5, 3, 9, 1);
            let db = p.sqnr(&standard_transform(tile), QuantMode::Off).unwrap();
            assert!(db > 200.0, "{tile}: {db}");
        }
    }

    #[test]
    fn round_mode_tracks_engine() {
        // same quantization decisions as the int8 engine up to f32 storage
        let p = problem(32, 8, 12, 2);
        let t = standard_transform(Tile::F43);
        let ours = p.sqnr(&t, QuantMode::Round).unwrap();
        let eng = wino_conv(&p.x, &p.w, &t, Mode::Int8, 1, &p.cfg).unwrap();
        let ref32: Vec<f32> = p.reference().iter().map(|&v| v as f32).collect();
        let theirs = crate::quant::sqnr_slices(&ref32, eng.data()).unwrap();
        assert!((ours - theirs).abs() < 0.5, "{ours} vs {theirs}");
    }

    #[test]
    fn frozen_replays_round() {
        let p = problem(8, 4, 10, 3);
        let t = standard_transform(Tile::F63);
        let mut tape = Tape::default();
        let a = p.loss(&t, QuantMode::Round, &mut tape, Objective::NegSqnr).unwrap();
        let b = p.loss(&t, QuantMode::Frozen, &mut tape, Objective::NegSqnr).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn frozen_matrix_gradient_matches_finite_differences() {
        let p = LayerProblem {
            cfg: WinoConfig {
                group_size: 32,
                precision: Precision::W8A8,
            },
            ..problem(6, 3, 8, 4)
        };
        let t = rescale_transform(&standard_transform(Tile::F43), &[3.0, -5.0, -6.0, 20.0, 26.0, 1.5], &[0.3, -0.2, -0.15, 0.05, 0.04, 1.1]).unwrap();
        let mut tape = Tape::default();
        p.loss(&t, QuantMode::Round, &mut tape, Objective::NegSqnr).unwrap();
        let (_, g) = p.loss_and_grad(&t, QuantMode::Frozen, &mut tape, Objective::NegSqnr).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for which in 0..3 {
            let base = [t.a_t(), t.b_t(), t.g()][which].clone();
            let analytic = [&g.a_t, &g.b_t, &g.g][which];
            for idx in 0..base.as_slice().len() {
                let eval = |d: f64| {
                    let mut mats = [t.a_t().clone(), t.b_t().clone(), t.g().clone()];
                    mats[which].as_mut_slice()[idx] += d;
                    let [a, b, gg] = mats;
                    let tt = t.with_free_matrices(a, b, gg).unwrap();
                    p.loss(&tt, QuantMode::Frozen, &mut tape.clone(), Objective::NegSqnr).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.as_slice()[idx];
                if fd.abs().max(an.abs()) > 1e-4 {
                    assert!((fd - an).abs() <= 0.02 * fd.abs().max(an.abs()), "mat {which} idx {idx}: fd {fd} analytic {an}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }
}
