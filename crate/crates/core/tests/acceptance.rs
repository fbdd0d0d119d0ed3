//! Acceptance criteria AC1-AC10, one PASS/FAIL line each.
//!
//! AC10 is informational: it is printed but never fails the run.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use winoquant::bench::{menu_shapes, run_conv_bench, run_gemm_bench, BenchOptions, ConvMode, SPEED_TARGET_RATIO};
use winoquant::conv_ref::ConvShape;
use winoquant::golden;
use winoquant::kernels::{gemm_q8_fast, gemm_q8_scalar, pack_weights};
use winoquant::quant::{Bits, GroupQuantized, Precision};
use winoquant::transforms::{rescale_transform, standard_transform, ScaleSet, Tile, WinogradTransform};
use winoquant::tuner::{
    check_scale_gradient, evaluate, mean_sqnr, ste_gradients, tune_scales, tune_transforms, LayerCatalog,
    LayerProblem, Objective, QuantMode, TuneConfig, TuneReport,
};
use winoquant::wino::{wino_conv, Mode, WinoConfig};
use winoquant::{Fill, RngSpec, Tensor};

const GOLDEN_TOL: f64 = 1e-12;
const SCALING_TOL: f64 = 1e-9;
const FP_TOL: f64 = 1e-4;
const DUALITY_TOL: f64 = 1e-5;
const AC6_MIN_GAIN_DB: f64 = 10.0;
const AC6_MIN_LAYER_GAIN_DB: f64 = 0.1;
const AC9_REL_TOL: f64 = 0.05;
const AC9_REL_STEP: f64 = 1e-4;
const AC10_GEMM_SPEEDUP: f64 = 4.0;

#[derive(Deserialize)]
struct Baselines {
    f63_standard_w8a8_mean_sqnr_db: f64,
    f63_standard_w8a8_ceiling_db: f64,
    f63_learned_improvement_floor_db: f64,
}

fn baselines() -> Baselines {
    let text = include_str!("fixtures/baselines.json");
    serde_json::from_str(text).expect("baseline fixture")
}

struct Line {
    id: &'static str,
    pass: bool,
    gated: bool,
    detail: String,
}

fn report(line: &Line) {
    let verdict = match (line.pass, line.gated) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "FAIL (informational)",
    };
    println!("{} {verdict} {}", line.id, line.detail);
    std::io::stdout().flush().ok();
}

fn gauss(dims: &[usize], std: f64, seed: u64) -> Tensor {
    Tensor::new(dims, Fill::Rng(RngSpec::gaussian(0.0, std, seed))).unwrap()
}

/// Plain six-loop convolution in f64.
fn naive_conv(x: &Tensor, w: &Tensor, s: &ConvShape) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let (xd, wd) = (x.data(), w.data());
    let mut y = vec![0.0; s.n * s.c_out * oh * ow];
    for b in 0..s.n {
        for k in 0..s.c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..s.c_in {
                        for u in 0..3 {
                            for v in 0..3 {
                                let (yy, xx) = ((i + u) as isize - s.padding as isize, (j + v) as isize - s.padding as isize);
                                if yy < 0 || xx < 0 || yy >= s.h as isize || xx >= s.w as isize {
                                    continue;
                                }
                                let xv = xd[((b * s.c_in + c) * s.h + yy as usize) * s.w + xx as usize] as f64;
                                acc += xv * wd[((k * s.c_in + c) * 3 + u) * 3 + v] as f64;
                            }
                        }
                    }
                    y[((b * s.c_out + k) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    y
}

fn rel_err(test: &[f32], reference: &[f64]) -> f64 {
    let num: f64 = test.iter().zip(reference).map(|(&a, &b)| (a as f64 - b).powi(2)).sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn ac1() -> Line {
    let t0 = Instant::now();
    let checks = golden::check(&golden::published());
    let worst = checks.iter().map(|c| c.max_abs_err).fold(0.0, f64::max);
    let misprints: usize = checks.iter().map(|c| c.misprints_confirmed).sum();
    let expected: usize = checks.iter().map(|c| c.misprints_expected).sum();
    let all = checks.iter().all(|c| c.pass) && worst <= GOLDEN_TOL;
    let secs = t0.elapsed().as_secs_f64();
    Line {
        id: "AC1",
        pass: all && secs < 1.0,
        gated: true,
        detail: format!(
            "golden transforms: {} tables, max |err| {worst:.3e} (tol {GOLDEN_TOL:e}), documented misprints {misprints}/{expected}, {secs:.3}s (< 1s)",
            checks.len()
        ),
    }
}

/// Recovers the diagonal scales from the built matrices and their
/// unscaled factors, then measures `max |s_a s_b s_g - 1|`.
fn matrix_residual(t: &WinogradTransform) -> f64 {
    let (va, vb, vg) = t.factors();
    let ratio = |num: f64, den: f64| num / den;
    let mut worst = 0.0f64;
    for i in 0..t.n() {
        let ra = (0..t.m()).max_by(|&a, &b| va[(a, i)].abs().total_cmp(&va[(b, i)].abs())).unwrap();
        let rb = (0..t.n()).max_by(|&a, &b| vb[(i, a)].abs().total_cmp(&vb[(i, b)].abs())).unwrap();
        let rg = (0..t.r()).max_by(|&a, &b| vg[(i, a)].abs().total_cmp(&vg[(i, b)].abs())).unwrap();
        let sa = ratio(t.a_t()[(ra, i)], va[(ra, i)]);
        let sb = ratio(t.b_t()[(i, rb)], vb[(i, rb)]);
        let sg = ratio(t.g()[(i, rg)], vg[(i, rg)]);
        worst = worst.max((sa * sb * sg - 1.0).abs());
    }
    worst
}

fn ac2() -> Line {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for tile in Tile::ALL {
        let std = standard_transform(tile);
        worst = worst.max(matrix_residual(&std)).max(std.scales().residual());
        cases += 1;
        for _ in 0..1000 {
            let mut draw = || {
                let mag = 10f64.powf(rng.gen_range(-2.0..2.0));
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            };
            let sb: Vec<f64> = (0..tile.n()).map(|_| draw()).collect();
            let sg: Vec<f64> = (0..tile.n()).map(|_| draw()).collect();
            let t = rescale_transform(&std, &sb, &sg).unwrap();
            worst = worst.max(matrix_residual(&t)).max(t.scales().residual());
            cases += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Line {
        id: "AC2",
        pass: worst <= SCALING_TOL && secs < 1.0,
        gated: true,
        detail: format!(
            "scaling condition: {cases} scale sets, max |s_a s_b s_g - 1| {worst:.3e} (tol {SCALING_TOL:e}), {secs:.3}s (< 1s)"
        ),
    }
}

fn ac3() -> Line {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for tile in Tile::ALL {
        let t = standard_transform(tile);
        for i in 0..100u64 {
            let s = loop {
                let pad = rng.gen_range(0..=2);
                let h = rng.gen_range(1..=20);
                let w = rng.gen_range(1..=20);
                if let Ok(s) = ConvShape::new(rng.gen_range(1..=2), rng.gen_range(1..=16), h, w, rng.gen_range(1..=8), pad) {
                    break s;
                }
            };
            let x = gauss(&s.input_dims(), 1.0, 1000 + i);
            let w = gauss(&s.weight_dims(), 1.0, 2000 + i);
            let y = wino_conv(&x, &w, &t, Mode::Fp, s.padding, &WinoConfig::default()).unwrap();
            worst = worst.max(rel_err(y.data(), &naive_conv(&x, &w, &s)));
            cases += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Line {
        id: "AC3",
        pass: worst <= FP_TOL && secs < 30.0,
        gated: true,
        detail: format!(
            "FP Winograd vs naive direct conv: {cases} cases, max relative error {worst:.3e} (tol {FP_TOL:e}), {secs:.1}s (< 30s)"
        ),
    }
}

fn ac4() -> Line {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let tile = Tile::ALL[i as usize % 2];
        let precision = if i % 3 == 0 { Precision::W4A8 } else { Precision::W8A8 };
        let group_size = [32, 64][rng.gen_range(0..2)];
        let s = ConvShape::new(
            rng.gen_range(1..=2),
            rng.gen_range(1..=96),
            rng.gen_range(3..=18),
            rng.gen_range(3..=18),
            rng.gen_range(1..=24),
            rng.gen_range(0..=1),
        )
        .unwrap();
        let x = gauss(&s.input_dims(), 1.0, 3000 + i);
        let w = gauss(&s.weight_dims(), 0.1, 4000 + i);
        let cfg = WinoConfig { group_size, precision };
        let t = standard_transform(tile);
        let a = wino_conv(&x, &w, &t, Mode::Int8, s.padding, &cfg).unwrap();
        let b = wino_conv(&x, &w, &t, Mode::FakeQuant, s.padding, &cfg).unwrap();
        let bf: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
        worst = worst.max(rel_err(a.data(), &bf));
    }
    let mut sweep = 0usize;
    let mut mismatches = 0usize;
    for m in 1..=16 {
        for k in 1..=16 {
            for n in 1..=16 {
                let a = gauss(&[m * k], 1.0, (m * 1000 + k * 10 + n) as u64);
                let b = gauss(&[n * k], 1.0, (n * 1000 + k * 10 + m) as u64 + 7);
                for gs in [k, 4] {
                    let aq = GroupQuantized::from_matrix(m, k, a.data(), gs, Bits::Eight).unwrap();
                    let bq = GroupQuantized::from_matrix(n, k, b.data(), gs, Bits::Eight).unwrap();
                    let scalar = gemm_q8_scalar(&aq, &bq).unwrap();
                    for v in [16, 3] {
                        sweep += 1;
                        if gemm_q8_fast(&aq, &pack_weights(&bq, v).unwrap()).unwrap() != scalar {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Line {
        id: "AC4",
        pass: worst <= DUALITY_TOL && mismatches == 0 && secs < 60.0,
        gated: true,
        detail: format!(
            "int8 vs fake-quant: 50 cases, max relative error {worst:.3e} (tol {DUALITY_TOL:e}); fast vs scalar GEMM: {mismatches} mismatches in {sweep} runs; {secs:.1}s (< 60s)"
        ),
    }
}

fn ac5(cfg: &TuneConfig, catalog: &LayerCatalog) -> Line {
    let base = baselines();
    let wcfg = cfg.wino_config();
    let f63 = mean_sqnr(&evaluate(catalog, &standard_transform(Tile::F63), &wcfg, cfg.seed).unwrap());
    let f43 = mean_sqnr(&evaluate(catalog, &standard_transform(Tile::F43), &wcfg, cfg.seed).unwrap());
    let drift = (f63 - base.f63_standard_w8a8_mean_sqnr_db).abs();
    Line {
        id: "AC5",
        pass: f63 < base.f63_standard_w8a8_ceiling_db && f43 > f63 && drift < 0.01,
        gated: true,
        detail: format!(
            "failure reproduction: F63 standard W8A8 mean SQNR {f63:.3} dB (< ceiling {} dB, fixture {} dB), F43 standard {f43:.3} dB > F63",
            base.f63_standard_w8a8_ceiling_db, base.f63_standard_w8a8_mean_sqnr_db
        ),
    }
}

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

fn mean_rel_change(new: &[f64], old: &[f64]) -> f64 {
    new.iter().zip(old).map(|(n, o)| ((n.abs() - o.abs()) / o.abs()).abs()).sum::<f64>() / new.len() as f64
}

fn ac6(report: &TuneReport, scales: &ScaleSet, secs: f64, cfg: &TuneConfig) -> Line {
    let floor = baselines().f63_learned_improvement_floor_db;
    let min_layer = report
        .layers
        .iter()
        .map(|l| l.sqnr_after_db - l.sqnr_before_db)
        .fold(f64::INFINITY, f64::min);
    let std = cfg.tile.standard_scales();
    let sa_down = mean_abs(scales.s_a()) < mean_abs(std.s_a());
    let sg_up = mean_abs(scales.s_g()) > mean_abs(std.s_g());
    let sb_change = mean_rel_change(scales.s_b(), std.s_b());
    let sg_change = mean_rel_change(scales.s_g(), std.s_g());
    let sb_steady = sb_change <= 0.1 && sb_change < sg_change;

    // disjoint shapes, unseen during tuning
    let mut unseen = Vec::new();
    for (c, k) in [(48, 96), (96, 48), (80, 80)] {
        unseen.push(ConvShape::new(1, c, 24, 24, k, 1).unwrap());
    }
    let other = LayerCatalog::from_shapes(&unseen, 99).unwrap();
    let wcfg = cfg.wino_config();
    let tuned = WinogradTransform::for_tile_with_scales(cfg.tile, scales.clone()).unwrap();
    let transfer = mean_sqnr(&evaluate(&other, &tuned, &wcfg, 7).unwrap())
        - mean_sqnr(&evaluate(&other, &standard_transform(cfg.tile), &wcfg, 7).unwrap());

    let pass = report.improvement_db >= AC6_MIN_GAIN_DB
        && report.improvement_db >= floor
        && min_layer >= AC6_MIN_LAYER_GAIN_DB
        && !report.regressed
        && sa_down
        && sg_up
        && sb_steady
        && transfer > 0.0
        && scales.residual() <= SCALING_TOL
        && secs <= 600.0;
    Line {
        id: "AC6",
        pass,
        gated: true,
        detail: format!(
            "learned scales: {} steps, mean SQNR {:.3} -> {:.3} dB (+{:.3}, need >= {AC6_MIN_GAIN_DB} and floor {floor}), min per-layer gain {min_layer:.3} dB (need >= {AC6_MIN_LAYER_GAIN_DB}); mean|S_A| {:.3} -> {:.3}, mean|S_G| {:.3} -> {:.3}, S_B mean rel change {sb_change:.3} (S_G {sg_change:.3}); unseen-shape gain {transfer:.3} dB; {secs:.0}s (<= 600s)",
            report.steps,
            report.mean_sqnr_before_db,
            report.mean_sqnr_after_db,
            report.improvement_db,
            mean_abs(std.s_a()),
            mean_abs(scales.s_a()),
            mean_abs(std.s_g()),
            mean_abs(scales.s_g()),
        ),
    }
}

fn ac7(scales_report: &TuneReport, catalog: &LayerCatalog, cfg: &TuneConfig) -> Line {
    let t0 = Instant::now();
    let (_, m) = tune_transforms(catalog, cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    Line {
        id: "AC7",
        pass: m.improvement_db < scales_report.improvement_db && secs <= 1200.0,
        gated: true,
        detail: format!(
            "free-matrix baseline: {} params, +{:.3} dB vs learned scales {} params, +{:.3} dB (gap {:.3} dB); {secs:.0}s (<= 1200s)",
            m.parameter_count,
            m.improvement_db,
            scales_report.parameter_count,
            scales_report.improvement_db,
            scales_report.improvement_db - m.improvement_db
        ),
    }
}

fn ac8(report: &TuneReport) -> Line {
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for l in &report.layers {
        match (l.tap_ratio_before, l.tap_ratio_after) {
            (Some(b), Some(a)) => {
                pass &= a < b;
                worst = worst.max(a / b);
            }
            _ => pass = false,
        }
    }
    let before: Vec<f64> = report.layers.iter().filter_map(|l| l.tap_ratio_before).collect();
    let after: Vec<f64> = report.layers.iter().filter_map(|l| l.tap_ratio_after).collect();
    Line {
        id: "AC8",
        pass,
        gated: true,
        detail: format!(
            "tap max/min rel-std ratio decreases on all {} shapes: before {:.1}..{:.1}, after {:.2}..{:.2}, worst after/before {worst:.4}",
            report.layers.len(),
            before.iter().copied().fold(f64::INFINITY, f64::min),
            before.iter().copied().fold(0.0, f64::max),
            after.iter().copied().fold(f64::INFINITY, f64::min),
            after.iter().copied().fold(0.0, f64::max),
        ),
    }
}

fn ac9() -> Line {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_rel = 0.0f64;
    let mut compared = 0;
    let mut expected = 0;
    let mut worst_off = 0.0f64;
    for i in 0..10u64 {
        let tile = Tile::ALL[i as usize % 2];
        let s = ConvShape::new(1, rng.gen_range(8..=40), rng.gen_range(6..=14), rng.gen_range(6..=14), rng.gen_range(2..=12), 1).unwrap();
        let x = gauss(&s.input_dims(), 1.0, 5000 + i);
        let w = gauss(&s.weight_dims(), (2.0 / (9.0 * s.c_in as f64)).sqrt(), 6000 + i);
        let problem = LayerProblem::new(s, x, w, WinoConfig::default()).unwrap();
        let std = standard_transform(tile);
        let t = if i < 5 {
            std.clone()
        } else {
            let sb: Vec<f64> = std.scales().s_b().iter().map(|v| v * rng.gen_range(0.5..2.0)).collect();
            let sg: Vec<f64> = std.scales().s_g().iter().map(|v| v * rng.gen_range(0.5..2.0)).collect();
            rescale_transform(&std, &sb, &sg).unwrap()
        };
        let chk = check_scale_gradient(&problem, &t, AC9_REL_STEP).unwrap();
        worst_rel = worst_rel.max(chk.max_rel_err);
        compared += chk.compared;
        expected += 2 * t.n();

        // quantization off: the squared error is identically ~0, so is its gradient
        let (_, gb, gg) = ste_gradients(&problem, &t, QuantMode::Off, Objective::SquaredError).unwrap();
        let (_, qb, qg) = ste_gradients(&problem, &t, QuantMode::Round, Objective::SquaredError).unwrap();
        let off = gb.iter().chain(&gg).map(|v| v.abs()).fold(0.0, f64::max);
        let on = qb.iter().chain(&qg).map(|v| v.abs()).fold(0.0, f64::max);
        worst_off = worst_off.max(off / on);
    }
    let secs = t0.elapsed().as_secs_f64();
    Line {
        id: "AC9",
        pass: worst_rel <= AC9_REL_TOL && compared == expected && worst_off < 1e-9 && secs < 30.0,
        gated: true,
        detail: format!(
            "scale gradient vs central differences (h = {AC9_REL_STEP:e}|s|, rounding frozen): 10 layers, {compared}/{expected} components compared, max rel error {worst_rel:.3e} (tol {AC9_REL_TOL}); quantization-off gradient / quantized gradient {worst_off:.1e} (< 1e-9); {secs:.1}s (< 30s)"
        ),
    }
}

fn ac10() -> Line {
    let opts = BenchOptions::default();
    let shapes = menu_shapes();
    let threads = [rayon::current_num_threads()];
    let conv = run_conv_bench(&shapes, &[ConvMode::DirectQ8, ConvMode::WinoQ8], &threads, Tile::F63, &opts).unwrap();
    let ratios: Vec<String> = conv
        .conv
        .iter()
        .filter(|c| c.mode == ConvMode::WinoQ8)
        .map(|c| format!("{}x{}:{:.3}", c.shape.c_in, c.shape.h, c.ratio.unwrap_or(f64::NAN)))
        .collect();
    let fraction = conv.summary.wino_q8_fast_fraction.unwrap_or(0.0);
    let gemm = run_gemm_bench(1024, 1024, 1024, 64, &opts).unwrap();
    Line {
        id: "AC10",
        pass: fraction >= 0.5 && gemm.speedup >= AC10_GEMM_SPEEDUP && gemm.bit_identical,
        gated: false,
        detail: format!(
            "performance on {} thread(s), {} cpus [{}]: wino-q8/direct-q8 median ratios {} ({:.0}% of shapes <= {SPEED_TARGET_RATIO}, need >= 50%); fast GEMM {:.2}x over scalar at 1024^3 (need >= {AC10_GEMM_SPEEDUP}x)",
            threads[0],
            conv.machine.logical_cpus,
            conv.machine.features.join(","),
            ratios.join(" "),
            fraction * 100.0,
            gemm.speedup
        ),
    }
}

fn main() {
    // `cargo test -- --list` and filters come through here too
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let started = Instant::now();
    let mut lines = Vec::new();
    for f in [ac1, ac2, ac3, ac4] {
        let l = f();
        report(&l);
        lines.push(l);
    }
    let cfg = TuneConfig::default();
    let catalog = LayerCatalog::synthetic(cfg.catalog_layers, cfg.catalog_seed).unwrap();
    let l = ac5(&cfg, &catalog);
    report(&l);
    lines.push(l);

    let t0 = Instant::now();
    let (scales, rep) = tune_scales(&catalog, &cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    for l in [ac6(&rep, &scales, secs, &cfg), ac7(&rep, &catalog, &cfg), ac8(&rep), ac9(), ac10()] {
        report(&l);
        lines.push(l);
    }

    let failed: Vec<&str> = lines.iter().filter(|l| l.gated && !l.pass).map(|l| l.id).collect();
    println!(
        "acceptance: {} of {} gated criteria passed in {:.0}s",
        lines.iter().filter(|l| l.gated && l.pass).count(),
        lines.iter().filter(|l| l.gated).count(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
