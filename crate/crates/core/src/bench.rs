//! Timing and fidelity harness.
//!
//! Timings are medians over `reps` runs after `warmup` untimed runs on a
//! monotonic clock. Weight preparation (quantization, packing, Winograd
//! weight transform) is done once outside the timed region for every mode.
//! Fidelity numbers depend only on seeds and are bit-reproducible.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conv_ref::{conv_direct_fp, conv_direct_q8_packed, quantize_activations, ConvShape};
use crate::error::{Result, WinoError};
use crate::kernels::{gemm_q8_fast, gemm_q8_scalar, pack_weights, DEFAULT_VECTOR_WIDTH};
use crate::quant::{sqnr, GroupQuantized, Precision, Bits};
use crate::tensor::{derive_seed, Fill, RngSpec, Tensor};
use crate::transforms::{standard_transform, ScaleSet, Tile, WinogradTransform};
use crate::tuner::{eval_input, LayerCatalog};
use crate::wino::{
    hadamard_fp, input_transform_fp, output_transform_fp, prepare_weights, tap_range_stats, weight_transform,
    wino_forward, wino_forward_prepared, Arith, Mode, WinoConfig, WinoPlan,
};

pub const DEFAULT_WARMUP: usize = 5;
pub const DEFAULT_REPS: usize = 20;
/// Winograd int8 counts as faster when its median is at most this
/// fraction of the direct int8 median.
pub const SPEED_TARGET_RATIO: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvMode {
    Fp,
    DirectQ8,
    WinoFp,
    WinoQ8,
}

impl ConvMode {
    pub const ALL: [ConvMode; 4] = [ConvMode::Fp, ConvMode::DirectQ8, ConvMode::WinoFp, ConvMode::WinoQ8];

    pub fn name(self) -> &'static str {
        match self {
            ConvMode::Fp => "fp",
            ConvMode::DirectQ8 => "direct-q8",
            ConvMode::WinoFp => "wino-fp",
            ConvMode::WinoQ8 => "wino-q8",
        }
    }

    pub fn is_winograd(self) -> bool {
        matches!(self, ConvMode::WinoFp | ConvMode::WinoQ8)
    }

    /// Direct mode of the same precision.
    pub fn baseline(self) -> ConvMode {
        match self {
            ConvMode::Fp | ConvMode::WinoFp => ConvMode::Fp,
            ConvMode::DirectQ8 | ConvMode::WinoQ8 => ConvMode::DirectQ8,
        }
    }
}

impl fmt::Display for ConvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConvMode {
    type Err = WinoError;

    fn from_str(s: &str) -> Result<Self> {
        ConvMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| WinoError::Config(format!("unknown conv mode '{s}'")))
    }
}

/// `C = K in {128, 256, 320}`, `H = W in {32, 64}`, padding 1.
pub fn menu_shapes() -> Vec<ConvShape> {
    let mut out = Vec::new();
    for c in [128, 256, 320] {
        for hw in [32, 64] {
            out.push(ConvShape::new(1, c, hw, hw, c, 1).expect("menu shapes are valid"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub features: Vec<String>,
}

impl MachineInfo {
    pub fn detect() -> Self {
        let mut features = Vec::new();
        #[cfg(target_arch = "x86_64")]
        {
            macro_rules! probe {
                ($($f:tt),*) => {$(
                    if std::arch::is_x86_feature_detected!($f) {
                        features.push($f.to_string());
                    }
                )*};
            }
            probe!("sse4.1", "avx", "avx2", "fma", "avx512f", "avx512bw", "avx512vnni");
        }
        MachineInfo {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            features,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub warmup: usize,
    pub reps: usize,
    pub group_size: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: DEFAULT_WARMUP,
            reps: DEFAULT_REPS,
            group_size: crate::wino::DEFAULT_GROUP_SIZE,
            precision: Precision::W8A8,
            seed: 0,
        }
    }
}

impl BenchOptions {
    fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(WinoError::Config("reps must be positive".into()));
        }
        self.wino_config().validate()
    }

    fn wino_config(&self) -> WinoConfig {
        WinoConfig {
            group_size: self.group_size,
            precision: self.precision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvCase {
    pub shape: ConvShape,
    pub mode: ConvMode,
    pub tile: Tile,
    pub threads: usize,
    pub warmup: usize,
    pub reps: usize,
    pub median_s: Option<f64>,
    pub min_s: Option<f64>,
    pub sqnr_db: Option<f64>,
    /// Median time over the median of the same-precision direct mode.
    pub ratio: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemmCase {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub group_size: usize,
    pub scalar_median_s: f64,
    pub fast_median_s: f64,
    pub speedup: f64,
    pub bit_identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityCase {
    pub shape: ConvShape,
    pub direct_fp_sqnr_db: f64,
    pub direct_q8_sqnr_db: f64,
    pub wino_fp_sqnr_db: f64,
    pub standard_sqnr_db: f64,
    pub learned_sqnr_db: Option<f64>,
    /// Standard-scale F(4,3) int8, for comparison with the tile under test.
    pub f43_standard_sqnr_db: f64,
    pub standard_tap_ratio: Option<f64>,
    pub learned_tap_ratio: Option<f64>,
    pub standard_rel_std: Vec<f64>,
    pub learned_rel_std: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    /// Fraction of shapes whose `wino-q8` ratio is at most [`SPEED_TARGET_RATIO`].
    pub wino_q8_fast_fraction: Option<f64>,
    pub learned_beats_standard: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub suite: String,
    pub machine: MachineInfo,
    pub tile: Tile,
    pub options: BenchOptions,
    pub conv: Vec<ConvCase>,
    pub gemm: Vec<GemmCase>,
    pub fidelity: Vec<FidelityCase>,
    pub summary: BenchSummary,
}

impl BenchReport {
    fn new(suite: &str, tile: Tile, options: BenchOptions) -> Self {
        BenchReport {
            suite: suite.into(),
            machine: MachineInfo::detect(),
            tile,
            options,
            conv: Vec::new(),
            gemm: Vec::new(),
            fidelity: Vec::new(),
            summary: BenchSummary::default(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per conv case, GEMM case and fidelity entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,n,c_in,c_out,h,w,mode,tile,threads,median_s,min_s,sqnr_db,ratio,tap_ratio,note\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.9e}"));
        let dims = |s: &ConvShape| format!("{},{},{},{},{}", s.n, s.c_in, s.c_out, s.h, s.w);
        for c in &self.conv {
            out += &format!(
                "conv,{},{},{},{},{},{},{},{},,{}\n",
                dims(&c.shape),
                c.mode,
                c.tile,
                c.threads,
                opt(c.median_s),
                opt(c.min_s),
                opt(c.sqnr_db),
                opt(c.ratio),
                c.skipped.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        for g in &self.gemm {
            out += &format!(
                "gemm,{},{},{},,,fast,,,{},,,{},,group {}\n",
                g.m,
                g.k,
                g.n,
                opt(Some(g.fast_median_s)),
                opt(Some(1.0 / g.speedup)),
                g.group_size
            );
        }
        for f in &self.fidelity {
            let rows = [
                ("direct-fp", Some(f.direct_fp_sqnr_db), None),
                ("direct-q8", Some(f.direct_q8_sqnr_db), None),
                ("wino-fp", Some(f.wino_fp_sqnr_db), None),
                ("standard", Some(f.standard_sqnr_db), f.standard_tap_ratio),
                ("learned", f.learned_sqnr_db, f.learned_tap_ratio),
                ("f43-standard", Some(f.f43_standard_sqnr_db), None),
            ];
            for (label, db, tap) in rows {
                if db.is_none() {
                    continue;
                }
                out += &format!("fidelity,{},{label},{},,,,{},,{},\n", dims(&f.shape), self.tile, opt(db), opt(tap));
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| WinoError::io(path, e))
    }
}

fn time_it(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    let median = if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    };
    Ok((median.max(f64::MIN_POSITIVE), samples[0].max(f64::MIN_POSITIVE)))
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| WinoError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Seeded gaussian input and Kaiming weights for one bench shape.
pub fn bench_operands(shape: &ConvShape, seed: u64) -> Result<(Tensor, Tensor)> {
    let x = Tensor::new(&shape.input_dims(), Fill::Rng(RngSpec::gaussian(0.0, 1.0, derive_seed(seed, 1))))?;
    let std = (2.0 / (9.0 * shape.c_in as f64)).sqrt();
    let w = Tensor::new(&shape.weight_dims(), Fill::Rng(RngSpec::gaussian(0.0, std, derive_seed(seed, 2))))?;
    Ok((x, w))
}

/// Why Winograd cannot run on `shape`, if it cannot.
pub fn winograd_skip_reason(shape: &ConvShape, tile: Tile) -> Option<String> {
    let (oh, ow) = (shape.out_h(), shape.out_w());
    (oh < tile.m() || ow < tile.m())
        .then(|| format!("{oh}x{ow} output holds no full {tile} output tile ({0}x{0})", tile.m()))
}

fn timed_mode(
    mode: ConvMode,
    shape: &ConvShape,
    x: &Tensor,
    w: &Tensor,
    t: &WinogradTransform,
    opts: &BenchOptions,
) -> Result<(f64, f64, Tensor)> {
    let cfg = opts.wino_config();
    let mut last = None;
    let (median, min) = match mode {
        ConvMode::Fp => time_it(opts.warmup, opts.reps, || {
            last = Some(conv_direct_fp(x, w, shape)?);
            Ok(())
        })?,
        ConvMode::DirectQ8 => {
            let red = shape.reduction();
            let wq = GroupQuantized::from_matrix(shape.c_out, red, w.data(), opts.group_size, opts.precision.weight_bits())?;
            let wp = pack_weights(&wq, DEFAULT_VECTOR_WIDTH)?;
            time_it(opts.warmup, opts.reps, || {
                let xq = quantize_activations(x, shape, opts.group_size, Bits::Eight)?;
                last = Some(conv_direct_q8_packed(&xq, &wp, shape)?);
                Ok(())
            })?
        }
        ConvMode::WinoFp => {
            let plan = WinoPlan::new(t, *shape)?;
            let wd = weight_transform(w, t)?;
            time_it(opts.warmup, opts.reps, || {
                let xd = input_transform_fp(x, &plan)?;
                let yd = hadamard_fp(&xd, &wd)?;
                last = Some(output_transform_fp(&yd, &plan)?);
                Ok(())
            })?
        }
        ConvMode::WinoQ8 => {
            let plan = WinoPlan::new(t, *shape)?;
            let pw = prepare_weights(w, t, &cfg)?;
            time_it(opts.warmup, opts.reps, || {
                last = Some(wino_forward_prepared(x, &plan, &pw, Arith::Int8, &cfg)?.y);
                Ok(())
            })?
        }
    };
    Ok((median, min, last.expect("at least one rep")))
}

/// Times every `(shape, mode, threads)` combination, in that nesting order.
pub fn run_conv_bench(
    shapes: &[ConvShape],
    modes: &[ConvMode],
    threads: &[usize],
    tile: Tile,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    opts.validate()?;
    if threads.contains(&0) {
        return Err(WinoError::Config("thread counts must be positive".into()));
    }
    let t = standard_transform(tile);
    let mut report = BenchReport::new("conv", tile, *opts);
    let mut fast = 0usize;
    let mut compared = 0usize;
    for (si, shape) in shapes.iter().enumerate() {
        shape.validate()?;
        let (x, w) = bench_operands(shape, derive_seed(opts.seed, si as u64))?;
        let reference = conv_direct_fp(&x, &w, shape)?;
        for &th in threads {
            let mut cases: Vec<ConvCase> = Vec::new();
            for &mode in modes {
                let mut case = ConvCase {
                    shape: *shape,
                    mode,
                    tile,
                    threads: th,
                    warmup: opts.warmup,
                    reps: opts.reps,
                    median_s: None,
                    min_s: None,
                    sqnr_db: None,
                    ratio: None,
                    skipped: None,
                };
                if let Some(reason) = mode.is_winograd().then(|| winograd_skip_reason(shape, tile)).flatten() {
                    case.skipped = Some(reason);
                    cases.push(case);
                    continue;
                }
                let (median, min, y) = in_pool(th, || timed_mode(mode, shape, &x, &w, &t, opts))??;
                case.median_s = Some(median);
                case.min_s = Some(min);
                case.sqnr_db = Some(sqnr(&reference, &y)?);
                cases.push(case);
            }
            let base = |m: ConvMode| cases.iter().find(|c| c.mode == m).and_then(|c| c.median_s);
            let ratios: Vec<Option<f64>> = cases
                .iter()
                .map(|c| Some(c.median_s? / base(c.mode.baseline())?))
                .collect();
            for (c, r) in cases.iter_mut().zip(ratios) {
                c.ratio = r;
                if c.mode == ConvMode::WinoQ8 {
                    if let Some(r) = r {
                        compared += 1;
                        fast += usize::from(r <= SPEED_TARGET_RATIO);
                    }
                }
            }
            report.conv.extend(cases);
        }
    }
    report.summary.wino_q8_fast_fraction = (compared > 0).then(|| fast as f64 / compared as f64);
    Ok(report)
}

/// Scalar versus fast int8 GEMM on seeded `M x K` by `N x K` operands.
pub fn run_gemm_bench(m: usize, k: usize, n: usize, group_size: usize, opts: &BenchOptions) -> Result<GemmCase> {
    let mut a = vec![0.0f32; m * k];
    let mut b = vec![0.0f32; n * k];
    RngSpec::gaussian(0.0, 1.0, derive_seed(opts.seed, 11)).sampler().fill_f32(&mut a);
    RngSpec::gaussian(0.0, 1.0, derive_seed(opts.seed, 12)).sampler().fill_f32(&mut b);
    let aq = GroupQuantized::from_matrix(m, k, &a, group_size, Bits::Eight)?;
    let bq = GroupQuantized::from_matrix(n, k, &b, group_size, Bits::Eight)?;
    let bp = pack_weights(&bq, DEFAULT_VECTOR_WIDTH)?;
    let reps = opts.reps.min(5).max(1);
    let mut slow = None;
    let mut fast = None;
    let (scalar_median_s, _) = time_it(1, reps, || {
        slow = Some(gemm_q8_scalar(&aq, &bq)?);
        Ok(())
    })?;
    let (fast_median_s, _) = time_it(1, reps, || {
        fast = Some(gemm_q8_fast(&aq, &bp)?);
        Ok(())
    })?;
    Ok(GemmCase {
        m,
        k,
        n,
        group_size,
        scalar_median_s,
        fast_median_s,
        speedup: scalar_median_s / fast_median_s,
        bit_identical: slow == fast,
    })
}

/// Int8 Winograd SQNR per shape with standard and (optionally) learned
/// scales, plus tap spreads. Weights are the seeded catalog weights.
pub fn run_fidelity_suite(
    tile: Tile,
    learned: Option<&ScaleSet>,
    shapes: &[ConvShape],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    opts.validate()?;
    let cfg = opts.wino_config();
    let standard = standard_transform(tile);
    let learned_t = learned
        .map(|s| WinogradTransform::for_tile_with_scales(tile, s.clone()))
        .transpose()?;
    let f43 = standard_transform(Tile::F43);
    let catalog = LayerCatalog::from_shapes(shapes, opts.seed)?;
    let mut report = BenchReport::new("fidelity", tile, *opts);
    for (i, layer) in catalog.layers.iter().enumerate() {
        let (shape, w) = (&layer.shape, &layer.w);
        let x = eval_input(shape, opts.seed, i)?;
        let reference = conv_direct_fp(&x, w, shape)?;
        let db = |y: &Tensor| sqnr(&reference, y);
        let run = |t: &WinogradTransform, mode| wino_forward(&x, w, t, mode, shape.padding, &cfg);
        let std_out = run(&standard, Mode::Int8)?;
        let std_stats = tap_range_stats(&std_out.y_domain)?;
        let learned_out = learned_t.as_ref().map(|t| run(t, Mode::Int8)).transpose()?;
        let learned_stats = learned_out.as_ref().map(|o| tap_range_stats(&o.y_domain)).transpose()?;
        let (xq, wq) = crate::conv_ref::quantize_conv_operands(&x, w, shape, opts.group_size, opts.precision)?;
        report.fidelity.push(FidelityCase {
            shape: *shape,
            direct_fp_sqnr_db: db(&conv_direct_fp(&x, w, shape)?)?,
            direct_q8_sqnr_db: db(&crate::conv_ref::conv_direct_q8(&xq, &wq, shape)?)?,
            wino_fp_sqnr_db: db(&run(&standard, Mode::Fp)?.y)?,
            standard_sqnr_db: db(&std_out.y)?,
            learned_sqnr_db: learned_out.as_ref().map(|o| db(&o.y)).transpose()?,
            f43_standard_sqnr_db: db(&run(&f43, Mode::Int8)?.y)?,
            standard_tap_ratio: std_stats.max_min_ratio,
            learned_tap_ratio: learned_stats.as_ref().and_then(|s| s.max_min_ratio),
            standard_rel_std: std_stats.rel_std,
            learned_rel_std: learned_stats.map(|s| s.rel_std),
        });
    }
    report.summary.learned_beats_standard = learned.map(|_| {
        report
            .fidelity
            .iter()
            .all(|f| f.learned_sqnr_db.is_some_and(|l| l > f.standard_sqnr_db))
    });
    Ok(report)
}
