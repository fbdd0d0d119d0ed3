//! Command-line frontend. Exit codes: 0 success, 1 failed check, 2 usage or
//! I/O error. Numbers are printed with 9 significant digits.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{menu_shapes, run_conv_bench, run_fidelity_suite, run_gemm_bench, BenchOptions, ConvMode};
use crate::conv_ref::{conv_direct_fp, conv_direct_q8, quantize_conv_operands, ConvShape};
use crate::error::WinoError;
use crate::golden::{self, GoldenTables};
use crate::kernels::{gemm_q8_fast, gemm_q8_scalar, pack_weights};
use crate::matrix::Mat;
use crate::quant::{sqnr, Bits, GroupQuantized, GroupSpec, Precision};
use crate::tensor::{derive_seed, Fill, RngSpec, Tensor};
use crate::transforms::{standard_transform, ScaleFile, ScaleSet, Tile, WinogradTransform};
use crate::tuner::{resume_scales, tune_scales, LayerCatalog, TuneConfig};
use crate::wino::{wino_conv, Mode, WinoConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Tolerance for `max |s_a s_b s_g - 1|`.
pub const SCALING_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "winoquant", version, about = "Group-wise quantized Winograd convolution toolkit")]
pub struct Cli {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub tile: Option<Tile>,
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    /// w8a8 or w4a8
    #[arg(long, global = true)]
    pub bits: Option<Precision>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the transform matrices and check them.
    Transforms {
        #[arg(long)]
        scales: Option<PathBuf>,
    },
    /// Run one convolution on tensor files and report SQNR against FP direct.
    Conv(ConvArgs),
    /// Learn (s_b, s_g) on random noise.
    LearnScales {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Timing or fidelity suite; writes a JSON report.
    Bench(BenchArgs),
    /// Golden and oracle battery.
    Verify {
        #[arg(long)]
        json: bool,
        /// Golden tables JSON to check instead of the built-in copy.
        #[arg(long)]
        golden: Option<PathBuf>,
    },
    /// Write a seeded random tensor.
    Tensor {
        /// Comma-separated extents, e.g. 1,32,16,16
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, value_enum, default_value = "gaussian")]
        dist: DistKind,
        /// Mean (gaussian) or lower bound (uniform).
        #[arg(long, default_value_t = 0.0)]
        a: f64,
        /// Std (gaussian) or upper bound (uniform).
        #[arg(long, default_value_t = 1.0)]
        b: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DistKind {
    Gaussian,
    Uniform,
}

#[derive(Debug, Args)]
pub struct ConvArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub w: PathBuf,
    #[arg(long)]
    pub mode: ConvMode,
    #[arg(long, default_value_t = 1)]
    pub padding: usize,
    #[arg(long)]
    pub scales: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Conv,
    Fidelity,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// `CxKxHxW`, repeatable. Defaults: the speed menu (conv) or the tuning
    /// catalog shapes (fidelity).
    #[arg(long = "shape")]
    pub shapes: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<ConvMode>>,
    #[arg(long, value_delimiter = ',')]
    pub thread_list: Option<Vec<usize>>,
    #[arg(long, default_value_t = crate::bench::DEFAULT_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = crate::bench::DEFAULT_WARMUP)]
    pub warmup: usize,
    /// Learned scales for the fidelity suite.
    #[arg(long)]
    pub scales: Option<PathBuf>,
    /// Square GEMM size for the scalar/fast kernel comparison; 0 skips it.
    #[arg(long, default_value_t = 512)]
    pub gemm_size: usize,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Check(String),
}

impl From<WinoError> for Failure {
    fn from(e: WinoError) -> Self {
        match e {
            WinoError::Compute(_) | WinoError::TuneDiverged { .. } | WinoError::UndefinedMetric(_) => {
                Failure::Check(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// `v` with 9 significant digits, trailing zeros trimmed.
pub fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..=15).contains(&exp) {
        return format!("{v:.8e}");
    }
    let decimals = (8 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn fmt_row(v: &[f64]) -> String {
    v.iter().map(|&x| fmt_num(x)).collect::<Vec<_>>().join(" ")
}

fn fmt_mat(name: &str, m: &Mat) -> String {
    let mut s = format!("{name} ({}x{})\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        s += &format!("  {}\n", fmt_row(m.row(i)));
    }
    s
}

/// Parses and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Check(msg)) => {
            let _ = writeln!(err, "check failed: {msg}");
            EXIT_CHECK
        }
    }
}

fn run(cli: &Cli, out: &mut dyn Write) -> CliResult {
    if let Some(gs) = cli.group_size {
        GroupSpec::new(gs, 0)?;
    }
    match cli.threads {
        Some(0) => return Err(Failure::Usage("--threads must be positive".into())),
        Some(n) => {
            // a second build in the same process keeps the first pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        None => {}
    }
    let w = |out: &mut dyn Write, s: String| out.write_all(s.as_bytes()).map_err(|e| Failure::Usage(e.to_string()));
    match &cli.command {
        Command::Transforms { scales } => cmd_transforms(cli, scales.as_deref(), out, &w),
        Command::Conv(args) => cmd_conv(cli, args, out, &w),
        Command::LearnScales { config, resume, report } => {
            cmd_learn(cli, config.as_deref(), resume.as_deref(), report.as_deref(), out, &w)
        }
        Command::Bench(args) => cmd_bench(cli, args, out, &w),
        Command::Verify { json, golden } => cmd_verify(cli, *json, golden.as_deref(), out, &w),
        Command::Tensor { dims, dist, a, b } => {
            let path = cli.out.as_ref().ok_or_else(|| Failure::Usage("tensor needs --out".into()))?;
            let seed = cli.seed.unwrap_or(0);
            let spec = match dist {
                DistKind::Gaussian => RngSpec::gaussian(*a, *b, seed),
                DistKind::Uniform => RngSpec::uniform(*a, *b, seed),
            };
            let t = Tensor::new(dims, Fill::Rng(spec))?;
            t.save(path)?;
            w(out, format!("wrote {:?} to {}\n", t.dims(), path.display()))
        }
    }
}

type Emit<'a> = &'a dyn Fn(&mut dyn Write, String) -> CliResult;

fn load_scales(path: &Path, tile: Option<Tile>) -> CliResult<(Tile, ScaleSet)> {
    let (file_tile, scales) = ScaleFile::load(path)?;
    if let Some(t) = tile {
        if t != file_tile {
            return Err(Failure::Usage(format!("--tile {t} but {} holds {file_tile} scales", path.display())));
        }
    }
    Ok((file_tile, scales))
}

fn cmd_transforms(cli: &Cli, scales: Option<&Path>, out: &mut dyn Write, w: Emit) -> CliResult {
    let (tile, t) = match scales {
        Some(p) => {
            let (tile, s) = load_scales(p, cli.tile)?;
            (tile, WinogradTransform::for_tile_with_scales(tile, s)?)
        }
        None => {
            let tile = cli.tile.unwrap_or(Tile::F63);
            (tile, standard_transform(tile))
        }
    };
    let s = t.scales();
    let mut text = format!("{tile} {} scales\n", if scales.is_some() { "custom" } else { "standard" });
    text += &format!("s_a: {}\ns_b: {}\ns_g: {}\n", fmt_row(s.s_a()), fmt_row(s.s_b()), fmt_row(s.s_g()));
    text += &fmt_mat("A^T", t.a_t());
    text += &fmt_mat("B^T", t.b_t());
    text += &fmt_mat("G", t.g());
    let residual = s.residual();
    text += &format!("scaling residual: {}\n", fmt_num(residual));
    let mut failed = Vec::new();
    if residual > SCALING_TOL {
        failed.push("scaling residual".to_string());
    }
    if scales.is_none() {
        for c in golden::check(&golden::published()).into_iter().filter(|c| c.name.contains(tile.name())) {
            text += &format!("{} {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name);
            if !c.pass {
                failed.push(c.name);
            }
        }
    }
    w(out, text)?;
    if let Some(path) = &cli.out {
        #[derive(Serialize)]
        struct Dump {
            tile: Tile,
            s_a: Vec<f64>,
            s_b: Vec<f64>,
            s_g: Vec<f64>,
            a_t: Vec<Vec<f64>>,
            b_t: Vec<Vec<f64>>,
            g: Vec<Vec<f64>>,
        }
        let d = Dump {
            tile,
            s_a: s.s_a().to_vec(),
            s_b: s.s_b().to_vec(),
            s_g: s.s_g().to_vec(),
            a_t: t.a_t().to_rows(),
            b_t: t.b_t().to_rows(),
            g: t.g().to_rows(),
        };
        let json = serde_json::to_string_pretty(&d).map_err(WinoError::from)?;
        std::fs::write(path, json).map_err(|e| WinoError::io(path, e))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}

fn wino_config(cli: &Cli) -> WinoConfig {
    WinoConfig {
        group_size: cli.group_size.unwrap_or(crate::wino::DEFAULT_GROUP_SIZE),
        precision: cli.bits.unwrap_or(Precision::W8A8),
    }
}

fn cmd_conv(cli: &Cli, a: &ConvArgs, out: &mut dyn Write, w: Emit) -> CliResult {
    let x = Tensor::load(&a.x)?;
    let wt = Tensor::load(&a.w)?;
    let shape = ConvShape::from_tensors(&x, &wt, a.padding)?;
    let cfg = wino_config(cli);
    let (tile, t) = match &a.scales {
        Some(p) => {
            let (tile, s) = load_scales(p, cli.tile)?;
            (tile, WinogradTransform::for_tile_with_scales(tile, s)?)
        }
        None => {
            let tile = cli.tile.unwrap_or(Tile::F63);
            (tile, standard_transform(tile))
        }
    };
    let reference = conv_direct_fp(&x, &wt, &shape)?;
    let y = match a.mode {
        ConvMode::Fp => reference.clone(),
        ConvMode::DirectQ8 => {
            let (xq, wq) = quantize_conv_operands(&x, &wt, &shape, cfg.group_size, cfg.precision)?;
            conv_direct_q8(&xq, &wq, &shape)?
        }
        ConvMode::WinoFp => wino_conv(&x, &wt, &t, Mode::Fp, a.padding, &cfg)?,
        ConvMode::WinoQ8 => wino_conv(&x, &wt, &t, Mode::Int8, a.padding, &cfg)?,
    };
    if let Some(path) = &cli.out {
        y.save(path)?;
    }
    let db = sqnr(&reference, &y)?;
    let tile_note = if a.mode.is_winograd() { format!(" tile {tile}") } else { String::new() };
    w(out, format!("mode {}{tile_note} output {:?}\nsqnr_db {}\n", a.mode, y.dims(), fmt_num(db)))
}

fn cmd_learn(
    cli: &Cli,
    config: Option<&Path>,
    resume: Option<&Path>,
    report_path: Option<&Path>,
    out: &mut dyn Write,
    w: Emit,
) -> CliResult {
    let mut cfg = match config {
        Some(p) => TuneConfig::load(p)?,
        None => TuneConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.tile {
        cfg.tile = t;
    }
    if let Some(g) = cli.group_size {
        cfg.group_size = g;
    }
    if let Some(b) = cli.bits {
        cfg.precision = b;
    }
    cfg.validate()?;
    let catalog = LayerCatalog::synthetic(cfg.catalog_layers, cfg.catalog_seed)?;
    let (scales, report) = match resume {
        Some(p) => {
            let (_, init) = load_scales(p, Some(cfg.tile))?;
            resume_scales(&catalog, &cfg, init)?
        }
        None => tune_scales(&catalog, &cfg)?,
    };
    if let Some(p) = &cli.out {
        scales.to_file(cfg.tile).save(p)?;
    }
    if let Some(p) = report_path {
        report.save(p)?;
    }
    let mut text = format!("tile {} steps {} parameters {}\n", cfg.tile, report.steps, report.parameter_count);
    if let (Some(first), Some(last)) = (report.loss_trace.first(), report.loss_trace.last()) {
        text += &format!("loss_first {}\nloss_last {}\n", fmt_num(*first), fmt_num(*last));
    }
    for l in &report.layers {
        let s = l.shape;
        text += &format!(
            "layer {}x{}x{}x{} sqnr_db {} -> {}\n",
            s.c_in,
            s.c_out,
            s.h,
            s.w,
            fmt_num(l.sqnr_before_db),
            fmt_num(l.sqnr_after_db)
        );
    }
    text += &format!(
        "mean_sqnr_before_db {}\nmean_sqnr_start_db {}\nmean_sqnr_after_db {}\nimprovement_db {}\n",
        fmt_num(report.mean_sqnr_before_db),
        fmt_num(report.mean_sqnr_start_db),
        fmt_num(report.mean_sqnr_after_db),
        fmt_num(report.improvement_db)
    );
    text += &format!("s_b {}\ns_g {}\n", fmt_row(scales.s_b()), fmt_row(scales.s_g()));
    w(out, text)?;
    if report.mean_sqnr_after_db < report.mean_sqnr_start_db - 0.1 {
        return Err(Failure::Check("tuned scales regressed held-out SQNR".into()));
    }
    Ok(())
}

fn parse_shape(s: &str) -> CliResult<ConvShape> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("bad shape {s:?}, expected CxKxHxW")))?;
    match parts[..] {
        [c, k, h, w] => Ok(ConvShape::new(1, c, h, w, k, 1)?),
        _ => Err(Failure::Usage(format!("bad shape {s:?}, expected CxKxHxW"))),
    }
}

fn cmd_bench(cli: &Cli, a: &BenchArgs, out: &mut dyn Write, w: Emit) -> CliResult {
    let tile = cli.tile.unwrap_or(Tile::F63);
    let cfg = wino_config(cli);
    let opts = BenchOptions {
        warmup: a.warmup,
        reps: a.reps,
        group_size: cfg.group_size,
        precision: cfg.precision,
        seed: cli.seed.unwrap_or(0),
    };
    let mut shapes = a.shapes.iter().map(|s| parse_shape(s)).collect::<CliResult<Vec<_>>>()?;
    let mut text = String::new();
    let report = match a.suite {
        Suite::Conv => {
            if shapes.is_empty() {
                shapes = menu_shapes();
            }
            let threads = a
                .thread_list
                .clone()
                .unwrap_or_else(|| vec![cli.threads.unwrap_or_else(rayon::current_num_threads)]);
            let modes = a.modes.clone().unwrap_or_else(|| ConvMode::ALL.to_vec());
            let mut report = run_conv_bench(&shapes, &modes, &threads, tile, &opts)?;
            if a.gemm_size > 0 {
                let g = a.gemm_size;
                report.gemm.push(run_gemm_bench(g, g, g, 64.min(g.next_power_of_two()).max(32), &opts)?);
            }
            for c in &report.conv {
                let s = c.shape;
                text += &format!(
                    "{}x{}x{}x{} {} threads {} median_s {} ratio {}{}\n",
                    s.c_in,
                    s.c_out,
                    s.h,
                    s.w,
                    c.mode,
                    c.threads,
                    c.median_s.map_or("-".into(), fmt_num),
                    c.ratio.map_or("-".into(), fmt_num),
                    c.skipped.as_ref().map_or(String::new(), |r| format!(" skipped: {r}"))
                );
            }
            for g in &report.gemm {
                text += &format!("gemm {}^3 fast_over_scalar {}\n", g.m, fmt_num(g.speedup));
            }
            if let Some(f) = report.summary.wino_q8_fast_fraction {
                text += &format!("wino_q8_fast_fraction {}\n", fmt_num(f));
            }
            report
        }
        Suite::Fidelity => {
            let path = a
                .scales
                .as_ref()
                .ok_or_else(|| Failure::Usage("the fidelity suite needs --scales".into()))?;
            let (_, learned) = load_scales(path, Some(tile))?;
            if shapes.is_empty() {
                shapes = LayerCatalog::synthetic(TuneConfig::default().catalog_layers, TuneConfig::default().catalog_seed)?.shapes();
            }
            let report = run_fidelity_suite(tile, Some(&learned), &shapes, &opts)?;
            for f in &report.fidelity {
                let s = f.shape;
                text += &format!(
                    "{}x{}x{}x{} standard {} learned {} f43 {}\n",
                    s.c_in,
                    s.c_out,
                    s.h,
                    s.w,
                    fmt_num(f.standard_sqnr_db),
                    f.learned_sqnr_db.map_or("-".into(), fmt_num),
                    fmt_num(f.f43_standard_sqnr_db)
                );
            }
            report
        }
    };
    match &cli.out {
        Some(p) => report.save(p)?,
        None => text += &format!("{}\n", report.to_json()),
    }
    if let Some(p) = &a.csv {
        std::fs::write(p, report.to_csv()).map_err(|e| WinoError::io(p, e))?;
    }
    w(out, text)?;
    if report.summary.learned_beats_standard == Some(false) {
        return Err(Failure::Check("learned scales do not beat standard scales on every shape".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, pass: bool, detail: String) -> VerifyCheck {
    VerifyCheck {
        name: name.into(),
        pass,
        detail,
    }
}

/// Golden tables, scaling condition, FP and integer oracles, GEMM identity.
pub fn verify_battery(tables: &GoldenTables, seed: u64) -> Vec<VerifyCheck> {
    let mut out: Vec<VerifyCheck> = golden::check(tables)
        .into_iter()
        .map(|c| {
            let detail = format!(
                "max_abs_err {} misprints {}/{}",
                fmt_num(c.max_abs_err),
                c.misprints_confirmed,
                c.misprints_expected
            );
            check(c.name, c.pass, detail)
        })
        .collect();
    let run = |name: &str, f: &dyn Fn() -> crate::Result<(bool, String)>| match f() {
        Ok((pass, detail)) => check(name, pass, detail),
        Err(e) => check(name, false, e.to_string()),
    };
    for tile in Tile::ALL {
        out.push(run(&format!("scaling condition {tile}"), &|| {
            let mut sampler = RngSpec::uniform(-3.0, 3.0, derive_seed(seed, 77)).sampler();
            let mut worst = tile.standard_scales().residual();
            for _ in 0..1000 {
                let mut draw = || {
                    let mag = 10f64.powf(sampler.next_f64());
                    if sampler.next_f64() < 0.0 { -mag } else { mag }
                };
                let s_b: Vec<f64> = (0..tile.n()).map(|_| draw()).collect();
                let s_g: Vec<f64> = (0..tile.n()).map(|_| draw()).collect();
                worst = worst.max(ScaleSet::new(s_b, s_g)?.residual());
            }
            Ok((worst <= SCALING_TOL, format!("max residual {}", fmt_num(worst))))
        }));
        out.push(run(&format!("fp winograd vs direct {tile}"), &|| {
            let t = standard_transform(tile);
            let mut worst = 0.0f64;
            for i in 0..10u64 {
                let s = ConvShape::new(1 + (i % 2) as usize, 1 + (i * 3 % 7) as usize, 5 + i as usize, 9 + (i * 2 % 5) as usize, 1 + (i % 4) as usize, (i % 3) as usize)?;
                let x = Tensor::new(&s.input_dims(), Fill::Rng(RngSpec::gaussian(0.0, 1.0, derive_seed(seed, i))))?;
                let wt = Tensor::new(&s.weight_dims(), Fill::Rng(RngSpec::gaussian(0.0, 1.0, derive_seed(seed, 100 + i))))?;
                let want = conv_direct_fp(&x, &wt, &s)?;
                let got = wino_conv(&x, &wt, &t, Mode::Fp, s.padding, &WinoConfig::default())?;
                worst = worst.max(got.relative_error(&want));
            }
            Ok((worst <= 1e-4, format!("max relative error {}", fmt_num(worst))))
        }));
        out.push(run(&format!("int8 vs fake-quant {tile}"), &|| {
            let t = standard_transform(tile);
            let mut worst = 0.0f64;
            for i in 0..4u64 {
                let s = ConvShape::new(1, 32 + 8 * i as usize, 10, 9 + i as usize, 4 + i as usize, 1)?;
                let x = Tensor::new(&s.input_dims(), Fill::Rng(RngSpec::gaussian(0.0, 1.0, derive_seed(seed, 200 + i))))?;
                let wt = Tensor::new(&s.weight_dims(), Fill::Rng(RngSpec::gaussian(0.0, 0.1, derive_seed(seed, 300 + i))))?;
                let cfg = WinoConfig::default();
                let a = wino_conv(&x, &wt, &t, Mode::Int8, 1, &cfg)?;
                let b = wino_conv(&x, &wt, &t, Mode::FakeQuant, 1, &cfg)?;
                worst = worst.max(a.relative_error(&b));
            }
            Ok((worst <= 1e-5, format!("max relative error {}", fmt_num(worst))))
        }));
    }
    out.push(run("fast gemm equals scalar gemm", &|| {
        let mut cases = 0;
        for (m, k, n) in [(1, 1, 1), (3, 7, 5), (17, 40, 33), (9, 64, 16)] {
            let mut a = vec![0.0f32; m * k];
            let mut b = vec![0.0f32; n * k];
            RngSpec::gaussian(0.0, 1.0, derive_seed(seed, 400 + cases)).sampler().fill_f32(&mut a);
            RngSpec::gaussian(0.0, 1.0, derive_seed(seed, 500 + cases)).sampler().fill_f32(&mut b);
            let gs = k.min(32);
            let aq = GroupQuantized::from_matrix(m, k, &a, gs, Bits::Eight)?;
            let bq = GroupQuantized::from_matrix(n, k, &b, gs, Bits::Eight)?;
            for v in [1, 16] {
                if gemm_q8_fast(&aq, &pack_weights(&bq, v)?)? != gemm_q8_scalar(&aq, &bq)? {
                    return Ok((false, format!("mismatch at {m}x{k}x{n} width {v}")));
                }
            }
            cases += 1;
        }
        Ok((true, format!("{cases} shapes bit-identical")))
    }));
    out.push(run("f43 beats f63 at standard scales", &|| {
        let s = ConvShape::new(1, 32, 16, 16, 32, 1)?;
        let x = Tensor::new(&s.input_dims(), Fill::Rng(RngSpec::gaussian(0.0, 1.0, derive_seed(seed, 600))))?;
        let wt = Tensor::new(&s.weight_dims(), Fill::Rng(RngSpec::gaussian(0.0, 0.08, derive_seed(seed, 601))))?;
        let y = conv_direct_fp(&x, &wt, &s)?;
        let db = |tile| -> crate::Result<f64> {
            sqnr(&y, &wino_conv(&x, &wt, &standard_transform(tile), Mode::Int8, 1, &WinoConfig::default())?)
        };
        let (a, b) = (db(Tile::F43)?, db(Tile::F63)?);
        Ok((a > b, format!("F43 {} dB, F63 {} dB", fmt_num(a), fmt_num(b))))
    }));
    out
}

fn cmd_verify(cli: &Cli, json: bool, golden_path: Option<&Path>, out: &mut dyn Write, w: Emit) -> CliResult {
    let tables = match golden_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| WinoError::io(p, e))?;
            serde_json::from_str::<GoldenTables>(&text).map_err(WinoError::from)?
        }
        None => golden::published(),
    };
    let checks = verify_battery(&tables, cli.seed.unwrap_or(0));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    let text = if json {
        serde_json::to_string_pretty(&checks).map_err(WinoError::from)? + "\n"
    } else {
        let mut t = String::new();
        for c in &checks {
            t += &format!("{} {:<36} {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        t + &format!("{} of {} checks passed\n", checks.len() - failed.len(), checks.len())
    };
    w(out, text)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format() {
        assert_eq!(fmt_num(4.0), "4");
        assert_eq!(fmt_num(-5.0), "-5");
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(-0.0), "0");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_num(-1.0 / 6.0), "-0.166666667");
        assert_eq!(fmt_num(123456.789012), "123456.789");
        assert_eq!(fmt_num(1e-9), "1.00000000e-9");
        assert_eq!(fmt_num(12.5), "12.5");
    }

    #[test]
    fn battery_passes_and_names_corruption() {
        let checks = verify_battery(&golden::published(), 0);
        assert!(checks.iter().all(|c| c.pass), "{checks:?}");
        let mut bad = golden::published();
        bad.matrices[0].rows[0][0] += 1.0;
        let name = format!("golden {} {}", bad.matrices[0].tile, bad.matrices[0].which.label());
        let checks = verify_battery(&bad, 0);
        let failed: Vec<_> = checks.iter().filter(|c| !c.pass).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].name, name);
    }
}
