//! Data-free tuning of the Winograd transform scales.
//!
//! Each step draws `layers_per_step` layers from a [`LayerCatalog`], feeds
//! them fresh noise, and descends the mean `-SQNR` of the quantized pipeline
//! against the FP64 direct convolution. Only `(s_b, s_g)` move; `s_a`
//! follows from `s_a * s_b * s_g = 1`, so the transform stays exact in
//! full precision. [`tune_transforms`] is the baseline that instead frees
//! every entry of `A^T`, `B^T` and `G`.

pub mod diff;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use diff::{scale_grads, LayerProblem, MatGrads, Objective, QuantMode, Tape};

use crate::conv_ref::{conv_direct_fp, ConvShape};
use crate::error::{Result, WinoError};
use crate::matrix::Mat;
use crate::quant::{sqnr, Precision, ALLOWED_GROUP_SIZES};
use crate::tensor::{derive_seed, Distribution, Fill, RngSpec, Tensor};
use crate::transforms::{rescale_transform, standard_transform, ScaleFile, ScaleSet, Tile, WinogradTransform};
use crate::wino::{tap_range_stats, wino_forward, Mode, WinoConfig};

pub const MENU_CHANNELS: [usize; 3] = [32, 64, 128];
pub const MENU_SPATIAL: [usize; 2] = [16, 32];

const STREAM_WEIGHTS: u64 = 0x5745_4947;
const STREAM_PICK: u64 = 0x5049_434b;
const STREAM_NOISE: u64 = 0x4e4f_4953;
const STREAM_EVAL: u64 = 0x4556_414c;

#[derive(Debug, Clone)]
pub struct CatalogLayer {
    pub shape: ConvShape,
    pub w: Tensor,
}

/// Fixed conv layers with Kaiming-normal weights, `std = sqrt(2 / (9 C))`.
#[derive(Debug, Clone)]
pub struct LayerCatalog {
    pub layers: Vec<CatalogLayer>,
}

impl LayerCatalog {
    /// `count` distinct shapes from `C, K in MENU_CHANNELS`,
    /// `H = W in MENU_SPATIAL`, chosen by a seeded shuffle.
    pub fn synthetic(count: usize, seed: u64) -> Result<Self> {
        let mut menu = Vec::new();
        for &c in &MENU_CHANNELS {
            for &k in &MENU_CHANNELS {
                for &hw in &MENU_SPATIAL {
                    menu.push(ConvShape::new(1, c, hw, hw, k, 1)?);
                }
            }
        }
        if count == 0 || count > menu.len() {
            return Err(WinoError::Config(format!("catalog size must be 1..={}, got {count}", menu.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = rand::seq::index::sample(&mut rng, menu.len(), count);
        let shapes: Vec<ConvShape> = picks.iter().map(|i| menu[i]).collect();
        Self::from_shapes(&shapes, seed)
    }

    pub fn from_shapes(shapes: &[ConvShape], seed: u64) -> Result<Self> {
        if shapes.is_empty() {
            return Err(WinoError::Config("empty layer catalog".into()));
        }
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, &shape)| {
                shape.validate()?;
                if shape.padding != 1 {
                    return Err(WinoError::Config("catalog layers use padding 1".into()));
                }
                let std = (2.0 / (9.0 * shape.c_in as f64)).sqrt();
                let spec = RngSpec::gaussian(0.0, std, derive_seed(seed ^ STREAM_WEIGHTS, i as u64));
                let w = Tensor::new(&shape.weight_dims(), Fill::Rng(spec))?;
                Ok(CatalogLayer { shape, w })
            })
            .collect::<Result<_>>()?;
        Ok(LayerCatalog { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn shapes(&self) -> Vec<ConvShape> {
        self.layers.iter().map(|l| l.shape).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub tile: Tile,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub layers_per_step: usize,
    pub learning_rate: f64,
    /// Global L2 norm cap on each step's gradient.
    pub grad_clip: f64,
    /// Scales are projected to `|s| >= min_scale` after every step.
    pub min_scale: f64,
    /// Images per layer per step.
    pub batch_size: usize,
    /// Height and width of the training noise.
    pub spatial: usize,
    pub noise: Distribution,
    pub group_size: usize,
    pub precision: Precision,
    pub seed: u64,
    pub catalog_layers: usize,
    pub catalog_seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            tile: Tile::F63,
            epochs: 20,
            batches_per_epoch: 100,
            layers_per_step: 2,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            min_scale: 1e-6,
            batch_size: 1,
            spatial: 12,
            noise: Distribution::Gaussian { mean: 0.0, std: 1.0 },
            group_size: crate::wino::DEFAULT_GROUP_SIZE,
            precision: Precision::W8A8,
            seed: 0,
            catalog_layers: 8,
            catalog_seed: 1,
        }
    }
}

impl TuneConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TuneConfig = serde_json::from_str(text).map_err(|e| WinoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| WinoError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn steps(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }

    pub fn wino_config(&self) -> WinoConfig {
        WinoConfig {
            group_size: self.group_size,
            precision: self.precision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(WinoError::Config(msg.into()));
        if self.steps() == 0 {
            return bad("epochs and batches_per_epoch must be positive");
        }
        if self.layers_per_step == 0 || self.batch_size == 0 {
            return bad("layers_per_step and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative and finite");
        }
        if !(self.grad_clip > 0.0) || !(self.min_scale > 0.0 && self.min_scale.is_finite()) {
            return bad("grad_clip and min_scale must be positive");
        }
        if self.spatial < 3 {
            return bad("spatial must be at least 3");
        }
        if !ALLOWED_GROUP_SIZES.contains(&self.group_size) {
            return bad("group_size must be one of 32, 64, 128, 256");
        }
        RngSpec { dist: self.noise, seed: 0 }.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEval {
    pub shape: ConvShape,
    pub sqnr_db: f64,
    pub tap_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub shape: ConvShape,
    pub sqnr_before_db: f64,
    pub sqnr_after_db: f64,
    pub tap_ratio_before: Option<f64>,
    pub tap_ratio_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixFile {
    pub tile: Tile,
    pub a_t: Vec<Vec<f64>>,
    pub b_t: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneTarget {
    Scales,
    Matrices,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub tile: Tile,
    pub target: TuneTarget,
    pub parameter_count: usize,
    pub steps: usize,
    pub seed: u64,
    pub resumed: bool,
    pub loss_trace: Vec<f64>,
    /// Held-out results; "before" is always the standard transform.
    pub layers: Vec<LayerResult>,
    pub mean_sqnr_before_db: f64,
    /// Held-out mean at the starting parameters; differs from
    /// `mean_sqnr_before_db` only when resuming.
    pub mean_sqnr_start_db: f64,
    pub mean_sqnr_after_db: f64,
    pub improvement_db: f64,
    /// Set when the tuned transform is worse than the standard one.
    pub regressed: bool,
    pub scales: Option<ScaleFile>,
    pub matrices: Option<MatrixFile>,
    pub wall_time_s: f64,
}

impl TuneReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| WinoError::io(path, e))
    }
}

/// Held-out input for catalog layer `index`: `[1, C, H, W]` standard normal
/// noise from a stream disjoint from the training batches.
pub fn eval_input(shape: &ConvShape, seed: u64, index: usize) -> Result<Tensor> {
    let spec = RngSpec::gaussian(0.0, 1.0, derive_seed(seed ^ STREAM_EVAL, index as u64));
    Tensor::new(&shape.input_dims(), Fill::Rng(spec))
}

/// Int8 engine SQNR and tap spread of every catalog layer on held-out noise.
pub fn evaluate(catalog: &LayerCatalog, t: &WinogradTransform, cfg: &WinoConfig, seed: u64) -> Result<Vec<LayerEval>> {
    catalog
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let x = eval_input(&layer.shape, seed, i)?;
            let reference = conv_direct_fp(&x, &layer.w, &layer.shape)?;
            let out = wino_forward(&x, &layer.w, t, Mode::Int8, layer.shape.padding, cfg)?;
            Ok(LayerEval {
                shape: layer.shape,
                sqnr_db: sqnr(&reference, &out.y)?,
                tap_ratio: tap_range_stats(&out.y_domain)?.max_min_ratio,
            })
        })
        .collect()
}

pub fn mean_sqnr(evals: &[LayerEval]) -> f64 {
    evals.iter().map(|e| e.sqnr_db).sum::<f64>() / evals.len() as f64
}

/// Loss and `(d s_b, d s_g)` of one problem.
pub fn ste_gradients(
    problem: &LayerProblem,
    t: &WinogradTransform,
    mode: QuantMode,
    objective: Objective,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::default();
    if mode == QuantMode::Frozen {
        problem.loss(t, QuantMode::Round, &mut tape, objective)?;
    }
    let (loss, g) = problem.loss_and_grad(t, mode, &mut tape, objective)?;
    let (d_sb, d_sg) = scale_grads(t, &g);
    Ok((loss, d_sb, d_sg))
}

/// Analytic versus central-difference gradient of the frozen-residual loss.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    /// `[d s_b..., d s_g...]`
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|analytic - numeric| / |numeric|` over components with
    /// `|numeric| > 1e-6`.
    pub max_rel_err: f64,
    pub compared: usize,
}

pub fn check_scale_gradient(problem: &LayerProblem, t: &WinogradTransform, rel_step: f64) -> Result<GradCheck> {
    let objective = Objective::NegSqnr;
    let mut tape = Tape::default();
    problem.loss(t, QuantMode::Round, &mut tape, objective)?;
    let (_, g) = problem.loss_and_grad(t, QuantMode::Frozen, &mut tape, objective)?;
    let (d_sb, d_sg) = scale_grads(t, &g);
    let analytic: Vec<f64> = d_sb.into_iter().chain(d_sg).collect();
    let s = t.scales();
    let n = t.n();
    let mut numeric = Vec::with_capacity(2 * n);
    for idx in 0..2 * n {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut sb = s.s_b().to_vec();
            let mut sg = s.s_g().to_vec();
            if idx < n {
                sb[idx] += delta;
            } else {
                sg[idx - n] += delta;
            }
            let tt = rescale_transform(t, &sb, &sg)?;
            problem.loss(&tt, QuantMode::Frozen, &mut tape, objective)
        };
        let base = if idx < n { s.s_b()[idx] } else { s.s_g()[idx - n] };
        let h = rel_step * base.abs();
        numeric.push((eval(h)? - eval(-h)?) / (2.0 * h));
    }
    let mut max_rel_err = 0.0f64;
    let mut compared = 0;
    for (a, f) in analytic.iter().zip(&numeric) {
        if f.abs() > 1e-6 {
            max_rel_err = max_rel_err.max((a - f).abs() / f.abs());
            compared += 1;
        }
    }
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_err,
        compared,
    })
}

enum Params {
    Scales { s_b: Vec<f64>, s_g: Vec<f64> },
    Matrices { a_t: Mat, b_t: Mat, g: Mat },
}

impl Params {
    fn count(&self) -> usize {
        match self {
            Params::Scales { s_b, s_g } => s_b.len() + s_g.len(),
            Params::Matrices { a_t, b_t, g } => a_t.as_slice().len() + b_t.as_slice().len() + g.as_slice().len(),
        }
    }

    fn transform(&self, base: &WinogradTransform) -> Result<WinogradTransform> {
        match self {
            Params::Scales { s_b, s_g } => rescale_transform(base, s_b, s_g),
            Params::Matrices { a_t, b_t, g } => base.with_free_matrices(a_t.clone(), b_t.clone(), g.clone()),
        }
    }

    fn gradient(&self, t: &WinogradTransform, g: &MatGrads) -> Vec<f64> {
        match self {
            Params::Scales { .. } => {
                let (d_sb, d_sg) = scale_grads(t, g);
                d_sb.into_iter().chain(d_sg).collect()
            }
            Params::Matrices { .. } => {
                [&g.a_t, &g.b_t, &g.g].iter().flat_map(|m| m.as_slice().iter().copied()).collect()
            }
        }
    }

    fn descend(&mut self, step: &[f64], min_scale: f64) {
        match self {
            Params::Scales { s_b, s_g } => {
                for (s, d) in s_b.iter_mut().chain(s_g.iter_mut()).zip(step) {
                    *s -= d;
                    if s.abs() < min_scale {
                        *s = if *s < 0.0 { -min_scale } else { min_scale };
                    }
                }
            }
            Params::Matrices { a_t, b_t, g } => {
                let all = a_t.as_mut_slice().iter_mut().chain(b_t.as_mut_slice().iter_mut()).chain(g.as_mut_slice().iter_mut());
                for (v, d) in all.zip(step) {
                    *v -= d;
                }
            }
        }
    }
}

fn run(
    catalog: &LayerCatalog,
    cfg: &TuneConfig,
    mut params: Params,
    base: &WinogradTransform,
    resumed: bool,
) -> Result<(WinogradTransform, TuneReport)> {
    cfg.validate()?;
    if cfg.layers_per_step > catalog.len() {
        return Err(WinoError::Config(format!(
            "layers_per_step {} exceeds catalog size {}",
            cfg.layers_per_step,
            catalog.len()
        )));
    }
    let started = Instant::now();
    let wcfg = cfg.wino_config();
    let before = evaluate(catalog, &standard_transform(cfg.tile), &wcfg, cfg.seed)?;
    let scale_target = matches!(params, Params::Scales { .. });
    let start = if resumed {
        mean_sqnr(&evaluate(catalog, &params.transform(base)?, &wcfg, cfg.seed)?)
    } else {
        mean_sqnr(&before)
    };
    let last_good = |p: &Params| match p {
        Params::Scales { s_b, s_g } => ScaleSet::new(s_b.clone(), s_g.clone()).unwrap_or_else(|_| base.scales().clone()),
        Params::Matrices { .. } => base.scales().clone(),
    };

    let mut trace = Vec::with_capacity(cfg.steps());
    for step in 0..cfg.steps() {
        let t = params.transform(base)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ STREAM_PICK, step as u64));
        let picks = rand::seq::index::sample(&mut rng, catalog.len(), cfg.layers_per_step);
        let mut grad = vec![0.0; params.count()];
        let mut loss = 0.0;
        for (j, li) in picks.iter().enumerate() {
            let layer = &catalog.layers[li];
            let shape = ConvShape::new(cfg.batch_size, layer.shape.c_in, cfg.spatial, cfg.spatial, layer.shape.c_out, 1)?;
            let seed = derive_seed(cfg.seed ^ STREAM_NOISE, (step * cfg.layers_per_step + j) as u64);
            let x = Tensor::new(&shape.input_dims(), Fill::Rng(RngSpec { dist: cfg.noise, seed }))?;
            let problem = LayerProblem::new(shape, x, layer.w.clone(), wcfg)?;
            let (l, g) = problem.loss_and_grad(&t, QuantMode::Round, &mut Tape::default(), Objective::NegSqnr)?;
            loss += l / cfg.layers_per_step as f64;
            for (acc, v) in grad.iter_mut().zip(params.gradient(&t, &g)) {
                *acc += v / cfg.layers_per_step as f64;
            }
        }
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(WinoError::TuneDiverged {
                step,
                last_good: Box::new(last_good(&params)),
            });
        }
        let k = cfg.learning_rate * if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let delta: Vec<f64> = grad.iter().map(|g| g * k).collect();
        params.descend(&delta, cfg.min_scale);
        if params.transform(base).is_err() {
            return Err(WinoError::TuneDiverged {
                step,
                last_good: Box::new(last_good(&params)),
            });
        }
        trace.push(loss);
    }

    let tuned = params.transform(base)?;
    let after = evaluate(catalog, &tuned, &wcfg, cfg.seed)?;
    let layers: Vec<LayerResult> = before
        .iter()
        .zip(&after)
        .map(|(b, a)| LayerResult {
            shape: b.shape,
            sqnr_before_db: b.sqnr_db,
            sqnr_after_db: a.sqnr_db,
            tap_ratio_before: b.tap_ratio,
            tap_ratio_after: a.tap_ratio,
        })
        .collect();
    let (mb, ma) = (mean_sqnr(&before), mean_sqnr(&after));
    let report = TuneReport {
        tile: cfg.tile,
        target: if scale_target { TuneTarget::Scales } else { TuneTarget::Matrices },
        parameter_count: params.count(),
        steps: cfg.steps(),
        seed: cfg.seed,
        resumed,
        loss_trace: trace,
        layers,
        mean_sqnr_before_db: mb,
        mean_sqnr_start_db: start,
        mean_sqnr_after_db: ma,
        improvement_db: ma - mb,
        regressed: ma < mb,
        scales: scale_target.then(|| tuned.scales().to_file(cfg.tile)),
        matrices: (!scale_target).then(|| MatrixFile {
            tile: cfg.tile,
            a_t: tuned.a_t().to_rows(),
            b_t: tuned.b_t().to_rows(),
            g: tuned.g().to_rows(),
        }),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((tuned, report))
}

/// Learns `(s_b, s_g)` starting from the standard scales.
pub fn tune_scales(catalog: &LayerCatalog, cfg: &TuneConfig) -> Result<(ScaleSet, TuneReport)> {
    tune_scales_from(catalog, cfg, cfg.tile.standard_scales(), false)
}

/// Continues from previously saved scales.
pub fn resume_scales(catalog: &LayerCatalog, cfg: &TuneConfig, init: ScaleSet) -> Result<(ScaleSet, TuneReport)> {
    tune_scales_from(catalog, cfg, init, true)
}

fn tune_scales_from(catalog: &LayerCatalog, cfg: &TuneConfig, init: ScaleSet, resumed: bool) -> Result<(ScaleSet, TuneReport)> {
    if init.len() != cfg.tile.n() {
        return Err(WinoError::InvalidScale(format!("{} needs {} scales, got {}", cfg.tile, cfg.tile.n(), init.len())));
    }
    let base = standard_transform(cfg.tile);
    let params = Params::Scales {
        s_b: init.s_b().to_vec(),
        s_g: init.s_g().to_vec(),
    };
    let (t, report) = run(catalog, cfg, params, &base, resumed)?;
    Ok((t.scales().clone(), report))
}

/// Baseline: every entry of `A^T`, `B^T` and `G` is free.
pub fn tune_transforms(catalog: &LayerCatalog, cfg: &TuneConfig) -> Result<(WinogradTransform, TuneReport)> {
    let base = standard_transform(cfg.tile);
    let params = Params::Matrices {
        a_t: base.a_t().clone(),
        b_t: base.b_t().clone(),
        g: base.g().clone(),
    };
    run(catalog, cfg, params, &base, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(steps: usize) -> TuneConfig {
        TuneConfig {
            epochs: 1,
            batches_per_epoch: steps,
            spatial: 8,
            catalog_layers: 2,
            ..TuneConfig::default()
        }
    }

    fn tiny_catalog() -> LayerCatalog {
        let shapes = [ConvShape::new(1, 32, 8, 8, 8, 1).unwrap(), ConvShape::new(1, 32, 6, 6, 16, 1).unwrap()];
        LayerCatalog::from_shapes(&shapes, 3).unwrap()
    }

    #[test]
    fn catalog_is_seeded_and_distinct() {
        let a = LayerCatalog::synthetic(8, 5).unwrap();
        let b = LayerCatalog::synthetic(8, 5).unwrap();
        assert_eq!(a.shapes(), b.shapes());
        assert_eq!(a.layers[3].w, b.layers[3].w);
        let mut s = a.shapes();
        s.dedup();
        assert_eq!(s.len(), 8);
        for l in &a.layers {
            assert!(MENU_CHANNELS.contains(&l.shape.c_in) && MENU_SPATIAL.contains(&l.shape.h));
        }
        assert!(LayerCatalog::synthetic(19, 0).is_err());
    }

    #[test]
    fn kaiming_std() {
        let c = LayerCatalog::from_shapes(&[ConvShape::new(1, 64, 8, 8, 64, 1).unwrap()], 0).unwrap();
        let d = c.layers[0].w.data();
        let var = d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / d.len() as f64;
        let want = 2.0 / (9.0 * 64.0);
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
    }

    #[test]
    fn config_json_roundtrip_and_validation() {
        let cfg = TuneConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TuneConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(TuneConfig::from_json(r#"{"epochs": 3}"#).unwrap().epochs, 3);
        assert!(matches!(TuneConfig::from_json(r#"{"epochz": 3}"#), Err(WinoError::Config(_))));
        assert!(matches!(TuneConfig::from_json(r#"{"learning_rate": -1}"#), Err(WinoError::Config(_))));
        assert!(matches!(TuneConfig::from_json(r#"{"group_size": 48}"#), Err(WinoError::Config(_))));
    }

    #[test]
    fn tuning_is_deterministic() {
        let cat = tiny_catalog();
        let (a, ra) = tune_scales(&cat, &tiny(3)).unwrap();
        let (b, rb) = tune_scales(&cat, &tiny(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.loss_trace, rb.loss_trace);
        assert_eq!(ra.loss_trace.len(), 3);
        assert_eq!(ra.parameter_count, 16);
        assert!((a.residual()) < 1e-12);
    }

    #[test]
    fn huge_learning_rate_diverges_or_recovers_cleanly() {
        let cat = tiny_catalog();
        let cfg = TuneConfig {
            learning_rate: 1e300,
            grad_clip: 1e300,
            ..tiny(4)
        };
        match tune_scales(&cat, &cfg) {
            Err(WinoError::TuneDiverged { last_good, .. }) => assert!(last_good.residual() < 1e-9),
            Ok((s, _)) => assert!(s.s_b().iter().chain(s.s_g()).all(|v| v.is_finite())),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let cfg = TuneConfig {
            learning_rate: 0.0,
            ..tiny(2)
        };
        let (s, r) = tune_scales(&tiny_catalog(), &cfg).unwrap();
        assert_eq!(s, Tile::F63.standard_scales());
        assert_eq!(r.mean_sqnr_after_db, r.mean_sqnr_before_db);
        let (t, _) = tune_transforms(&tiny_catalog(), &cfg).unwrap();
        let std = standard_transform(Tile::F63);
        assert_eq!((t.a_t(), t.b_t(), t.g()), (std.a_t(), std.b_t(), std.g()));
    }

    #[test]
    fn too_many_layers_per_step() {
        let cfg = TuneConfig {
            layers_per_step: 3,
            ..tiny(1)
        };
        assert!(matches!(tune_scales(&tiny_catalog(), &cfg), Err(WinoError::Config(_))));
    }

    #[test]
    fn matrix_baseline_counts_parameters() {
        let (_, r) = tune_transforms(&tiny_catalog(), &tiny(1)).unwrap();
        assert_eq!(r.parameter_count, 8 * (6 + 8 + 3));
        assert!(r.matrices.is_some() && r.scales.is_none());
    }

    #[test]
    fn frozen_gradient_check_passes() {
        let s = ConvShape::new(1, 16, 10, 10, 4, 1).unwrap();
        let x = Tensor::new(&s.input_dims(), Fill::Rng(RngSpec::gaussian(0.0, 1.0, 2))).unwrap();
        let w = Tensor::new(&s.weight_dims(), Fill::Rng(RngSpec::gaussian(0.0, 0.1, 3))).unwrap();
        let p = LayerProblem::new(s, x, w, WinoConfig::default()).unwrap();
        let chk = check_scale_gradient(&p, &standard_transform(Tile::F63), 1e-4).unwrap();
        assert_eq!(chk.analytic.len(), 16);
        assert!(chk.compared >= 12, "{chk:?}");
        assert!(chk.max_rel_err < 0.05, "{chk:?}");
    }
}
