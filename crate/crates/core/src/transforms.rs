//! Winograd transformation matrices built from polynomial points.
//!
//! For `F(m, r)` with `n = m + r - 1` points `(f_i, g_i)` the matrices are
//!
//! ```text
//! A^T = V(n, m)^T  diag(s_a)      (m x n)
//! B^T = diag(s_b)  V(n, n)^-T     (n x n)
//! G   = diag(s_g)  V(n, r)        (n x r)
//! ```
//!
//! where `V(a, b)[i][j] = f_i^j * g_i^(b-1-j)` and `s_a * s_b * s_g = 1`
//! elementwise. The diagonal scales cancel in exact arithmetic, so every
//! valid scale set computes the same convolution; they only change how
//! values are distributed across Winograd-domain taps.
//!
//! Matrices are always derived here; the printed tables in [`crate::golden`]
//! are used only as regression checks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WinoError};
use crate::matrix::Mat;

/// Pivot threshold (relative) below which `V(n, n)` is treated as singular.
const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tile {
    F43,
    F63,
}

impl Tile {
    pub const ALL: [Tile; 2] = [Tile::F43, Tile::F63];

    pub fn m(self) -> usize {
        match self {
            Tile::F43 => 4,
            Tile::F63 => 6,
        }
    }

    pub fn r(self) -> usize {
        3
    }

    pub fn n(self) -> usize {
        self.m() + self.r() - 1
    }

    pub fn points(self) -> PolyPoints {
        let pts = match self {
            Tile::F43 => vec![(0.0, 1.0), (1.0, 1.0), (-1.0, 1.0), (2.0, 1.0), (-2.0, 1.0), (1.0, 0.0)],
            Tile::F63 => vec![
                (0.0, 1.0),
                (1.0, 1.0),
                (-1.0, 1.0),
                (2.0, 1.0),
                (-2.0, 1.0),
                (0.5, 1.0),
                (-0.5, 1.0),
                (1.0, 0.0),
            ],
        };
        PolyPoints::new(pts).expect("standard points are distinct")
    }

    /// The conventional `(s_b, s_g)` pair; `s_a` is all ones.
    pub fn standard_scales(self) -> ScaleSet {
        let (s_b, s_g) = match self {
            Tile::F43 => (
                vec![4.0, -6.0, -6.0, 24.0, 24.0, 1.0],
                vec![1.0 / 4.0, -1.0 / 6.0, -1.0 / 6.0, 1.0 / 24.0, 1.0 / 24.0, 1.0],
            ),
            Tile::F63 => (
                vec![1.0, -9.0 / 2.0, -9.0 / 2.0, 90.0, 90.0, 45.0 / 32.0, 45.0 / 32.0, 1.0],
                vec![
                    1.0,
                    -2.0 / 9.0,
                    -2.0 / 9.0,
                    1.0 / 90.0,
                    1.0 / 90.0,
                    32.0 / 45.0,
                    32.0 / 45.0,
                    1.0,
                ],
            ),
        };
        ScaleSet::new(s_b, s_g).expect("standard scales are valid")
    }

    pub fn name(self) -> &'static str {
        match self {
            Tile::F43 => "F43",
            Tile::F63 => "F63",
        }
    }
}

impl fmt::Display for Tile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tile {
    type Err = WinoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f43" | "f(4,3)" => Ok(Tile::F43),
            "f63" | "f(6,3)" => Ok(Tile::F63),
            other => Err(WinoError::Config(format!("unknown tile {other:?}, expected f43 or f63"))),
        }
    }
}

/// Homogeneous interpolation points `(f_i, g_i)`; `(1, 0)` is the point at
/// infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyPoints(Vec<(f64, f64)>);

impl PolyPoints {
    /// Fails with `SingularTransform` when two points coincide projectively
    /// or a point is `(0, 0)`.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        for (i, &(f, g)) in points.iter().enumerate() {
            if !(f.is_finite() && g.is_finite()) || (f == 0.0 && g == 0.0) {
                return Err(WinoError::SingularTransform(format!(
                    "point {i} = ({f}, {g}) is not a projective point"
                )));
            }
        }
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let (fi, gi) = points[i];
                let (fj, gj) = points[j];
                if (fi * gj - fj * gi).abs() <= 1e-15 * (fi.abs() + gi.abs()) * (fj.abs() + gj.abs()) {
                    return Err(WinoError::SingularTransform(format!(
                        "points {i} and {j} coincide: ({fi}, {gi}) ~ ({fj}, {gj})"
                    )));
                }
            }
        }
        Ok(PolyPoints(points))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[(f64, f64)] {
        &self.0
    }
}

/// Vandermonde matrix with entry `(i, j) = f_i^j * g_i^(cols-1-j)`, using
/// `0^0 = 1`.
pub fn vandermonde(points: &[(f64, f64)], cols: usize) -> Mat {
    assert!(cols >= 1, "vandermonde needs at least one column");
    let mut v = Mat::zeros(points.len(), cols);
    for (i, &(f, g)) in points.iter().enumerate() {
        for j in 0..cols {
            v[(i, j)] = f.powi(j as i32) * g.powi((cols - 1 - j) as i32);
        }
    }
    v
}

/// Diagonal transform scales. `s_a` is always derived as `1 / (s_b * s_g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet {
    s_a: Vec<f64>,
    s_b: Vec<f64>,
    s_g: Vec<f64>,
}

fn check_scale_vec(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite() || *x == 0.0) {
        None => Ok(()),
        Some(i) => Err(WinoError::InvalidScale(format!("{name}[{i}] = {}", v[i]))),
    }
}

impl ScaleSet {
    pub fn new(s_b: Vec<f64>, s_g: Vec<f64>) -> Result<Self> {
        if s_b.len() != s_g.len() || s_b.is_empty() {
            return Err(WinoError::InvalidScale(format!(
                "s_b has {} entries, s_g has {}",
                s_b.len(),
                s_g.len()
            )));
        }
        check_scale_vec("s_b", &s_b)?;
        check_scale_vec("s_g", &s_g)?;
        let s_a: Vec<f64> = s_b.iter().zip(&s_g).map(|(b, g)| 1.0 / (b * g)).collect();
        check_scale_vec("s_a", &s_a)?;
        Ok(ScaleSet { s_a, s_b, s_g })
    }

    pub fn len(&self) -> usize {
        self.s_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_b.is_empty()
    }

    pub fn s_a(&self) -> &[f64] {
        &self.s_a
    }

    pub fn s_b(&self) -> &[f64] {
        &self.s_b
    }

    pub fn s_g(&self) -> &[f64] {
        &self.s_g
    }

    /// `max_i |s_a[i] * s_b[i] * s_g[i] - 1|`
    pub fn residual(&self) -> f64 {
        (0..self.len())
            .map(|i| (self.s_a[i] * self.s_b[i] * self.s_g[i] - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_file(&self, tile: Tile) -> ScaleFile {
        ScaleFile {
            tile,
            s_b: self.s_b.clone(),
            s_g: self.s_g.clone(),
        }
    }
}

/// On-disk form of a scale set: `{"tile": "F63", "s_b": [...], "s_g": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFile {
    pub tile: Tile,
    pub s_b: Vec<f64>,
    pub s_g: Vec<f64>,
}

impl ScaleFile {
    pub fn into_scales(self) -> Result<(Tile, ScaleSet)> {
        if self.s_b.len() != self.tile.n() {
            return Err(WinoError::InvalidScale(format!(
                "{} needs {} scales, file has {}",
                self.tile,
                self.tile.n(),
                self.s_b.len()
            )));
        }
        let scales = ScaleSet::new(self.s_b, self.s_g)?;
        Ok((self.tile, scales))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scale file serializes")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(Tile, ScaleSet)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| WinoError::io(path, e))?;
        Self::from_json(&text)?.into_scales()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| WinoError::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct WinogradTransform {
    m: usize,
    r: usize,
    n: usize,
    points: PolyPoints,
    scales: ScaleSet,
    /// `V(n, m)^T`, `V(n, n)^-T`, `V(n, r)`: the unscaled factors.
    v_a: Mat,
    v_b: Mat,
    v_g: Mat,
    a_t: Mat,
    b_t: Mat,
    g: Mat,
}

pub fn build_transform(m: usize, r: usize, points: PolyPoints, scales: ScaleSet) -> Result<WinogradTransform> {
    if m == 0 || r == 0 {
        return Err(WinoError::InvalidShape(format!("F({m},{r}) is empty")));
    }
    let n = m + r - 1;
    if points.len() != n {
        return Err(WinoError::InvalidShape(format!(
            "F({m},{r}) needs {n} points, got {}",
            points.len()
        )));
    }
    if scales.len() != n {
        return Err(WinoError::InvalidScale(format!("need {n} scales, got {}", scales.len())));
    }
    let pts = points.as_slice();
    let v_nn = vandermonde(pts, n);
    let inv = v_nn
        .inverse(SINGULAR_TOL)
        .ok_or_else(|| WinoError::SingularTransform(format!("V({n},{n}) is singular for {pts:?}")))?;
    let v_a = vandermonde(pts, m).transpose();
    let v_b = inv.transpose();
    let v_g = vandermonde(pts, r);
    let mut t = WinogradTransform {
        m,
        r,
        n,
        points,
        scales,
        a_t: v_a.clone(),
        b_t: v_b.clone(),
        g: v_g.clone(),
        v_a,
        v_b,
        v_g,
    };
    t.apply_scales();
    Ok(t)
}

pub fn standard_transform(tile: Tile) -> WinogradTransform {
    build_transform(tile.m(), tile.r(), tile.points(), tile.standard_scales())
        .expect("standard transforms are nonsingular")
}

/// Same polynomial points, new `(s_b, s_g)`; `s_a` is recomputed.
pub fn rescale_transform(t: &WinogradTransform, new_sb: &[f64], new_sg: &[f64]) -> Result<WinogradTransform> {
    if new_sb.len() != t.n || new_sg.len() != t.n {
        return Err(WinoError::InvalidScale(format!(
            "need {} scales, got s_b={} s_g={}",
            t.n,
            new_sb.len(),
            new_sg.len()
        )));
    }
    let scales = ScaleSet::new(new_sb.to_vec(), new_sg.to_vec())?;
    let mut out = t.clone();
    out.scales = scales;
    out.apply_scales();
    Ok(out)
}

impl WinogradTransform {
    fn apply_scales(&mut self) {
        self.a_t = self.v_a.scale_cols(&self.scales.s_a);
        self.b_t = self.v_b.scale_rows(&self.scales.s_b);
        self.g = self.v_g.scale_rows(&self.scales.s_g);
    }

    /// Transform whose matrices are arbitrary (no longer tied to the
    /// Vandermonde factors). Used by the learned-matrices baseline.
    pub fn with_free_matrices(&self, a_t: Mat, b_t: Mat, g: Mat) -> Result<WinogradTransform> {
        let (m, n, r) = (self.m, self.n, self.r);
        if (a_t.rows(), a_t.cols()) != (m, n) || (b_t.rows(), b_t.cols()) != (n, n) || (g.rows(), g.cols()) != (n, r) {
            return Err(WinoError::InvalidShape("free matrices have wrong shapes".into()));
        }
        if [&a_t, &b_t, &g].iter().any(|mat| mat.as_slice().iter().any(|v| !v.is_finite())) {
            return Err(WinoError::Compute("non-finite transform entry".into()));
        }
        let mut out = self.clone();
        out.a_t = a_t;
        out.b_t = b_t;
        out.g = g;
        Ok(out)
    }

    pub fn for_tile_with_scales(tile: Tile, scales: ScaleSet) -> Result<WinogradTransform> {
        build_transform(tile.m(), tile.r(), tile.points(), scales)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn a_t(&self) -> &Mat {
        &self.a_t
    }

    pub fn b_t(&self) -> &Mat {
        &self.b_t
    }

    pub fn g(&self) -> &Mat {
        &self.g
    }

    pub fn points(&self) -> &PolyPoints {
        &self.points
    }

    pub fn scales(&self) -> &ScaleSet {
        &self.scales
    }

    /// Unscaled factors `(V(n,m)^T, V(n,n)^-T, V(n,r))`.
    pub fn factors(&self) -> (&Mat, &Mat, &Mat) {
        (&self.v_a, &self.v_b, &self.v_g)
    }

    pub fn tile(&self) -> Option<Tile> {
        Tile::ALL
            .into_iter()
            .find(|t| t.m() == self.m && t.r() == self.r && *t.points().as_slice() == *self.points.as_slice())
    }

    /// One output tile `A^T [(G w G^T) . (B^T x B)] A` in f64.
    /// `w` is `r x r`, `x` is `n x n`, both row-major.
    pub fn apply_tile(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let (n, r) = (self.n, self.r);
        assert_eq!(w.len(), r * r);
        assert_eq!(x.len(), n * n);
        let wm = Mat::from_vec(r, r, w.to_vec());
        let xm = Mat::from_vec(n, n, x.to_vec());
        let ww = self.g.matmul(&wm).matmul(&self.g.transpose());
        let xx = self.b_t.matmul(&xm).matmul(&self.b_t.transpose());
        let mut y = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                y[(i, j)] = ww[(i, j)] * xx[(i, j)];
            }
        }
        self.a_t.matmul(&y).matmul(&self.a_t.transpose()).as_slice().to_vec()
    }
}
