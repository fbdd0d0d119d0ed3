//! Published F(4,3) / F(6,3) tables used as golden checks for the
//! Vandermonde construction.
//!
//! The published tables contain a few misprints. Each is listed in
//! [`GoldenTables::misprints`] with the printed value; the check requires
//! that the constructed entry really differs there and matches everywhere
//! else. The F(6,3) `G` table is printed twice with different signs in the
//! last column of rows 1-3; the copy stored here is the one that agrees with
//! the construction, and [`ALT_G_F63`] keeps the other one.

use serde::{Deserialize, Serialize};

use crate::matrix::Mat;
use crate::transforms::{standard_transform, vandermonde, Tile};

pub const GOLDEN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    /// `V(n, m)`
    VOut,
    /// `V(n, n)^-T`
    VInvT,
    /// `V(n, r)`
    VFilter,
    AT,
    BT,
    G,
}

impl Which {
    pub const ALL: [Which; 6] = [Which::VOut, Which::VInvT, Which::VFilter, Which::AT, Which::BT, Which::G];

    pub fn label(self) -> &'static str {
        match self {
            Which::VOut => "V(n,m)",
            Which::VInvT => "V(n,n)^-T",
            Which::VFilter => "V(n,r)",
            Which::AT => "A^T",
            Which::BT => "B^T",
            Which::G => "G",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenMatrix {
    pub tile: Tile,
    pub which: Which,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Misprint {
    pub tile: Tile,
    pub which: Which,
    pub row: usize,
    pub col: usize,
    pub printed: f64,
    pub constructed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenTables {
    pub matrices: Vec<GoldenMatrix>,
    pub misprints: Vec<Misprint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoldenCheck {
    pub name: String,
    pub max_abs_err: f64,
    pub misprints_confirmed: usize,
    pub misprints_expected: usize,
    pub pass: bool,
}

fn rows(v: &[&[f64]]) -> Vec<Vec<f64>> {
    v.iter().map(|r| r.to_vec()).collect()
}

/// The other printing of `G` for F(6,3).
pub const ALT_G_F63: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [-2.0 / 9.0, -2.0 / 9.0, 2.0 / 9.0],
    [-2.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0],
    [1.0 / 90.0, 1.0 / 45.0, -2.0 / 45.0],
    [1.0 / 90.0, -1.0 / 45.0, 2.0 / 45.0],
    [32.0 / 45.0, 16.0 / 45.0, 8.0 / 45.0],
    [32.0 / 45.0, -16.0 / 45.0, 8.0 / 45.0],
    [0.0, 0.0, 1.0],
];

pub fn published() -> GoldenTables {
    use Tile::*;
    use Which::*;
    let mut m = Vec::new();

    m.push(GoldenMatrix {
        tile: F43,
        which: VOut,
        rows: rows(&[
            &[1.0, 0.0, 0.0, 0.0],
            &[1.0, 1.0, 1.0, 1.0],
            &[1.0, -1.0, 1.0, -1.0],
            &[1.0, 2.0, 4.0, 8.0],
            &[1.0, -2.0, 4.0, -8.0],
            &[0.0, 0.0, 0.0, 1.0],
        ]),
    });
    m.push(GoldenMatrix {
        tile: F43,
        which: VInvT,
        rows: rows(&[
            &[1.0, 0.0, -5.0 / 4.0, 0.0, 1.0 / 4.0, 0.0],
            &[0.0, 2.0 / 3.0, 2.0 / 3.0, -1.0 / 6.0, -1.0 / 6.0, 0.0],
            &[0.0, -2.0 / 3.0, 2.0 / 3.0, 1.0 / 6.0, -1.0 / 6.0, 0.0],
            &[0.0, -1.0 / 12.0, -1.0 / 24.0, 1.0 / 12.0, 1.0 / 24.0, 0.0],
            &[0.0, 1.0 / 12.0, -1.0 / 24.0, -1.0 / 12.0, 1.0 / 24.0, 0.0],
            &[0.0, 4.0, 0.0, -5.0, 0.0, 1.0],
        ]),
    });
    m.push(GoldenMatrix {
        tile: F43,
        which: VFilter,
        rows: rows(&[
            &[1.0, 0.0, 0.0],
            &[1.0, 1.0, 1.0],
            &[1.0, -1.0, 1.0],
            &[1.0, 2.0, 4.0],
            &[1.0, -2.0, 4.0],
            &[0.0, 0.0, 1.0],
        ]),
    });
    m.push(GoldenMatrix {
        tile: F43,
        which: AT,
        rows: rows(&[
            &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0],
            &[0.0, 1.0, -1.0, 2.0, -2.0, 0.0],
            &[0.0, 1.0, 1.0, 4.0, 4.0, 0.0],
            &[0.0, 1.0, -1.0, 8.0, -8.0, 1.0],
        ]),
    });
    m.push(GoldenMatrix {
        tile: F43,
        which: BT,
        rows: rows(&[
            &[4.0, 0.0, -5.0, 0.0, 1.0, 0.0],
            &[0.0, -4.0, -4.0, 1.0, 1.0, 0.0],
            &[0.0, 4.0, -4.0, -1.0, 1.0, 0.0],
            &[0.0, -2.0, -1.0, 2.0, 1.0, 0.0],
            &[0.0, 2.0, -1.0, -2.0, 1.0, 0.0],
            &[0.0, 4.0, 0.0, -5.0, 0.0, 1.0],
        ]),
    });
    m.push(GoldenMatrix {
        tile: F43,
        which: G,
        rows: rows(&[
            &[1.0 / 4.0, 0.0, 0.0],
            &[-1.0 / 6.0, -1.0 / 6.0, -1.0 / 6.0],
            &[-1.0 / 6.0, 1.0 / 6.0, -1.0 / 6.0],
            &[1.0 / 24.0, 1.0 / 12.0, 1.0 / 6.0],
            &[1.0 / 24.0, -1.0 / 12.0, 1.0 / 6.0],
            &[0.0, 0.0, 1.0],
        ]),
    });

    m.push(GoldenMatrix {
        tile: F63,
        which: VOut,
        rows: rows(&[
            &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0],
            &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0],
            &[1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            &[1.0, -2.0, 4.0, -8.0, 16.0, -32.0],
            &[1.0, 1.0 / 2.0, 1.0 / 4.0, 1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0],
            &[1.0, -1.0 / 2.0, 1.0 / 4.0, -1.0 / 8.0, 1.0 / 16.0, -1.0 / 32.0],
            &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        ]),
    });
    m.push(GoldenMatrix {
        tile: F63,
        which: VInvT,
        rows: rows(&[
            &[1.0, 0.0, -21.0 / 4.0, 0.0, 21.0 / 4.0, 0.0, -1.0, 0.0],
            &[0.0, -2.0 / 9.0, -2.0 / 9.0, 17.0 / 18.0, 17.0 / 18.0, -2.0 / 9.0, -2.0 / 9.0, 0.0],
            &[0.0, 2.0 / 9.0, -2.0 / 9.0, -17.0 / 18.0, -17.0 / 18.0, 2.0 / 9.0, -2.0 / 9.0, 0.0],
            &[0.0, 1.0 / 180.0, 1.0 / 360.0, -1.0 / 36.0, -1.0 / 72.0, 1.0 / 45.0, 1.0 / 90.0, 0.0],
            &[0.0, -1.0 / 180.0, 1.0 / 360.0, 1.0 / 36.0, -1.0 / 72.0, -1.0 / 45.0, 1.0 / 90.0, 0.0],
            &[0.0, 64.0 / 45.0, 128.0 / 45.0, -16.0 / 9.0, -32.0 / 9.0, 16.0 / 45.0, 32.0 / 45.0, 0.0],
            &[0.0, -64.0 / 45.0, 128.0 / 45.0, 16.0 / 9.0, -32.0 / 9.0, -16.0 / 45.0, 32.0 / 45.0, 0.0],
            &[0.0, -1.0 / 4.0, 0.0, 21.0 / 4.0, 0.0, -21.0 / 4.0, 0.0, 1.0],
        ]),
    });
    m.push(GoldenMatrix {
        tile: F63,
        which: VFilter,
        rows: rows(&[
            &[1.0, 0.0, 0.0],
            &[1.0, 1.0, 1.0],
            &[1.0, -1.0, 1.0],
            &[1.0, 2.0, 4.0],
            &[1.0, -2.0, 4.0],
            &[1.0, 1.0 / 2.0, 1.0 / 4.0],
            &[1.0, -1.0 / 2.0, 1.0 / 4.0],
            &[0.0, 0.0, 1.0],
        ]),
    });
    m.push(GoldenMatrix {
        tile: F63,
        which: AT,
        rows: rows(&[
            &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0],
            &[0.0, 1.0, -1.0, 2.0, -2.0, 1.0 / 2.0, -1.0 / 2.0, 0.0],
            &[0.0, 1.0, 1.0, 4.0, 4.0, 1.0 / 4.0, 1.0 / 4.0, 0.0],
            &[0.0, 1.0, -1.0, 8.0, -8.0, 1.0 / 8.0, -1.0 / 8.0, 0.0],
            &[0.0, 1.0, 1.0, 16.0, 16.0, 1.0 / 16.0, 1.0 / 16.0, 0.0],
            &[0.0, 1.0, -1.0, 32.0, -32.0, 1.0 / 32.0, -1.0 / 32.0, 0.0],
        ]),
    });
    let b63: [[f64; 8]; 8] = [
        [4.0, 0.0, -21.0, 0.0, 21.0, 0.0, -4.0, 0.0],
        [0.0, 4.0, 4.0, -17.0, -17.0, 4.0, 4.0, 0.0],
        [0.0, -4.0, 4.0, 17.0, -17.0, -4.0, 4.0, 0.0],
        [0.0, 2.0, 1.0, -10.0, -5.0, 8.0, 4.0, 0.0],
        [0.0, -2.0, 1.0, 10.0, -5.0, -8.0, 4.0, 0.0],
        [0.0, 8.0, 16.0, -10.0, -20.0, 2.0, 4.0, 0.0],
        [0.0, -8.0, 16.0, 10.0, -20.0, -2.0, 4.0, 0.0],
        [0.0, -4.0, 0.0, 21.0, 0.0, -21.0, 0.0, 4.0],
    ];
    m.push(GoldenMatrix {
        tile: F63,
        which: BT,
        rows: b63.iter().map(|r| r.iter().map(|v| v / 4.0).collect()).collect(),
    });
    m.push(GoldenMatrix {
        tile: F63,
        which: G,
        rows: rows(&[
            &[1.0, 0.0, 0.0],
            &[-2.0 / 9.0, -2.0 / 9.0, -2.0 / 9.0],
            &[-2.0 / 9.0, 2.0 / 9.0, -2.0 / 9.0],
            &[1.0 / 90.0, 1.0 / 45.0, 2.0 / 45.0],
            &[1.0 / 90.0, -1.0 / 45.0, 2.0 / 45.0],
            &[32.0 / 45.0, 16.0 / 45.0, 8.0 / 45.0],
            &[32.0 / 45.0, -16.0 / 45.0, 8.0 / 45.0],
            &[0.0, 0.0, 1.0],
        ]),
    });

    let misprints = vec![
        // Sign slip; the printed B^T row 2 implies +17/18.
        Misprint {
            tile: F63,
            which: VInvT,
            row: 2,
            col: 4,
            printed: -17.0 / 18.0,
            constructed: 17.0 / 18.0,
        },
        // The printed B^T last row, [0, -4, 0, 21, 0, -21, 0, 4] / 4, implies -1.
        Misprint {
            tile: F63,
            which: VInvT,
            row: 7,
            col: 1,
            printed: -1.0 / 4.0,
            constructed: -1.0,
        },
        // (1, 0) is the point at infinity: only the last column is nonzero.
        Misprint {
            tile: F63,
            which: VOut,
            row: 1,
            col: 5,
            printed: 0.0,
            constructed: 1.0,
        },
        Misprint {
            tile: F63,
            which: AT,
            row: 5,
            col: 7,
            printed: 0.0,
            constructed: 1.0,
        },
    ];

    GoldenTables { matrices: m, misprints }
}

pub fn constructed(tile: Tile, which: Which) -> Mat {
    let t = standard_transform(tile);
    let pts = tile.points();
    match which {
        Which::VOut => vandermonde(pts.as_slice(), tile.m()),
        Which::VInvT => t.factors().1.clone(),
        Which::VFilter => vandermonde(pts.as_slice(), tile.r()),
        Which::AT => t.a_t().clone(),
        Which::BT => t.b_t().clone(),
        Which::G => t.g().clone(),
    }
}

pub fn check(tables: &GoldenTables) -> Vec<GoldenCheck> {
    tables
        .matrices
        .iter()
        .map(|gm| {
            let name = format!("golden {} {}", gm.tile, gm.which.label());
            let built = constructed(gm.tile, gm.which);
            let shape_ok =
                gm.rows.len() == built.rows() && gm.rows.iter().all(|r| r.len() == built.cols());
            if !shape_ok {
                return GoldenCheck {
                    name,
                    max_abs_err: f64::INFINITY,
                    misprints_confirmed: 0,
                    misprints_expected: 0,
                    pass: false,
                };
            }
            let listed: Vec<&Misprint> = tables
                .misprints
                .iter()
                .filter(|mp| mp.tile == gm.tile && mp.which == gm.which)
                .collect();
            let mut max_abs_err = 0.0f64;
            let mut confirmed = 0;
            for (i, row) in gm.rows.iter().enumerate() {
                for (j, &printed) in row.iter().enumerate() {
                    let got = built[(i, j)];
                    match listed.iter().find(|mp| mp.row == i && mp.col == j) {
                        Some(mp) => {
                            if (printed - got).abs() > GOLDEN_TOL && (mp.constructed - got).abs() <= GOLDEN_TOL {
                                confirmed += 1;
                            }
                        }
                        None => max_abs_err = max_abs_err.max((printed - got).abs()),
                    }
                }
            }
            GoldenCheck {
                name,
                max_abs_err,
                misprints_confirmed: confirmed,
                misprints_expected: listed.len(),
                pass: max_abs_err <= GOLDEN_TOL && confirmed == listed.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_matches_published_tables() {
        for c in check(&published()) {
            assert!(c.pass, "{c:?}");
        }
    }

    #[test]
    fn corrupted_table_fails() {
        let mut t = published();
        t.matrices[4].rows[0][0] = 5.0;
        let res = check(&t);
        assert!(!res[4].pass);
        assert_eq!(res.iter().filter(|c| !c.pass).count(), 1);
    }

    #[test]
    fn other_g_printing_differs_in_three_signs() {
        let g = constructed(Tile::F63, Which::G);
        let mut diffs = Vec::new();
        for (i, row) in ALT_G_F63.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if (g[(i, j)] - v).abs() > GOLDEN_TOL {
                    assert!((g[(i, j)] + v).abs() < GOLDEN_TOL, "only signs differ");
                    diffs.push((i, j));
                }
            }
        }
        assert_eq!(diffs, vec![(1, 2), (2, 2), (3, 2)]);
    }
}
