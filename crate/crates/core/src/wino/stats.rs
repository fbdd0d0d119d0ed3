use serde::Serialize;

use super::WinoDomainTensor;
use crate::error::{Result, WinoError};

/// Per-tap spread of a Winograd-domain tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TapStats {
    pub n: usize,
    /// Row-major `n x n`: each tap's std over all (row, col) samples divided
    /// by the mean of the `n^2` tap stds. All zeros when every std is zero.
    pub rel_std: Vec<f64>,
    /// `max / min` of `rel_std`; `None` when the smallest std is zero.
    pub max_min_ratio: Option<f64>,
}

pub fn tap_range_stats(y: &WinoDomainTensor) -> Result<TapStats> {
    let samples = y.rows() * y.cols();
    if samples < 2 {
        return Err(WinoError::UndefinedMetric(format!("{samples} sample(s) per tap")));
    }
    let stds: Vec<f64> = (0..y.taps())
        .map(|t| {
            let v = y.tap(t);
            let mean = v.iter().map(|&x| x as f64).sum::<f64>() / samples as f64;
            let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / samples as f64;
            var.sqrt()
        })
        .collect();
    let avg = stds.iter().sum::<f64>() / stds.len() as f64;
    let rel_std: Vec<f64> = if avg > 0.0 {
        stds.iter().map(|s| s / avg).collect()
    } else {
        vec![0.0; stds.len()]
    };
    let (lo, hi) = rel_std
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(TapStats {
        n: y.n(),
        rel_std,
        max_min_ratio: (lo > 0.0).then(|| hi / lo),
    })
}
