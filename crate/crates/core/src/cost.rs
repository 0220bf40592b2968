//! Linear latency model over primitive counts, its calibration from
//! measured layer timings, and bottleneck ranking.
//!
//! Predicted seconds for a layer are
//! `alpha * mul + beta * rot + gamma * boot + delta * mem_cost`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulator::{LayerProfile, PrimitiveCounts};

#[derive(Debug, Error)]
pub enum CostError {
    #[error("cost model degenerate: every term is zero")]
    ZeroCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    /// Seconds per ciphertext-ciphertext or ciphertext-plaintext multiply.
    pub alpha: f64,
    /// Seconds per rotation (key switch).
    pub beta: f64,
    /// Seconds per bootstrap.
    pub gamma: f64,
    /// Seconds per block-level of live memory traffic.
    pub delta: f64,
}

/// Microbenchmark seeds used until calibration, and as the fallback when
/// calibration is rank-deficient. Bootstraps dominate rotations dominate
/// multiplies.
pub const SEED_COEFFICIENTS: CostCoefficients = CostCoefficients {
    alpha: 1e-3,
    beta: 3e-3,
    gamma: 0.5,
    delta: 1e-4,
};

impl CostCoefficients {
    pub fn layer_seconds(&self, c: &PrimitiveCounts) -> f64 {
        self.alpha * c.mul as f64
            + self.beta * c.rot as f64
            + self.gamma * c.boot as f64
            + self.delta * c.mem_cost
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.delta]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        CostCoefficients {
            alpha: v[0],
            beta: v[1],
            gamma: v[2],
            delta: v[3],
        }
    }
}

/// Total predicted seconds plus per-layer shares (summing to 1).
pub fn predict_counts(
    counts: &[PrimitiveCounts],
    coeffs: &CostCoefficients,
) -> Result<(f64, Vec<f64>), CostError> {
    let terms: Vec<f64> = counts.iter().map(|c| coeffs.layer_seconds(c)).collect();
    let total: f64 = terms.iter().sum();
    if total <= 0.0 {
        return Err(CostError::ZeroCost);
    }
    Ok((total, terms.iter().map(|t| t / total).collect()))
}

pub fn predict(
    profiles: &[LayerProfile],
    coeffs: &CostCoefficients,
) -> Result<(f64, Vec<f64>), CostError> {
    let counts: Vec<PrimitiveCounts> = profiles.iter().map(|p| p.perf.counts.clone()).collect();
    predict_counts(&counts, coeffs)
}

/// One measured layer from an encrypted run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    pub layer_id: String,
    pub counts: PrimitiveCounts,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub coefficients: CostCoefficients,
    /// True when the fit fell back to [`SEED_COEFFICIENTS`].
    pub fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub residual_rms: f64,
    pub observations: usize,
}

/// Nonnegative least squares over the four count columns: ordinary least
/// squares, clip negatives to zero, then one refit restricted to the
/// surviving coefficients. Fewer than four observations, or a rank-deficient
/// design, falls back to the seeds with a warning instead of failing.
pub fn calibrate(observations: &[Observation]) -> CalibrationOutcome {
    let fallback = |warning: String| CalibrationOutcome {
        coefficients: SEED_COEFFICIENTS,
        fallback: true,
        warning: Some(warning),
        residual_rms: rms_residual(observations, &SEED_COEFFICIENTS),
        observations: observations.len(),
    };

    if observations.len() < 4 {
        return fallback(format!(
            "{} observation(s) cannot identify 4 coefficients",
            observations.len()
        ));
    }

    let rows: Vec<[f64; 4]> = observations
        .iter()
        .map(|o| {
            [
                o.counts.mul as f64,
                o.counts.rot as f64,
                o.counts.boot as f64,
                o.counts.mem_cost,
            ]
        })
        .collect();
    let y: Vec<f64> = observations.iter().map(|o| o.seconds).collect();

    let Some(ols) = solve_least_squares(&rows, &y, &[true; 4]) else {
        return fallback("rank-deficient design matrix; keeping seed coefficients".into());
    };

    // Clip and refit once on the active set.
    let active: [bool; 4] = std::array::from_fn(|i| ols[i] > 0.0);
    let refit = if active.iter().all(|&a| a) {
        ols
    } else if active.iter().any(|&a| a) {
        match solve_least_squares(&rows, &y, &active) {
            Some(v) => v,
            None => {
                return fallback(
                    "rank-deficient design after clipping; keeping seed coefficients".into(),
                )
            }
        }
    } else {
        return fallback("all fitted coefficients non-positive; keeping seed coefficients".into());
    };

    let cleaned: [f64; 4] = std::array::from_fn(|i| refit[i].max(0.0));
    let coefficients = CostCoefficients::from_array(cleaned);
    CalibrationOutcome {
        residual_rms: rms_residual(observations, &coefficients),
        coefficients,
        fallback: false,
        warning: None,
        observations: observations.len(),
    }
}

fn rms_residual(observations: &[Observation], coeffs: &CostCoefficients) -> f64 {
    if observations.is_empty() {
        return 0.0;
    }
    let ss: f64 = observations
        .iter()
        .map(|o| {
            let r = o.seconds - coeffs.layer_seconds(&o.counts);
            r * r
        })
        .sum();
    (ss / observations.len() as f64).sqrt()
}

/// Least squares via the normal equations on the active columns; inactive
/// coefficients come back as zero. Returns `None` when the reduced system
/// is singular.
fn solve_least_squares(rows: &[[f64; 4]], y: &[f64], active: &[bool; 4]) -> Option<[f64; 4]> {
    let cols: Vec<usize> = (0..4).filter(|&i| active[i]).collect();
    let k = cols.len();
    let mut ata = vec![vec![0.0f64; k]; k];
    let mut aty = vec![0.0f64; k];
    for (row, &yi) in rows.iter().zip(y) {
        for (a, &ca) in cols.iter().enumerate() {
            aty[a] += row[ca] * yi;
            for (b, &cb) in cols.iter().enumerate() {
                ata[a][b] += row[ca] * row[cb];
            }
        }
    }
    let solution = solve_linear(&mut ata, &mut aty)?;
    let mut out = [0.0f64; 4];
    for (a, &c) in cols.iter().enumerate() {
        out[c] = solution[a];
    }
    Some(out)
}

/// Gaussian elimination with partial pivoting. `None` on a singular system.
fn solve_linear(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let scale: f64 = a
        .iter()
        .flat_map(|r| r.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    let eps = 1e-12 * scale;
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < eps {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let (upper, lower) = a.split_at_mut(row);
            for (dst, src) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                *dst -= f * src;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col][c] * x[c];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BottleneckWeights {
    pub w_runtime: f64,
    pub w_under_utilization: f64,
    pub w_rotation: f64,
    pub w_low_margin: f64,
}

impl Default for BottleneckWeights {
    fn default() -> Self {
        BottleneckWeights {
            w_runtime: 0.4,
            w_under_utilization: 0.2,
            w_rotation: 0.2,
            w_low_margin: 0.2,
        }
    }
}

/// Number of layers handed to the layer-level search each iteration.
pub const BOTTLENECK_TOP_K: usize = 2;

/// Ranks layers by
/// `w1 * runtime_share + w2 * (1 - utilization) + w3 * rot_norm + w4 * low_margin`,
/// descending, ties broken by earlier graph position. Returns at most
/// `top_k` entries.
pub fn bottleneck_scores(
    profiles: &[LayerProfile],
    weights: &BottleneckWeights,
    top_k: usize,
) -> Vec<(String, f64)> {
    let mut scored: Vec<(usize, String, f64)> = profiles
        .iter()
        .enumerate()
        .map(|(pos, p)| {
            let z = if p.numeric.low_margin { 1.0 } else { 0.0 };
            let score = weights.w_runtime * p.perf.runtime_fraction
                + weights.w_under_utilization * (1.0 - p.perf.slot_utilization)
                + weights.w_rotation * p.perf.rot_norm
                + weights.w_low_margin * z;
            (pos, p.layer_id.clone(), score)
        })
        .collect();
    scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(top_k)
        .map(|(_, id, s)| (id, s))
        .collect()
}
