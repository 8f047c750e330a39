//! Probabilistic and deterministic scoring: quantile loss, the discretized
//! continuous ranked probability score and its normalized aggregates,
//! absolute/squared errors, and an exact empirical CRPS used as a test
//! oracle for the discretized version.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregate scores over a set of imputed target positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub crps: f64,
    /// CRPS of the across-feature sum distribution; present only when the
    /// targets cover every feature at each scored time point.
    pub crps_sum: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub n_targets: usize,
    pub n_samples: usize,
}

/// Quantile (pinball) loss at level `alpha`: `(alpha - 1[z < q]) (z - q)`.
pub fn quantile_loss(alpha: f64, q: f64, z: f64) -> f64 {
    debug_assert!(alpha > 0.0 && alpha < 1.0);
    let indicator = if z < q { 1.0 } else { 0.0 };
    (alpha - indicator) * (z - q)
}

/// Empirical quantile of `sorted` at level `p`: the ceil(p*n)-th order
/// statistic (the step-function inverse of the empirical CDF).
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = (p * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// CRPS approximated at the 19 interior quantile levels 0.05, 0.10, ...,
/// 0.95: `sum_i 2 L_{0.05i}(F^{-1}(0.05i), z) / 19`.
pub fn crps_discretized(draws: &[f64], z: f64) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Argument("CRPS needs at least one draw".into()));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut acc = 0.0;
    for i in 1..=19 {
        let alpha = 0.05 * i as f64;
        let q = empirical_quantile(&sorted, alpha);
        acc += 2.0 * quantile_loss(alpha, q, z);
    }
    Ok(acc / 19.0)
}

/// Exact CRPS of the empirical distribution of `draws`:
/// `mean |X_i - z| - 1/2 mean_{i,j} |X_i - X_j|`. Quadratic in the number
/// of draws; used as an independent oracle for [`crps_discretized`].
pub fn crps_exact_empirical(draws: &[f64], z: f64) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Argument("CRPS needs at least one draw".into()));
    }
    let n = draws.len() as f64;
    let first: f64 = draws.iter().map(|x| (x - z).abs()).sum::<f64>() / n;
    let mut pair_sum = 0.0;
    for a in draws {
        for b in draws {
            pair_sum += (a - b).abs();
        }
    }
    Ok(first - 0.5 * pair_sum / (n * n))
}

/// One scored position: the predictive draws and the true value.
pub type ScoredCase = (Vec<f64>, f64);

/// Normalized average CRPS over target positions:
/// `sum_i CRPS(F_i, z_i) / sum_i |z_i|`.
pub fn crps_normalized_average(cases: &[ScoredCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Argument("no scored positions".into()));
    }
    let denom: f64 = cases.iter().map(|(_, z)| z.abs()).sum();
    if denom == 0.0 {
        return Err(Error::Numeric(
            "normalized CRPS denominator is zero".into(),
        ));
    }
    let mut total = 0.0;
    for (draws, z) in cases {
        total += crps_discretized(draws, *z)?;
    }
    Ok(total / denom)
}

/// CRPS of the across-feature sum distribution, normalized by the total
/// absolute truth mass.
///
/// For each scored time point, every feature must be covered by the mask
/// (the sum over features is otherwise undefined); each draw is reduced to
/// its feature sum per column and scored against the summed truth.
pub fn crps_sum(
    draws: &[Array2<f64>],
    truth: &Array2<f64>,
    mask: &Array2<u8>,
) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Argument("no draws".into()));
    }
    let (k, l) = truth.dim();
    if mask.dim() != (k, l) || draws.iter().any(|d| d.dim() != (k, l)) {
        return Err(Error::Argument("crps_sum shape mismatch".into()));
    }
    let mut total = 0.0;
    let mut denom = 0.0;
    let mut scored_any = false;
    for j in 0..l {
        let covered = (0..k).filter(|&i| mask[[i, j]] == 1).count();
        if covered == 0 {
            continue;
        }
        if covered < k {
            return Err(Error::Argument(format!(
                "time point {j} is only partially covered; the feature sum is undefined"
            )));
        }
        scored_any = true;
        let truth_sum: f64 = (0..k).map(|i| truth[[i, j]]).sum();
        let draw_sums: Vec<f64> = draws
            .iter()
            .map(|d| (0..k).map(|i| d[[i, j]]).sum())
            .collect();
        total += crps_discretized(&draw_sums, truth_sum)?;
        for i in 0..k {
            denom += truth[[i, j]].abs();
        }
    }
    if !scored_any {
        return Err(Error::Argument("no fully covered time points".into()));
    }
    if denom == 0.0 {
        return Err(Error::Numeric("crps_sum denominator is zero".into()));
    }
    Ok(total / denom)
}

/// Mean absolute error over aligned point estimates and truths.
pub fn mae(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    check_aligned(estimates, truths)?;
    let n = estimates.len() as f64;
    Ok(estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e - t).abs())
        .sum::<f64>()
        / n)
}

/// Root mean squared error over aligned point estimates and truths.
pub fn rmse(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    check_aligned(estimates, truths)?;
    let n = estimates.len() as f64;
    Ok((estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        / n)
        .sqrt())
}

fn check_aligned(estimates: &[f64], truths: &[f64]) -> Result<()> {
    if estimates.is_empty() {
        return Err(Error::Argument("empty target set".into()));
    }
    if estimates.len() != truths.len() {
        return Err(Error::Argument(format!(
            "{} estimates vs {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    Ok(())
}
