//! Imputation samplers: the conditional reverse chain, the
//! replacement-sampling baseline built on an unconditionally trained model,
//! ensemble generation, and median-based deterministic imputation.
//!
//! Both samplers carry chain state only on the target support; every other
//! grid position stays at zero inside the denoiser input. The conditional
//! sampler feeds clean observations through the conditional channel at
//! every step. The baseline instead injects freshly corrupted observations
//! into the noisy grid itself at each step, which is exactly what costs it
//! accuracy relative to the conditional model.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::denoiser::{DenoiserInput, NoisePredictor};
use crate::error::{Error, Result};
use crate::masking::{count_ones, TimeSeriesSample};
use crate::rng::{derive_rng, tag};
use crate::schedule::{reverse_step, NoiseSchedule};

/// A set of stochastic imputations over the same target support.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationEnsemble {
    /// Draws as full `K x L` grids; values are meaningful only where
    /// `target_mask` is 1 and are zero elsewhere.
    pub draws: Vec<Array2<f64>>,
    pub target_mask: Array2<u8>,
    /// The conditioning sample the draws were generated against.
    pub observed: TimeSeriesSample,
}

impl ImputationEnsemble {
    pub fn new(
        draws: Vec<Array2<f64>>,
        target_mask: Array2<u8>,
        observed: TimeSeriesSample,
    ) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Argument("ensemble needs at least one draw".into()));
        }
        for (n, d) in draws.iter().enumerate() {
            if d.dim() != target_mask.dim() {
                return Err(Error::Argument(format!(
                    "draw {n} shape {:?} does not match target mask {:?}",
                    d.dim(),
                    target_mask.dim()
                )));
            }
            for ((i, j), &m) in target_mask.indexed_iter() {
                if m == 1 && !d[[i, j]].is_finite() {
                    return Err(Error::Numeric(format!(
                        "draw {n} has a non-finite value at target ({i},{j})"
                    )));
                }
            }
        }
        Ok(ImputationEnsemble {
            draws,
            target_mask,
            observed,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.draws.len()
    }

    /// Per-position empirical median across draws; for even counts, the
    /// mean of the two central order statistics. Zero off the target
    /// support.
    pub fn median(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.target_mask.dim());
        for ((i, j), &m) in self.target_mask.indexed_iter() {
            if m == 1 {
                let mut vals: Vec<f64> = self.draws.iter().map(|d| d[[i, j]]).collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = vals.len();
                out[[i, j]] = if n % 2 == 1 {
                    vals[n / 2]
                } else {
                    0.5 * (vals[n / 2 - 1] + vals[n / 2])
                };
            }
        }
        out
    }

    /// Merge one draw with the conditioning sample: observed values where
    /// observed, the draw at target positions, NaN elsewhere.
    pub fn materialize(&self, draw_idx: usize) -> Array2<f64> {
        let draw = &self.draws[draw_idx];
        let mut out = Array2::from_elem(self.target_mask.dim(), f64::NAN);
        for ((i, j), &m) in self.observed.mask().indexed_iter() {
            if m == 1 {
                out[[i, j]] = self.observed.values()[[i, j]];
            }
        }
        for ((i, j), &m) in self.target_mask.indexed_iter() {
            if m == 1 {
                out[[i, j]] = draw[[i, j]];
            }
        }
        out
    }

    /// Values of every draw at one target position.
    pub fn values_at(&self, i: usize, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[[i, j]]).collect()
    }
}

fn draw_noise(k: usize, l: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut eps = Array2::zeros((k, l));
    for i in 0..k {
        for j in 0..l {
            eps[[i, j]] = rng.sample(StandardNormal);
        }
    }
    eps
}

fn check_target(sample: &TimeSeriesSample, target_mask: &Array2<u8>) -> Result<()> {
    if target_mask.dim() != sample.mask().dim() {
        return Err(Error::Argument(format!(
            "target mask shape {:?} does not match sample {:?}",
            target_mask.dim(),
            sample.mask().dim()
        )));
    }
    for ((i, j), &t) in target_mask.indexed_iter() {
        if t > 1 {
            return Err(Error::Argument(format!(
                "target mask at ({i},{j}) is not binary"
            )));
        }
        if t == 1 && sample.mask()[[i, j]] == 1 {
            return Err(Error::Argument(format!(
                "target ({i},{j}) is observed in the conditioning sample"
            )));
        }
    }
    Ok(())
}

fn mask_to_f64(mask: &Array2<u8>) -> Array2<f64> {
    mask.mapv(f64::from)
}

/// One conditional imputation draw: ancestral sampling over the target
/// support, conditioning on the sample's observed values at every step.
///
/// `target_mask` must be disjoint from the observation mask; at deployment
/// it covers all missing entries. An empty target returns a zero grid
/// without running the chain.
pub fn conditional_impute(
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    sample: &TimeSeriesSample,
    target_mask: &Array2<u8>,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    check_target(sample, target_mask)?;
    let (k, l) = sample.mask().dim();
    if count_ones(target_mask) == 0 {
        return Ok(Array2::zeros((k, l)));
    }
    let target_f = mask_to_f64(target_mask);
    let cond_mask = sample.mask().clone();
    let cond_obs = sample.gated_values(&cond_mask);

    let mut x = &draw_noise(k, l, rng) * &target_f;
    for t in (1..=sched.steps()).rev() {
        let input = DenoiserInput::unpadded(
            x.clone(),
            cond_obs.clone(),
            cond_mask.clone(),
            sample.timestamps().clone(),
            t,
        )?;
        let eps_hat = predictor.predict(&input)?;
        let z = draw_noise(k, l, rng);
        let next = reverse_step(&x, t, &eps_hat, &z, sched)?;
        x = &next * &target_f;
    }
    Ok(x)
}

/// One draw from the replacement-sampling baseline: at every reverse step
/// the observed entries are re-corrupted to the current noise level and
/// spliced into the grid, and an unconditionally trained model denoises
/// the whole grid.
pub fn unconditional_impute(
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    sample: &TimeSeriesSample,
    target_mask: &Array2<u8>,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    check_target(sample, target_mask)?;
    let (k, l) = sample.mask().dim();
    if count_ones(target_mask) == 0 {
        return Ok(Array2::zeros((k, l)));
    }
    let target_f = mask_to_f64(target_mask);
    let obs_mask = sample.mask();
    let has_observations = count_ones(obs_mask) > 0;
    let x0_obs = sample.gated_values(obs_mask);
    let zero_grid = Array2::zeros((k, l));
    let zero_mask: Array2<u8> = Array2::zeros((k, l));

    let mut x = &draw_noise(k, l, rng) * &target_f;
    for t in (1..=sched.steps()).rev() {
        let a = sched.alpha(t);
        let mut composed = x.clone();
        if has_observations {
            let eps_obs = draw_noise(k, l, rng);
            for ((i, j), &m) in obs_mask.indexed_iter() {
                if m == 1 {
                    composed[[i, j]] =
                        a.sqrt() * x0_obs[[i, j]] + (1.0 - a).sqrt() * eps_obs[[i, j]];
                }
            }
        }
        let input = DenoiserInput::unpadded(
            composed.clone(),
            zero_grid.clone(),
            zero_mask.clone(),
            sample.timestamps().clone(),
            t,
        )?;
        let eps_hat = predictor.predict(&input)?;
        let z = draw_noise(k, l, rng);
        let next = reverse_step(&composed, t, &eps_hat, &z, sched)?;
        x = &next * &target_f;
    }
    Ok(x)
}

/// Which sampler an ensemble is generated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Conditional,
    Unconditional,
}

/// `n` independent draws from `impute`, each on its own random stream
/// derived from `seed`. Draws are generated in parallel and ordered by
/// draw index, so the result is independent of scheduling.
pub fn generate_ensemble<F>(impute: F, n: usize, seed: u64) -> Result<Vec<Array2<f64>>>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Array2<f64>> + Sync,
{
    if n == 0 {
        return Err(Error::Argument("ensemble size must be >= 1".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_rng(seed, tag::DRAW, i as u64);
            impute(&mut rng)
        })
        .collect()
}

/// Ensemble convenience wrapper around the two samplers.
pub fn generate_imputation_ensemble(
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    sample: &TimeSeriesSample,
    target_mask: &Array2<u8>,
    kind: SamplerKind,
    n: usize,
    seed: u64,
) -> Result<ImputationEnsemble> {
    let draws = generate_ensemble(
        |rng| match kind {
            SamplerKind::Conditional => {
                conditional_impute(predictor, sched, sample, target_mask, rng)
            }
            SamplerKind::Unconditional => {
                unconditional_impute(predictor, sched, sample, target_mask, rng)
            }
        },
        n,
        seed,
    )?;
    ImputationEnsemble::new(draws, target_mask.clone(), sample.clone())
}
