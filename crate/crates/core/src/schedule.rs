//! Diffusion noise schedules and the closed-form forward/reverse kernels.
//!
//! The schedule fixes noise levels `beta[t]` for `t = 1..=T`, the per-step
//! retention `alpha_hat[t] = 1 - beta[t]`, the cumulative product
//! `alpha[t] = prod_{i<=t} alpha_hat[i]`, and the posterior variance
//! `beta_tilde[t]`. Everything downstream (corruption, denoising steps,
//! samplers) reads these values; the schedule itself is immutable.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializable schedule parameters, as they appear in configs and
/// checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
}

impl ScheduleParams {
    /// T = 50, beta in [1e-4, 0.5]: the configuration used throughout the
    /// experiments.
    pub fn paper_default() -> Self {
        ScheduleParams {
            steps: 50,
            beta1: 1e-4,
            beta_t: 0.5,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        build_quadratic_schedule(self.steps, self.beta1, self.beta_t)
    }
}

/// Precomputed noise levels for a `T`-step diffusion process.
///
/// All accessors are 1-based in `t`, matching the usual process indexing
/// where `x_0` is data and `x_T` is (almost) pure noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha_hat: Vec<f64>,
    alpha: Vec<f64>,
    beta_tilde: Vec<f64>,
}

/// Build the quadratic schedule
/// `beta[t] = ( (T-t)/(T-1) * sqrt(beta1) + (t-1)/(T-1) * sqrt(betaT) )^2`.
///
/// `beta1` and `betaT` are the exact endpoints; intermediate levels
/// interpolate linearly in sqrt-space, which gives a gentle decay of
/// `alpha[t]`.
pub fn build_quadratic_schedule(steps: usize, beta1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!(
            "schedule needs at least 2 steps, got {steps}"
        )));
    }
    if !(beta1 > 0.0 && beta1 < beta_t && beta_t < 1.0) {
        return Err(Error::Config(format!(
            "schedule bounds must satisfy 0 < beta1 < betaT < 1, got beta1={beta1}, betaT={beta_t}"
        )));
    }

    let sqrt_b1 = beta1.sqrt();
    let sqrt_bt = beta_t.sqrt();
    let denom = (steps - 1) as f64;

    let mut beta = Vec::with_capacity(steps);
    let mut alpha_hat = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut beta_tilde = Vec::with_capacity(steps);

    let mut alpha_running = 1.0;
    let mut alpha_prev = 1.0;
    for t in 1..=steps {
        let w_hi = (t - 1) as f64 / denom;
        let w_lo = (steps - t) as f64 / denom;
        // pin the endpoints exactly; sqrt followed by squaring can lose a ulp
        let b = if t == 1 {
            beta1
        } else if t == steps {
            beta_t
        } else {
            (w_lo * sqrt_b1 + w_hi * sqrt_bt).powi(2)
        };
        let ah = 1.0 - b;
        alpha_running *= ah;

        beta.push(b);
        alpha_hat.push(ah);
        alpha.push(alpha_running);
        beta_tilde.push(if t == 1 {
            b
        } else {
            (1.0 - alpha_prev) / (1.0 - alpha_running) * b
        });
        alpha_prev = alpha_running;
    }

    Ok(NoiseSchedule {
        steps,
        beta,
        alpha_hat,
        alpha,
        beta_tilde,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Noise level `beta[t]`, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Per-step retention `1 - beta[t]`.
    pub fn alpha_hat(&self, t: usize) -> f64 {
        self.alpha_hat[t - 1]
    }

    /// Cumulative retention `prod_{i<=t} (1 - beta[i])`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Posterior variance `beta_tilde[t]`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Argument(format!(
                "diffusion step {t} out of range 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// One line per step: `t,beta,alpha_hat,alpha,beta_tilde`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_hat,alpha,beta_tilde\n");
        for t in 1..=self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t,
                self.beta(t),
                self.alpha_hat(t),
                self.alpha(t),
                self.beta_tilde(t)
            ));
        }
        out
    }
}

/// Sample from the closed-form corruption marginal:
/// returns `sqrt(alpha[t]) * x0 + sqrt(1 - alpha[t]) * eps`.
pub fn forward_diffuse(
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    if x0.dim() != eps.dim() {
        return Err(Error::Argument(format!(
            "forward_diffuse shape mismatch: x0 {:?} vs eps {:?}",
            x0.dim(),
            eps.dim()
        )));
    }
    let a = sched.alpha(t);
    Ok(x0 * a.sqrt() + eps * (1.0 - a).sqrt())
}

/// Posterior mean of the denoising step given a noise estimate:
/// `(x_t - beta[t]/sqrt(1-alpha[t]) * eps_hat) / sqrt(alpha_hat[t])`.
pub fn ddpm_mean(
    x_t: &Array2<f64>,
    t: usize,
    eps_hat: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    if x_t.dim() != eps_hat.dim() {
        return Err(Error::Argument(format!(
            "ddpm_mean shape mismatch: x_t {:?} vs eps_hat {:?}",
            x_t.dim(),
            eps_hat.dim()
        )));
    }
    let coeff = sched.beta(t) / (1.0 - sched.alpha(t)).sqrt();
    Ok((x_t - &(eps_hat * coeff)) / sched.alpha_hat(t).sqrt())
}

/// Standard deviation of the denoising step, `sqrt(beta_tilde[t])`.
pub fn ddpm_sigma(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_step(t)?;
    Ok(sched.beta_tilde(t).sqrt())
}

/// One ancestral denoising step. For `t > 1` returns `mean + sigma * z`;
/// the final step (`t = 1`) emits the mean with no added noise, so the
/// output carries no irreducible sampling noise.
pub fn reverse_step(
    x_t: &Array2<f64>,
    t: usize,
    eps_hat: &Array2<f64>,
    z: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if x_t.dim() != z.dim() {
        return Err(Error::Argument(format!(
            "reverse_step shape mismatch: x_t {:?} vs z {:?}",
            x_t.dim(),
            z.dim()
        )));
    }
    let mean = ddpm_mean(x_t, t, eps_hat, sched)?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = ddpm_sigma(t, sched)?;
    Ok(mean + z * sigma)
}
