//! Self-supervised training: per-step target choice, masked-noise
//! corruption, the adaptive-moment optimizer, the epoch loop with learning
//! rate decay and best-checkpoint retention, and the checkpoint format.
//!
//! Each training step draws a diffusion step uniformly, splits the sample's
//! observed entries into conditioning and targets with the configured
//! strategy, corrupts the extended target grid (missing entries enter as
//! zero-valued dummies with noise masked off the conditional support), and
//! minimizes the squared noise-prediction error on the target entries.
//!
//! The unconditional variant trains the same architecture with an empty
//! conditional mask and the loss masked by the observation mask; it backs
//! the replacement-sampling imputation baseline.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization};
use crate::denoiser::{DenoiserConfig, DenoiserInput, DenoiserModel, ParamSpec, TrainExample};
use crate::error::{Error, Result};
use crate::masking::{MaskSplit, Strategy, TimeSeriesSample};
use crate::rng::{derive_rng, tag};
use crate::schedule::{NoiseSchedule, ScheduleParams};

/// A multiplicative learning-rate decay point: after `at` (fraction of the
/// total epochs) has elapsed, multiply the rate by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub at: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_decay")]
    pub lr_decay: Vec<DecayPoint>,
    pub seed: u64,
    #[serde(default = "default_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Optional global-norm gradient clip; off by default.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_decay() -> Vec<DecayPoint> {
    vec![
        DecayPoint {
            at: 0.75,
            factor: 0.1,
        },
        DecayPoint {
            at: 0.9,
            factor: 0.1,
        },
    ]
}
fn default_adam_beta1() -> f64 {
    0.9
}
fn default_adam_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    /// Batch 16, 200 epochs, rate 1e-3 decayed by 10x at 75% and 90% of
    /// the epochs.
    pub fn paper_default(seed: u64) -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            lr_decay: default_decay(),
            seed,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        let mut prev = 0.0;
        for p in &self.lr_decay {
            if p.at <= prev || p.at > 1.0 {
                return Err(Error::Config(
                    "decay points must be strictly increasing in (0,1]".into(),
                ));
            }
            if p.factor <= 0.0 {
                return Err(Error::Config("decay factors must be > 0".into()));
            }
            prev = p.at;
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch index.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for p in &self.lr_decay {
            if epoch as f64 > p.at * self.epochs as f64 {
                lr *= p.factor;
            }
        }
        lr
    }
}

/// What the denoiser is conditioned on during training.
#[derive(Debug, Clone)]
pub enum TrainMode {
    /// Self-supervised: observed entries split by the strategy.
    Conditional(Strategy),
    /// Empty conditional mask; loss masked by the observation mask.
    Unconditional,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            steps: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(n_params: usize, cfg: &TrainConfig) -> Self {
        Adam::new(n_params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Scale the gradient down to `max_norm` if its global L2 norm exceeds it.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
}

/// Draw a noise grid entry by entry in row-major order.
fn draw_noise(k: usize, l: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut eps = Array2::zeros((k, l));
    for i in 0..k {
        for j in 0..l {
            eps[[i, j]] = rng.sample(StandardNormal);
        }
    }
    eps
}

/// Build one training example from a sample, a conditioning/target split,
/// a diffusion step, and a pre-drawn noise grid.
///
/// The extended target is the target values with zeros at missing and
/// conditional positions; the injected noise is masked off the conditional
/// support, so `x_t = sqrt(alpha_t) x0_target + sqrt(1-alpha_t) (1-M_cond) eps`.
/// Values at missing positions never enter: only mask-gated reads touch
/// the grid.
pub fn build_train_example(
    sample: &TimeSeriesSample,
    cond_mask: &Array2<u8>,
    target_mask: &Array2<u8>,
    t: usize,
    eps: Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<TrainExample> {
    let a = sched.alpha(t);
    let x0_target = sample.gated_values(target_mask);
    let cond_obs = sample.gated_values(cond_mask);
    let mut noisy = Array2::zeros(x0_target.dim());
    for ((i, j), v) in noisy.indexed_iter_mut() {
        if cond_mask[[i, j]] == 0 {
            *v = a.sqrt() * x0_target[[i, j]] + (1.0 - a).sqrt() * eps[[i, j]];
        }
    }
    let input = DenoiserInput::unpadded(
        noisy,
        cond_obs,
        cond_mask.clone(),
        sample.timestamps().clone(),
        t,
    )?;
    Ok(TrainExample {
        input,
        noise: eps,
        target_mask: target_mask.clone(),
    })
}

fn prepare_batch(
    batch: &[&TimeSeriesSample],
    sched: &NoiseSchedule,
    mode: &TrainMode,
    pattern_source: &[TimeSeriesSample],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainExample>> {
    batch
        .iter()
        .map(|sample| {
            let t = rng.random_range(1..=sched.steps());
            let split = match mode {
                TrainMode::Conditional(strategy) => {
                    strategy.split(sample, pattern_source, rng)?
                }
                TrainMode::Unconditional => MaskSplit {
                    cond_mask: Array2::zeros(sample.mask().dim()),
                    target_mask: sample.mask().clone(),
                },
            };
            let eps = draw_noise(sample.n_features(), sample.len(), rng);
            build_train_example(sample, &split.cond_mask, &split.target_mask, t, eps, sched)
        })
        .collect()
}

/// One optimizer update on a batch of samples. Returns the batch loss.
pub fn train_step(
    model: &mut DenoiserModel,
    sched: &NoiseSchedule,
    batch: &[&TimeSeriesSample],
    strategy: &Strategy,
    pattern_source: &[TimeSeriesSample],
    rng: &mut ChaCha8Rng,
    adam: &mut Adam,
    lr: f64,
    clip_norm: Option<f64>,
) -> Result<f64> {
    let mode = TrainMode::Conditional(strategy.clone());
    train_step_mode(model, sched, batch, &mode, pattern_source, rng, adam, lr, clip_norm)
}

/// The unconditional variant: missing entries are filled with zero dummies,
/// the whole grid is diffused, and the loss is masked by the observation
/// mask.
pub fn train_step_unconditional(
    model: &mut DenoiserModel,
    sched: &NoiseSchedule,
    batch: &[&TimeSeriesSample],
    rng: &mut ChaCha8Rng,
    adam: &mut Adam,
    lr: f64,
    clip_norm: Option<f64>,
) -> Result<f64> {
    train_step_mode(
        model,
        sched,
        batch,
        &TrainMode::Unconditional,
        &[],
        rng,
        adam,
        lr,
        clip_norm,
    )
}

#[allow(clippy::too_many_arguments)]
fn train_step_mode(
    model: &mut DenoiserModel,
    sched: &NoiseSchedule,
    batch: &[&TimeSeriesSample],
    mode: &TrainMode,
    pattern_source: &[TimeSeriesSample],
    rng: &mut ChaCha8Rng,
    adam: &mut Adam,
    lr: f64,
    clip_norm: Option<f64>,
) -> Result<f64> {
    let examples = prepare_batch(batch, sched, mode, pattern_source, rng)?;
    let (loss, mut grad) = model.loss_and_gradients(&examples)?;
    if let Some(c) = clip_norm {
        clip_global_norm(&mut grad, c);
    }
    adam.step(model.params_mut(), &grad, lr);
    Ok(loss)
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Result of a training run: best-validation model plus the full history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Train over epochs with per-epoch shuffling, fixed-seed deterministic
/// validation, learning-rate decay, and best-checkpoint retention.
///
/// Validation uses the random strategy with draws (split, diffusion step,
/// noise) frozen per element at start, so the validation loss is a
/// deterministic function of the parameters and comparable across epochs.
pub fn run_training(
    mut model: DenoiserModel,
    sched: &NoiseSchedule,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mode: &TrainMode,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }

    // frozen validation fixtures
    let val_examples: Vec<TrainExample> = val
        .samples
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            let mut vrng = derive_rng(cfg.seed, tag::VALIDATION, i as u64);
            let t = vrng.random_range(1..=sched.steps());
            let split = match mode {
                TrainMode::Conditional(_) => {
                    crate::masking::random_split(sample, &mut vrng)?
                }
                TrainMode::Unconditional => MaskSplit {
                    cond_mask: Array2::zeros(sample.mask().dim()),
                    target_mask: sample.mask().clone(),
                },
            };
            let eps = draw_noise(sample.n_features(), sample.len(), &mut vrng);
            build_train_example(sample, &split.cond_mask, &split.target_mask, t, eps, sched)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut adam = Adam::from_config(model.params().len(), cfg);
    let mut step_rng = derive_rng(cfg.seed, tag::TRAIN, 0);
    let pattern_source: &[TimeSeriesSample] = &train.samples;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<f64>)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut shuffle_rng = derive_rng(cfg.seed, tag::SHUFFLE, epoch as u64);
            order.shuffle(&mut shuffle_rng);
        }

        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TimeSeriesSample> =
                chunk.iter().map(|&i| &train.samples[i]).collect();
            let examples = prepare_batch(&batch, sched, mode, pattern_source, &mut step_rng)?;
            let (loss, mut grad) = model.loss_and_gradients(&examples)?;
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grad, c);
            }
            adam.step(model.params_mut(), &grad, lr);
            epoch_loss += loss;
            n_batches += 1;
        }

        let val_loss = model.loss(&val_examples)?;
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / n_batches as f64,
            val_loss,
            lr,
        });
        let improved = match &best {
            None => true,
            Some((_, best_val, _)) => val_loss < *best_val,
        };
        if improved {
            best = Some((epoch, val_loss, model.params().to_vec()));
        }
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch ran");
    let best_model = DenoiserModel::from_params(model.config().clone(), best_params)?;
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        history,
    })
}

/// History CSV: `epoch,train_loss,val_loss,lr`, one row per epoch.
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.train_loss, h.val_loss, h.lr
        ));
    }
    out
}

const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing trained-model container: config, parameter layout,
/// flat parameters, schedule, and the normalization the model was trained
/// under. JSON round-trips `f64` exactly, so save/load is bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub mode: String,
    pub model: DenoiserConfig,
    pub layout: Vec<ParamSpec>,
    pub params: Vec<f64>,
    pub schedule: ScheduleParams,
    pub normalization: Normalization,
    pub feature_names: Vec<String>,
}

impl Checkpoint {
    pub fn new(
        model: &DenoiserModel,
        mode: &TrainMode,
        schedule: ScheduleParams,
        normalization: Normalization,
        feature_names: Vec<String>,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            mode: match mode {
                TrainMode::Conditional(_) => "conditional".into(),
                TrainMode::Unconditional => "unconditional".into(),
            },
            model: model.config().clone(),
            layout: model.layout().to_vec(),
            params: model.params().to_vec(),
            schedule,
            normalization,
            feature_names,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("malformed checkpoint {}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Rebuild the model, verifying the stored layout against the one the
    /// config derives.
    pub fn build_model(&self) -> Result<DenoiserModel> {
        let model = DenoiserModel::from_params(self.model.clone(), self.params.clone())?;
        if model.layout() != self.layout.as_slice() {
            return Err(Error::Config(
                "checkpoint layout does not match its config".into(),
            ));
        }
        Ok(model)
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }
}
