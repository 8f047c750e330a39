//! Run configuration: the JSON config file consumed by the CLI, with
//! defaults matching the full-scale training protocol. The resolved
//! configuration (all defaults materialized, all overrides applied) is
//! written next to every output artifact for provenance.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::masking::Strategy;
use crate::schedule::ScheduleParams;
use crate::training::{DecayPoint, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "ScheduleParams::paper_default")]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub split: SplitSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: None,
            out_dir: None,
            schedule: ScheduleParams::paper_default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            split: SplitSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("malformed config {}: {e}", path.display())))
    }
}

/// Architecture knobs; feature count and step count are resolved from the
/// dataset and the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default = "d_layers")]
    pub residual_layers: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_heads")]
    pub attention_heads: usize,
    #[serde(default = "d_ff")]
    pub feedforward_dim: usize,
    #[serde(default = "d_femb")]
    pub feature_embed_dim: usize,
    #[serde(default = "d_demb")]
    pub diffusion_embed_dim: usize,
    #[serde(default = "d_temb")]
    pub time_embed_dim: usize,
}

fn d_layers() -> usize {
    4
}
fn d_channels() -> usize {
    64
}
fn d_heads() -> usize {
    8
}
fn d_ff() -> usize {
    64
}
fn d_femb() -> usize {
    16
}
fn d_demb() -> usize {
    128
}
fn d_temb() -> usize {
    128
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            residual_layers: d_layers(),
            channels: d_channels(),
            attention_heads: d_heads(),
            feedforward_dim: d_ff(),
            feature_embed_dim: d_femb(),
            diffusion_embed_dim: d_demb(),
            time_embed_dim: d_temb(),
        }
    }
}

impl ModelSection {
    pub fn to_denoiser_config(&self, n_features: usize, n_steps: usize) -> DenoiserConfig {
        DenoiserConfig {
            residual_layers: self.residual_layers,
            channels: self.channels,
            attention_heads: self.attention_heads,
            diffusion_embed_dim: self.diffusion_embed_dim,
            time_embed_dim: self.time_embed_dim,
            feature_embed_dim: self.feature_embed_dim,
            feedforward_dim: self.feedforward_dim,
            n_features,
            n_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Random,
    Historical,
    Mix,
    TestPattern,
    Interpolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainModeName {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_decay")]
    pub lr_decay: Vec<DecayPoint>,
    #[serde(default = "d_mode")]
    pub mode: TrainModeName,
    #[serde(default = "d_strategy")]
    pub strategy: StrategyName,
    #[serde(default)]
    pub test_pattern_file: Option<PathBuf>,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "d_b1")]
    pub adam_beta1: f64,
    #[serde(default = "d_b2")]
    pub adam_beta2: f64,
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
}

fn d_epochs() -> usize {
    200
}
fn d_batch() -> usize {
    16
}
fn d_lr() -> f64 {
    1e-3
}
fn d_decay() -> Vec<DecayPoint> {
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
fn d_mode() -> TrainModeName {
    TrainModeName::Conditional
}
fn d_strategy() -> StrategyName {
    StrategyName::Random
}
fn d_b1() -> f64 {
    0.9
}
fn d_b2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr: d_lr(),
            lr_decay: d_decay(),
            mode: d_mode(),
            strategy: d_strategy(),
            test_pattern_file: None,
            clip_norm: None,
            adam_beta1: d_b1(),
            adam_beta2: d_b2(),
            adam_eps: d_eps(),
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: self.lr_decay.clone(),
            seed,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            clip_norm: self.clip_norm,
        }
    }

    /// Resolve the strategy, loading the pattern grid when required.
    pub fn resolve_strategy(&self) -> Result<Strategy> {
        Ok(match self.strategy {
            StrategyName::Random => Strategy::Random,
            StrategyName::Historical => Strategy::Historical,
            StrategyName::Mix => Strategy::Mix,
            StrategyName::Interpolation => Strategy::Interpolation,
            StrategyName::TestPattern => {
                let path = self.test_pattern_file.as_ref().ok_or_else(|| {
                    Error::Config("strategy test_pattern needs test_pattern_file".into())
                })?;
                Strategy::TestPattern(load_pattern_csv(path)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSection {
    #[serde(default = "d_ratios")]
    pub ratios: Vec<f64>,
}

fn d_ratios() -> Vec<f64> {
    vec![0.7, 0.1, 0.2]
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { ratios: d_ratios() }
    }
}

/// Binary grid CSV: one row per feature, comma-separated 0/1 entries.
pub fn load_pattern_csv(path: &Path) -> Result<Array2<u8>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read pattern {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<u8>> = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| match cell.trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::Data(format!(
                    "{}:{}: pattern entry '{other}' is not 0/1",
                    path.display(),
                    lineno + 1
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Data(format!(
                    "{}:{}: ragged pattern row",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: empty pattern file",
            path.display()
        )));
    }
    let k = rows.len();
    let l = rows[0].len();
    Ok(Array2::from_shape_fn((k, l), |(i, j)| rows[i][j]))
}
