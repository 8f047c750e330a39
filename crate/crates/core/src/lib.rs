//! Conditional diffusion imputation for multivariate time series.
//!
//! The crate builds up from closed-form diffusion mathematics (`schedule`),
//! through mask bookkeeping and self-supervised target choice (`masking`),
//! a 2D-attention denoiser with exact reverse-mode gradients (`autodiff`,
//! `denoiser`), the training loop (`training`), conditional and
//! unconditional samplers (`sampling`), probabilistic scoring (`metrics`),
//! and dataset handling with synthetic generators (`data`). The `cli`
//! module wires everything into `train` / `impute` / `evaluate` / `synth` /
//! `schedule-dump` subcommands.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
