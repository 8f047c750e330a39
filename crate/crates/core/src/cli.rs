//! Command-line entry point: `train`, `impute`, `evaluate`, `synth`, and
//! `schedule-dump` subcommands over the documented dataset, checkpoint,
//! and imputation file formats.
//!
//! Every command is deterministic given its configuration and seed, and
//! every output directory receives a `resolved_config.json` recording the
//! fully materialized settings that produced it.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{load_pattern_csv, RunConfig, TrainModeName};
use crate::data::{
    generate_synthetic, load_dataset, save_dataset, split_dataset, Dataset, MissingPattern,
    Normalization, SynthKind, SynthSpec,
};
use crate::error::{Error, Result};
use crate::masking::{holdout_ground_truth, mask_complement, mask_minus, HoldoutMode,
    TimeSeriesSample};
use crate::metrics::{crps_discretized, crps_normalized_average, crps_sum, mae, rmse, ScoreReport};
use crate::rng::{derive_rng, tag};
use crate::sampling::{generate_imputation_ensemble, ImputationEnsemble, SamplerKind};
use crate::schedule::ScheduleParams;
use crate::training::{run_training, Checkpoint, TrainMode};

#[derive(Parser, Debug)]
#[command(
    name = "tsdiff",
    version,
    about = "Conditional diffusion imputation for multivariate time series"
)]
pub struct Cli {
    /// JSON run configuration (required by `train`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps the worker-thread count.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (created if absent).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model per the run configuration; writes the best
    /// checkpoint, the epoch history CSV, and the resolved config.
    Train,
    /// Generate imputation ensembles from a checkpoint.
    Impute(ImputeArgs),
    /// Score an imputation file against ground truth.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Dump the noise-schedule table as CSV.
    ScheduleDump(ScheduleDumpArgs),
}

#[derive(Args, Debug)]
pub struct ImputeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Ensemble size per sample.
    #[arg(long, default_value_t = 100)]
    pub n_samples: usize,
    #[arg(long, value_enum, default_value_t = ImputeMode::Conditional)]
    pub mode: ImputeMode,
    /// Target selection: `missing`, `holdout:FRAC`, or `pattern:PATH`.
    #[arg(long, default_value = "missing")]
    pub target: String,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImputeMode {
    Conditional,
    Unconditional,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Imputation file produced by `impute`.
    #[arg(long)]
    pub imputations: PathBuf,
    /// Dataset holding the ground-truth values (the original, unreduced
    /// data).
    #[arg(long)]
    pub truth_dataset: PathBuf,
    /// Score using only the first N draws of each ensemble.
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Also compute the CRPS of the across-feature sum distribution.
    #[arg(long, default_value_t = false)]
    pub crps_sum: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKindArg,
    #[arg(long, default_value_t = 0.8)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.8)]
    pub phi: f64,
    #[arg(long, default_value_t = 0.6)]
    pub sigma: f64,
    #[arg(long, default_value_t = 2)]
    pub features: usize,
    #[arg(long, default_value_t = 10)]
    pub length: usize,
    #[arg(long, default_value_t = 100)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0.0)]
    pub missing_rate: f64,
    #[arg(long, value_enum, default_value_t = PatternArg::Random)]
    pub pattern: PatternArg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SynthKindArg {
    BivariateGaussian,
    Ar1,
    SinusoidMixture,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum PatternArg {
    Random,
    Blocks,
}

#[derive(Args, Debug)]
pub struct ScheduleDumpArgs {
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta_t: f64,
}

/// Parse arguments, dispatch, and map errors to exit-code classes
/// (2 config, 3 data, 4 numeric, 5 argument).
pub fn run() -> i32 {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // a second initialization (e.g. in tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Impute(args) => cmd_impute(cli, args),
        Command::Evaluate(args) => cmd_evaluate(cli, args),
        Command::Synth(args) => cmd_synth(cli, args),
        Command::ScheduleDump(args) => cmd_schedule_dump(cli, args),
    }
}

fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = Some(dir.clone());
    }
    Ok(config)
}

fn ensure_out_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory (set out_dir or --out-dir)".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_resolved_config(dir: &Path, value: &serde_json::Value) -> Result<()> {
    let path = dir.join("resolved_config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let config = load_run_config(cli)?;
    let out_dir = ensure_out_dir(&config)?;
    let dataset_path = config
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("train needs a dataset path in the config".into()))?;
    let dataset = load_dataset(&dataset_path)?;

    let splits = split_dataset(&dataset, &config.split.ratios, config.seed)?;
    if splits.len() < 2 {
        return Err(Error::Config(
            "split ratios must produce at least train and validation splits".into(),
        ));
    }
    let stats = splits[0].compute_stats()?;
    let train_split = splits[0].normalized(&stats)?;
    let val_split = splits[1].normalized(&stats)?;

    let sched = config.schedule.build()?;
    let denoiser_config = config
        .model
        .to_denoiser_config(dataset.n_features(), config.schedule.steps);
    let model = crate::denoiser::DenoiserModel::init(denoiser_config, config.seed)?;
    let train_config = config.train.to_train_config(config.seed);
    let mode = match config.train.mode {
        TrainModeName::Conditional => TrainMode::Conditional(config.train.resolve_strategy()?),
        TrainModeName::Unconditional => TrainMode::Unconditional,
    };

    let outcome = run_training(model, &sched, &train_split, &val_split, &train_config, &mode)?;

    let checkpoint = Checkpoint::new(
        &outcome.model,
        &mode,
        config.schedule,
        stats,
        dataset.feature_names.clone(),
    );
    checkpoint.save(&out_dir.join("checkpoint.json"))?;
    std::fs::write(
        out_dir.join("history.csv"),
        crate::training::history_to_csv(&outcome.history),
    )?;
    write_resolved_config(&out_dir, &json!({"command": "train", "config": config}))?;

    let last = outcome.history.last().unwrap();
    println!(
        "trained {} epochs; best epoch {} (val loss {:.6}); final val loss {:.6}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome
            .history
            .iter()
            .find(|h| h.epoch == outcome.best_epoch)
            .unwrap()
            .val_loss,
        last.val_loss
    );
    println!("checkpoint: {}", out_dir.join("checkpoint.json").display());
    Ok(())
}

/// How imputation targets are chosen for each sample.
#[derive(Debug, Clone, PartialEq)]
enum TargetSpec {
    /// All entries missing in the data.
    Missing,
    /// Hold out a fraction of observed entries as ground truth; the chain
    /// imputes them together with the originally missing entries.
    Holdout(f64),
    /// A fixed binary grid marking positions to impute; observed entries
    /// under the pattern are held out.
    Pattern(PathBuf),
}

fn parse_target_spec(raw: &str) -> Result<TargetSpec> {
    if raw == "missing" {
        return Ok(TargetSpec::Missing);
    }
    if let Some(frac) = raw.strip_prefix("holdout:") {
        let f: f64 = frac
            .parse()
            .map_err(|_| Error::Config(format!("bad holdout fraction '{frac}'")))?;
        return Ok(TargetSpec::Holdout(f));
    }
    if let Some(path) = raw.strip_prefix("pattern:") {
        return Ok(TargetSpec::Pattern(PathBuf::from(path)));
    }
    Err(Error::Config(format!(
        "bad target spec '{raw}' (expected missing | holdout:FRAC | pattern:PATH)"
    )))
}

/// First line of an imputation file: everything needed to interpret and
/// score the per-sample records that follow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationMeta {
    pub format: String,
    pub mode: String,
    pub target: String,
    pub seed: u64,
    pub n_draws: usize,
    pub feature_names: Vec<String>,
    pub normalization: Normalization,
    pub schedule: ScheduleParams,
}

/// One imputed sample: target positions in row-major order, per-draw
/// values at those positions, their per-position median, and the median as
/// a full grid (null off-target). Values are in original (denormalized)
/// units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationRecord {
    pub index: usize,
    pub n_features: usize,
    pub length: usize,
    pub target_indices: Vec<(usize, usize)>,
    pub draws: Vec<Vec<f64>>,
    pub median: Vec<f64>,
    pub median_grid: Vec<Vec<Option<f64>>>,
}

fn cmd_impute(cli: &Cli, args: &ImputeArgs) -> Result<()> {
    let config = load_run_config(cli)?;
    let out_dir = ensure_out_dir(&config)?;
    let seed = cli.seed.unwrap_or(config.seed);
    let target_spec = parse_target_spec(&args.target)?;

    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let model = checkpoint.build_model()?;
    let sched = checkpoint.build_schedule()?;
    let dataset = load_dataset(&args.dataset)?;
    if dataset.feature_names != checkpoint.feature_names {
        return Err(Error::Config(format!(
            "dataset features {:?} do not match checkpoint features {:?}",
            dataset.feature_names, checkpoint.feature_names
        )));
    }
    let kind = match args.mode {
        ImputeMode::Conditional => SamplerKind::Conditional,
        ImputeMode::Unconditional => SamplerKind::Unconditional,
    };
    if (kind == SamplerKind::Unconditional) != (checkpoint.mode == "unconditional") {
        return Err(Error::Config(format!(
            "sampler mode {:?} does not match checkpoint mode '{}'",
            args.mode, checkpoint.mode
        )));
    }
    let normalized = dataset.normalized(&checkpoint.normalization)?;

    let pattern = match &target_spec {
        TargetSpec::Pattern(path) => Some(load_pattern_csv(path)?),
        _ => None,
    };

    let mut lines = Vec::with_capacity(normalized.len() + 1);
    let meta = ImputationMeta {
        format: "tsdiff-imputation-v1".into(),
        mode: match kind {
            SamplerKind::Conditional => "conditional".into(),
            SamplerKind::Unconditional => "unconditional".into(),
        },
        target: args.target.clone(),
        seed,
        n_draws: args.n_samples,
        feature_names: dataset.feature_names.clone(),
        normalization: checkpoint.normalization.clone(),
        schedule: checkpoint.schedule,
    };
    lines.push(serde_json::to_string(&meta)?);

    for (idx, sample) in normalized.samples.iter().enumerate() {
        let (cond_sample, target_mask) =
            prepare_imputation_target(sample, &target_spec, pattern.as_ref(), seed, idx)?;
        let ensemble = impute_one(
            &model,
            &sched,
            &cond_sample,
            &target_mask,
            kind,
            args.n_samples,
            seed,
            idx,
        )?;
        let record = ensemble_to_record(&ensemble, idx, &checkpoint.normalization);
        lines.push(serde_json::to_string(&record)?);
    }

    let out_path = out_dir.join("imputations.ndjson");
    std::fs::write(&out_path, lines.join("\n") + "\n")?;
    write_resolved_config(
        &out_dir,
        &json!({
            "command": "impute",
            "checkpoint": args.checkpoint,
            "dataset": args.dataset,
            "n_samples": args.n_samples,
            "mode": meta.mode,
            "target": args.target,
            "seed": seed,
        }),
    )?;
    println!(
        "imputed {} samples with {} draws each: {}",
        normalized.len(),
        args.n_samples,
        out_path.display()
    );
    Ok(())
}

/// Resolve the conditioning sample and chain target support for one
/// sample. The chain always imputes the full complement of the
/// conditioning mask, matching deployment semantics where every
/// non-conditional entry is a target.
fn prepare_imputation_target(
    sample: &TimeSeriesSample,
    spec: &TargetSpec,
    pattern: Option<&Array2<u8>>,
    seed: u64,
    sample_idx: usize,
) -> Result<(TimeSeriesSample, Array2<u8>)> {
    match spec {
        TargetSpec::Missing => Ok((sample.clone(), mask_complement(sample.mask()))),
        TargetSpec::Holdout(frac) => {
            let mut rng = derive_rng(seed, tag::HOLDOUT, sample_idx as u64);
            let (reduced, _truth) =
                holdout_ground_truth(sample, *frac, HoldoutMode::Entrywise, &mut rng)?;
            let target = mask_complement(reduced.mask());
            Ok((reduced, target))
        }
        TargetSpec::Pattern(_) => {
            let pattern = pattern.expect("pattern grid loaded by caller");
            if pattern.dim() != sample.mask().dim() {
                return Err(Error::Config(format!(
                    "pattern shape {:?} does not match sample {:?}",
                    pattern.dim(),
                    sample.mask().dim()
                )));
            }
            let reduced_mask = mask_minus(sample.mask(), pattern);
            let reduced = TimeSeriesSample::new(
                sample.values().clone(),
                reduced_mask,
                sample.timestamps().clone(),
            )?;
            let target = mask_complement(reduced.mask());
            Ok((reduced, target))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn impute_one(
    model: &crate::denoiser::DenoiserModel,
    sched: &crate::schedule::NoiseSchedule,
    cond_sample: &TimeSeriesSample,
    target_mask: &Array2<u8>,
    kind: SamplerKind,
    n_draws: usize,
    seed: u64,
    sample_idx: usize,
) -> Result<ImputationEnsemble> {
    // per-sample ensemble seed, so draws across samples are independent
    let ensemble_seed = {
        use rand::Rng;
        derive_rng(seed, tag::DRAW, sample_idx as u64).random::<u64>()
    };
    generate_imputation_ensemble(
        model,
        sched,
        cond_sample,
        target_mask,
        kind,
        n_draws,
        ensemble_seed,
    )
}

fn ensemble_to_record(
    ensemble: &ImputationEnsemble,
    index: usize,
    stats: &Normalization,
) -> ImputationRecord {
    let (k, l) = ensemble.target_mask.dim();
    let target_indices: Vec<(usize, usize)> = ensemble
        .target_mask
        .indexed_iter()
        .filter(|(_, &m)| m == 1)
        .map(|(idx, _)| idx)
        .collect();
    let draws: Vec<Vec<f64>> = ensemble
        .draws
        .iter()
        .map(|d| {
            target_indices
                .iter()
                .map(|&(i, j)| stats.denormalize_value(i, d[[i, j]]))
                .collect()
        })
        .collect();
    let median = ensemble.median();
    let median_values: Vec<f64> = target_indices
        .iter()
        .map(|&(i, j)| stats.denormalize_value(i, median[[i, j]]))
        .collect();
    let mut median_grid = vec![vec![None; l]; k];
    for (pos, &(i, j)) in target_indices.iter().enumerate() {
        median_grid[i][j] = Some(median_values[pos]);
    }
    ImputationRecord {
        index,
        n_features: k,
        length: l,
        target_indices,
        draws,
        median: median_values,
        median_grid,
    }
}

/// Parsed imputation file.
pub struct ImputationFile {
    pub meta: ImputationMeta,
    pub records: Vec<ImputationRecord>,
}

pub fn load_imputations(path: &Path) -> Result<ImputationFile> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read imputations {}: {e}", path.display())))?;
    let mut lines = raw.lines().filter(|l| !l.trim().is_empty());
    let meta_line = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty imputation file", path.display())))?;
    let meta: ImputationMeta = serde_json::from_str(meta_line)
        .map_err(|e| Error::Data(format!("{}: bad meta line: {e}", path.display())))?;
    if meta.format != "tsdiff-imputation-v1" {
        return Err(Error::Data(format!(
            "{}: unknown imputation format '{}'",
            path.display(),
            meta.format
        )));
    }
    let records = lines
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| {
                Error::Data(format!("{}:{}: bad record: {e}", path.display(), i + 2))
            })
        })
        .collect::<Result<Vec<ImputationRecord>>>()?;
    Ok(ImputationFile { meta, records })
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let config = load_run_config(cli)?;
    let out_dir = ensure_out_dir(&config)?;
    let file = load_imputations(&args.imputations)?;
    let truth = load_dataset(&args.truth_dataset)?;
    if truth.feature_names != file.meta.feature_names {
        return Err(Error::Config(format!(
            "truth features {:?} do not match imputation features {:?}",
            truth.feature_names, file.meta.feature_names
        )));
    }
    let report = score_imputations(&file, &truth, args.n_samples, args.crps_sum, &out_dir)?;
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    write_resolved_config(
        &out_dir,
        &json!({
            "command": "evaluate",
            "imputations": args.imputations,
            "truth_dataset": args.truth_dataset,
            "n_samples": args.n_samples,
            "crps_sum": args.crps_sum,
        }),
    )?;
    println!(
        "crps {:.6}  mae {:.6}  rmse {:.6}  over {} targets ({} draws)",
        report.crps, report.mae, report.rmse, report.n_targets, report.n_samples
    );
    println!("report: {}", report_path.display());
    Ok(())
}

/// Score an imputation file against the truth dataset. CRPS/MAE/RMSE are
/// computed on the normalized scale recorded in the file's meta line;
/// positions without an observed truth value are skipped.
pub fn score_imputations(
    file: &ImputationFile,
    truth: &Dataset,
    use_draws: Option<usize>,
    with_crps_sum: bool,
    out_dir: &Path,
) -> Result<ScoreReport> {
    let stats = &file.meta.normalization;
    let mut cases: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut medians = Vec::new();
    let mut truths_norm = Vec::new();
    let mut csv = String::from("sample,k,l,truth,median,crps\n");
    let mut n_draws_used = None;

    let mut sum_grids: Vec<(Vec<Array2<f64>>, Array2<f64>, Array2<u8>)> = Vec::new();

    for record in &file.records {
        if record.index >= truth.len() {
            return Err(Error::Data(format!(
                "imputation record {} has no matching truth sample",
                record.index
            )));
        }
        let truth_sample = &truth.samples[record.index];
        if truth_sample.n_features() != record.n_features
            || truth_sample.len() != record.length
        {
            return Err(Error::Data(format!(
                "truth sample {} shape mismatch with record",
                record.index
            )));
        }
        let take = match use_draws {
            Some(n) => {
                if n == 0 || n > record.draws.len() {
                    return Err(Error::Argument(format!(
                        "cannot score {n} draws; record has {}",
                        record.draws.len()
                    )));
                }
                n
            }
            None => record.draws.len(),
        };
        match n_draws_used {
            None => n_draws_used = Some(take),
            Some(prev) if prev != take => {
                return Err(Error::Data("records disagree on draw count".into()))
            }
            _ => {}
        }

        let (k, l) = (record.n_features, record.length);
        let mut scored_mask: Array2<u8> = Array2::zeros((k, l));
        let mut truth_grid: Array2<f64> = Array2::zeros((k, l));
        for (pos, &(i, j)) in record.target_indices.iter().enumerate() {
            if truth_sample.mask()[[i, j]] != 1 {
                continue; // no ground truth at this target
            }
            let z_raw = truth_sample.values()[[i, j]];
            let z = stats.normalize_value(i, z_raw);
            let draws_norm: Vec<f64> = record.draws[..take]
                .iter()
                .map(|d| stats.normalize_value(i, d[pos]))
                .collect();
            // median of the draws actually scored, so a truncated
            // ensemble moves the deterministic metrics too
            let med_norm = median_of(&draws_norm);
            let crps = crps_discretized(&draws_norm, z)?;
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                record.index,
                i,
                j,
                z_raw,
                stats.denormalize_value(i, med_norm),
                crps
            ));
            cases.push((draws_norm, z));
            medians.push(med_norm);
            truths_norm.push(z);
            scored_mask[[i, j]] = 1;
            truth_grid[[i, j]] = z;
        }
        if with_crps_sum {
            let draw_grids: Vec<Array2<f64>> = record.draws[..take]
                .iter()
                .map(|draw| {
                    let mut g = Array2::zeros((k, l));
                    for (pos, &(i, j)) in record.target_indices.iter().enumerate() {
                        if scored_mask[[i, j]] == 1 {
                            g[[i, j]] = stats.normalize_value(i, draw[pos]);
                        }
                    }
                    g
                })
                .collect();
            sum_grids.push((draw_grids, truth_grid, scored_mask));
        }
    }

    if cases.is_empty() {
        return Err(Error::Data(
            "no imputed position has an observed truth value".into(),
        ));
    }

    let crps = crps_normalized_average(&cases)?;
    let crps_sum_score = if with_crps_sum {
        // pool numerators and denominators across samples
        let mut num = 0.0;
        let mut den = 0.0;
        for (draw_grids, truth_grid, scored_mask) in &sum_grids {
            let s = crps_sum(draw_grids, truth_grid, scored_mask)?;
            let mass: f64 = truth_grid
                .indexed_iter()
                .filter(|((i, j), _)| scored_mask[[*i, *j]] == 1)
                .map(|(_, v)| v.abs())
                .sum();
            num += s * mass;
            den += mass;
        }
        Some(num / den)
    } else {
        None
    };

    std::fs::write(out_dir.join("per_position.csv"), csv)?;
    Ok(ScoreReport {
        crps,
        crps_sum: crps_sum_score,
        mae: mae(&medians, &truths_norm)?,
        rmse: rmse(&medians, &truths_norm)?,
        n_targets: cases.len(),
        n_samples: n_draws_used.unwrap(),
    })
}

fn median_of(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let config = load_run_config(cli)?;
    let out_dir = ensure_out_dir(&config)?;
    let seed = cli.seed.unwrap_or(config.seed);
    let spec = SynthSpec {
        kind: match args.kind {
            SynthKindArg::BivariateGaussian => SynthKind::BivariateGaussian { rho: args.rho },
            SynthKindArg::Ar1 => SynthKind::Ar1 {
                phi: args.phi,
                sigma: args.sigma,
            },
            SynthKindArg::SinusoidMixture => SynthKind::SinusoidMixture,
        },
        n_features: args.features,
        length: args.length,
        n_samples: args.n_samples,
        missing_rate: args.missing_rate,
        pattern: match args.pattern {
            PatternArg::Random => MissingPattern::Random,
            PatternArg::Blocks => MissingPattern::Blocks,
        },
        seed,
    };
    let dataset = generate_synthetic(&spec)?;
    let out_path = out_dir.join("dataset.ndjson");
    save_dataset(&out_path, &dataset)?;
    write_resolved_config(&out_dir, &json!({"command": "synth", "spec": spec}))?;
    println!(
        "wrote {} samples ({} features x {} steps): {}",
        dataset.len(),
        args.features,
        args.length,
        out_path.display()
    );
    Ok(())
}

fn cmd_schedule_dump(cli: &Cli, args: &ScheduleDumpArgs) -> Result<()> {
    let config = load_run_config(cli)?;
    let out_dir = ensure_out_dir(&config)?;
    let params = ScheduleParams {
        steps: args.steps,
        beta1: args.beta1,
        beta_t: args.beta_t,
    };
    let sched = params.build()?;
    let out_path = out_dir.join("schedule.csv");
    std::fs::write(&out_path, sched.to_csv())?;
    write_resolved_config(&out_dir, &json!({"command": "schedule-dump", "schedule": params}))?;
    println!("wrote schedule table: {}", out_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_spec_parsing() {
        assert_eq!(parse_target_spec("missing").unwrap(), TargetSpec::Missing);
        assert_eq!(
            parse_target_spec("holdout:0.5").unwrap(),
            TargetSpec::Holdout(0.5)
        );
        assert_eq!(
            parse_target_spec("pattern:/tmp/p.csv").unwrap(),
            TargetSpec::Pattern(PathBuf::from("/tmp/p.csv"))
        );
        assert!(parse_target_spec("nonsense").is_err());
        assert!(parse_target_spec("holdout:abc").is_err());
    }
}
