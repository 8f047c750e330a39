//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured values (visible with `--nocapture`).
//!
//! Criteria 8-10 share three seeded end-to-end training runs on correlated
//! bivariate Gaussian data; criterion 11 trains its own strategy-study
//! models on block-missing autoregressive data. Everything is seeded, so
//! the suite is deterministic on a given platform.

use std::sync::LazyLock;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use tsdiff::data::{
    block_missing_mask, generate_synthetic, split_dataset, Dataset, MissingPattern, SynthKind,
    SynthSpec,
};
use tsdiff::denoiser::{DenoiserConfig, DenoiserInput, DenoiserModel};
use tsdiff::masking::{
    self, count_ones, holdout_ground_truth, mask_complement, HoldoutMode, MaskSplit, Strategy,
    TimeSeriesSample,
};
use tsdiff::metrics::{crps_discretized, crps_exact_empirical, crps_normalized_average};
use tsdiff::rng::{derive_rng, tag};
use tsdiff::sampling::{generate_imputation_ensemble, ImputationEnsemble, SamplerKind};
use tsdiff::schedule::{
    build_quadratic_schedule, forward_diffuse, reverse_step, NoiseSchedule,
};
use tsdiff::training::{build_train_example, run_training, TrainConfig, TrainMode, TrainOutcome};

const RHO: f64 = 0.8;

fn paper_schedule() -> NoiseSchedule {
    build_quadratic_schedule(50, 1e-4, 0.5).unwrap()
}

fn desk_model_config(layers: usize) -> DenoiserConfig {
    DenoiserConfig {
        residual_layers: layers,
        channels: 32,
        attention_heads: 4,
        diffusion_embed_dim: 128,
        time_embed_dim: 128,
        feature_embed_dim: 16,
        feedforward_dim: 64,
        n_features: 2,
        n_steps: 50,
    }
}

fn draw_noise_grid(k: usize, l: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((k, l), |_| rng.sample(StandardNormal))
}

/// One end-to-end run for criteria 8-10: conditional and unconditional
/// models trained at the full-protocol hyperparameters, plus ensembles on
/// a 500-case test set where feature 0 is observed and feature 1 is the
/// target.
struct SeedRun {
    /// Per test sample: the complete truth sample and the conditional /
    /// unconditional ensembles over the feature-1 row.
    cases: Vec<(TimeSeriesSample, ImputationEnsemble, ImputationEnsemble)>,
}

const EVAL_SERIES: usize = 50;
const SERIES_LEN: usize = 10;
const COND_DRAWS: usize = 100;
const UNCOND_DRAWS: usize = 50;

fn train_one(
    seed: u64,
    mode: &TrainMode,
    train: &Dataset,
    val: &Dataset,
    epochs: usize,
    layers: usize,
) -> TrainOutcome {
    let sched = paper_schedule();
    let mut cfg = TrainConfig::paper_default(seed);
    cfg.epochs = epochs;
    let model = DenoiserModel::init(desk_model_config(layers), seed).unwrap();
    run_training(model, &sched, train, val, &cfg, mode).unwrap()
}

fn build_seed_run(seed: u64) -> SeedRun {
    let sched = paper_schedule();
    let data = generate_synthetic(&SynthSpec {
        kind: SynthKind::BivariateGaussian { rho: RHO },
        n_features: 2,
        length: SERIES_LEN,
        n_samples: 250,
        missing_rate: 0.0,
        pattern: MissingPattern::Random,
        seed,
    })
    .unwrap();
    let splits = split_dataset(&data, &[0.7, 0.1, 0.2], seed).unwrap();
    let stats = splits[0].compute_stats().unwrap();
    let train = splits[0].normalized(&stats).unwrap();
    let val = splits[1].normalized(&stats).unwrap();

    let cond = train_one(
        seed,
        &TrainMode::Conditional(Strategy::Random),
        &train,
        &val,
        200,
        2,
    );
    let uncond = train_one(seed, &TrainMode::Unconditional, &train, &val, 200, 2);

    // evaluation set: independent complete samples, feature 1 held out
    let eval_data = generate_synthetic(&SynthSpec {
        kind: SynthKind::BivariateGaussian { rho: RHO },
        n_features: 2,
        length: SERIES_LEN,
        n_samples: EVAL_SERIES,
        missing_rate: 0.0,
        pattern: MissingPattern::Random,
        seed: seed + 1000,
    })
    .unwrap()
    .normalized(&stats)
    .unwrap();

    let cases = eval_data
        .samples
        .iter()
        .enumerate()
        .map(|(i, truth)| {
            let mut reduced_mask = truth.mask().clone();
            for j in 0..SERIES_LEN {
                reduced_mask[[1, j]] = 0;
            }
            let reduced = TimeSeriesSample::new(
                truth.values().clone(),
                reduced_mask,
                truth.timestamps().clone(),
            )
            .unwrap();
            let target = mask_complement(reduced.mask());
            let draw_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let cond_ens = generate_imputation_ensemble(
                &cond.model,
                &sched,
                &reduced,
                &target,
                SamplerKind::Conditional,
                COND_DRAWS,
                draw_seed,
            )
            .unwrap();
            let uncond_ens = generate_imputation_ensemble(
                &uncond.model,
                &sched,
                &reduced,
                &target,
                SamplerKind::Unconditional,
                UNCOND_DRAWS,
                draw_seed + 7,
            )
            .unwrap();
            (truth.clone(), cond_ens, uncond_ens)
        })
        .collect();

    SeedRun { cases }
}

static SEED_RUNS: LazyLock<Vec<SeedRun>> =
    LazyLock::new(|| [11u64, 22, 33].iter().map(|&s| build_seed_run(s)).collect());

/// Pooled normalized CRPS over all cases of a seed run, truncating each
/// ensemble to `n_draws`.
fn run_crps(run: &SeedRun, conditional: bool, n_draws: usize) -> f64 {
    let mut cases = Vec::new();
    for (truth, cond_ens, uncond_ens) in &run.cases {
        let ens = if conditional { cond_ens } else { uncond_ens };
        for ((i, j), &m) in ens.target_mask.indexed_iter() {
            if m == 1 && truth.mask()[[i, j]] == 1 {
                let draws: Vec<f64> = ens.draws[..n_draws].iter().map(|d| d[[i, j]]).collect();
                cases.push((draws, truth.values()[[i, j]]));
            }
        }
    }
    crps_normalized_average(&cases).unwrap()
}

// ---------------------------------------------------------------------
// criterion 1: schedule exactness
// ---------------------------------------------------------------------
#[test]
fn criterion_01_schedule_exactness() {
    let s = build_quadratic_schedule(50, 1e-4, 0.5).unwrap();
    assert_eq!(s.beta(1), 1e-4);
    assert_eq!(s.beta(50), 0.5);
    for t in 1..=50 {
        assert!(s.beta(t) >= s.beta(1) && s.beta(t) <= s.beta(50));
        assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
        if t > 1 {
            assert!(s.beta(t) >= s.beta(t - 1));
            assert!(s.alpha(t) < s.alpha(t - 1));
            assert_eq!(s.alpha(t), s.alpha(t - 1) * (1.0 - s.beta(t)));
            let expected = (1.0 - s.alpha(t - 1)) / (1.0 - s.alpha(t)) * s.beta(t);
            assert!((s.beta_tilde(t) - expected).abs() <= 1e-18 + 1e-15 * expected);
        }
    }
    assert_eq!(s.beta_tilde(1), s.beta(1));
    println!("[acceptance] criterion 1 (schedule exactness): PASS — endpoints exact, invariants hold for all t");
}

// ---------------------------------------------------------------------
// criterion 2: forward-marginal law
// ---------------------------------------------------------------------
#[test]
fn criterion_02_forward_marginal_law() {
    let s = paper_schedule();
    let mut rng = derive_rng(2024, tag::SYNTH, 1);
    let n = 100_000usize;
    let x0 = ndarray::arr2(&[[1.0]]);
    for t in [1usize, 25, 50] {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let eps: f64 = rng.sample(StandardNormal);
            let xt = forward_diffuse(&x0, t, &ndarray::arr2(&[[eps]]), &s).unwrap()[[0, 0]];
            sum += xt;
            sum_sq += xt * xt;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let expected_mean = s.alpha(t).sqrt();
        let expected_var = 1.0 - s.alpha(t);
        let se_mean = (expected_var / n as f64).sqrt();
        let se_var = expected_var * (2.0 / n as f64).sqrt();
        assert!(
            (mean - expected_mean).abs() < 4.0 * se_mean.max(1e-12),
            "t={t}: mean {mean} vs {expected_mean}"
        );
        assert!(
            (var - expected_var).abs() < 4.0 * se_var.max(1e-12),
            "t={t}: var {var} vs {expected_var}"
        );
    }
    println!("[acceptance] criterion 2 (forward-marginal law): PASS — moments within 4 SE at t in {{1,25,50}}");
}

// ---------------------------------------------------------------------
// criterion 3: analytic-denoiser sampling oracle
// ---------------------------------------------------------------------
#[test]
fn criterion_03_analytic_denoiser_oracle() {
    let s = paper_schedule();
    let mut rng = derive_rng(2024, tag::SYNTH, 3);
    let n = 10_000usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let mut x: f64 = rng.sample(StandardNormal);
        for t in (1..=s.steps()).rev() {
            let eps_hat = (1.0 - s.alpha(t)).sqrt() * x;
            let z: f64 = rng.sample(StandardNormal);
            x = reverse_step(
                &ndarray::arr2(&[[x]]),
                t,
                &ndarray::arr2(&[[eps_hat]]),
                &ndarray::arr2(&[[z]]),
                &s,
            )
            .unwrap()[[0, 0]];
        }
        sum += x;
        sum_sq += x * x;
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;

    // moments of N(0,1) up to the posterior-variance parameterization's
    // known under-dispersion: the mean and the scale (std) are within the
    // stated tolerances, and the variance matches the exact linear-
    // Gaussian recursion for this sigma choice to Monte-Carlo precision
    let mut exact_var = 1.0;
    for t in (2..=s.steps()).rev() {
        exact_var = (1.0 - s.beta(t)) * exact_var + s.beta_tilde(t);
    }
    exact_var *= 1.0 - s.beta(1);

    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((var.sqrt() - 1.0).abs() < 0.1, "std {}", var.sqrt());
    let se_var = exact_var * (2.0 / n as f64).sqrt();
    assert!(
        (var - exact_var).abs() < 4.0 * se_var,
        "var {var} vs exact {exact_var}"
    );
    println!(
        "[acceptance] criterion 3 (analytic-denoiser oracle): PASS — mean {mean:.4}, std {:.4}, var matches exact recursion {exact_var:.4}",
        var.sqrt()
    );
}

// ---------------------------------------------------------------------
// criterion 4: gradient exactness
// ---------------------------------------------------------------------
#[test]
fn criterion_04_gradient_exactness() {
    let mut model = DenoiserModel::init(
        DenoiserConfig {
            residual_layers: 1,
            channels: 8,
            attention_heads: 2,
            diffusion_embed_dim: 128,
            time_embed_dim: 128,
            feature_embed_dim: 16,
            feedforward_dim: 8,
            n_features: 2,
            n_steps: 50,
        },
        404,
    )
    .unwrap();
    let mut rng = derive_rng(405, tag::INIT, 0);
    for v in model.params_mut() {
        *v = rng.sample::<f64, _>(StandardNormal) * 0.3;
    }

    let sched = paper_schedule();
    let sample = TimeSeriesSample::new(
        Array2::from_shape_fn((2, 3), |_| rng.sample(StandardNormal)),
        Array2::ones((2, 3)),
        Array1::from(vec![0.0, 1.0, 2.0]),
    )
    .unwrap();
    let cond = ndarray::arr2(&[[1, 0, 0], [0, 1, 0]]);
    let target = ndarray::arr2(&[[0, 1, 1], [1, 0, 1]]);
    let eps = draw_noise_grid(2, 3, &mut rng);
    let ex = build_train_example(&sample, &cond, &target, 13, eps, &sched).unwrap();
    let batch = vec![ex];
    let (_, grad) = model.loss_and_gradients(&batch).unwrap();

    let h = 1e-5;
    let mut worst_rel: f64 = 0.0;
    for i in 0..model.params().len() {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let lp = model.loss(&batch).unwrap();
        model.params_mut()[i] = orig - h;
        let lm = model.loss(&batch).unwrap();
        model.params_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let a = grad[i];
        let denom = a.abs().max(fd.abs());
        // 1e-7 absolute floor covers the finite-difference scheme's own
        // truncation error on near-zero coordinates
        assert!(
            (a - fd).abs() <= 1e-4 * denom + 1e-7,
            "param {i}: analytic {a} vs fd {fd}"
        );
        if denom > 1e-6 {
            worst_rel = worst_rel.max((a - fd).abs() / denom);
        }
    }
    println!(
        "[acceptance] criterion 4 (gradient exactness): PASS — {} parameters checked, worst relative error {worst_rel:.2e}",
        model.params().len()
    );
}

// ---------------------------------------------------------------------
// criterion 5: mask semantics
// ---------------------------------------------------------------------
#[test]
fn criterion_05_mask_semantics() {
    let sched = paper_schedule();
    // (a) denoiser output is exactly zero on the conditional mask
    let model = DenoiserModel::init(desk_model_config(1), 500).unwrap();
    let mut rng = derive_rng(501, tag::TRAIN, 0);
    for _ in 0..20 {
        let cond_mask = Array2::from_shape_fn((2, 7), |_| u8::from(rng.random::<f64>() < 0.5));
        let noisy = Array2::from_shape_fn((2, 7), |(i, j)| {
            if cond_mask[[i, j]] == 1 {
                0.0
            } else {
                rng.sample(StandardNormal)
            }
        });
        let cond_obs = Array2::from_shape_fn((2, 7), |(i, j)| {
            if cond_mask[[i, j]] == 1 {
                rng.sample(StandardNormal)
            } else {
                0.0
            }
        });
        let input = DenoiserInput::unpadded(
            noisy,
            cond_obs,
            cond_mask.clone(),
            Array1::from_iter((0..7).map(|j| j as f64)),
            rng.random_range(1..=50),
        )
        .unwrap();
        let out = model.forward(&input).unwrap();
        for ((i, j), &m) in cond_mask.indexed_iter() {
            if m == 1 {
                assert_eq!(out[[i, j]], 0.0, "nonzero output on conditional mask");
            }
        }
    }

    // (b) losses are invariant to values at missing, non-target positions
    let mask = ndarray::arr2(&[[1, 0, 1, 1], [0, 1, 1, 0]]);
    let ts = Array1::from(vec![0.0, 1.0, 2.0, 3.0]);
    let build = |missing_fill: f64| {
        let values = Array2::from_shape_fn((2, 4), |(i, j)| {
            if mask[[i, j]] == 1 {
                (i + j) as f64 * 0.25 - 0.5
            } else {
                missing_fill
            }
        });
        TimeSeriesSample::new(values, mask.clone(), ts.clone()).unwrap()
    };
    let sa = build(123.0);
    let sb = build(-999.0);
    let cond = ndarray::arr2(&[[1, 0, 0, 1], [0, 0, 1, 0]]);
    let target = ndarray::arr2(&[[0, 0, 1, 0], [0, 1, 0, 0]]);
    let mut rng2 = derive_rng(502, tag::TRAIN, 0);
    let eps = draw_noise_grid(2, 4, &mut rng2);
    // conditional objective
    let ex_a = build_train_example(&sa, &cond, &target, 9, eps.clone(), &sched).unwrap();
    let ex_b = build_train_example(&sb, &cond, &target, 9, eps.clone(), &sched).unwrap();
    let la = model.loss(&[ex_a]).unwrap();
    let lb = model.loss(&[ex_b]).unwrap();
    assert!(la.is_finite());
    assert_eq!(la.to_bits(), lb.to_bits(), "conditional loss reads a missing value");
    // unconditional objective: empty conditional mask, loss masked by M
    let zeros = Array2::zeros((2, 4));
    let ex_a = build_train_example(&sa, &zeros, &mask.clone(), 9, eps.clone(), &sched).unwrap();
    let ex_b = build_train_example(&sb, &zeros, &mask.clone(), 9, eps, &sched).unwrap();
    let la = model.loss(&[ex_a]).unwrap();
    let lb = model.loss(&[ex_b]).unwrap();
    assert!(la.is_finite());
    assert_eq!(la.to_bits(), lb.to_bits(), "unconditional loss reads a missing value");

    // (c) strategy outputs satisfy the split invariants over 1e4 samples
    let mut rng3 = derive_rng(503, tag::TRAIN, 0);
    let strategies = [
        Strategy::Random,
        Strategy::Historical,
        Strategy::Mix,
        Strategy::Interpolation,
    ];
    let mut checked = 0usize;
    while checked < 10_000 {
        let k = rng3.random_range(1..5usize);
        let l = rng3.random_range(1..9usize);
        let mask = Array2::from_shape_fn((k, l), |_| u8::from(rng3.random::<f64>() < 0.7));
        if count_ones(&mask) == 0 {
            continue;
        }
        let values = Array2::from_shape_fn((k, l), |(i, j)| {
            if mask[[i, j]] == 1 {
                (i * l + j) as f64
            } else {
                f64::NAN
            }
        });
        let sample = TimeSeriesSample::new(
            values,
            mask,
            Array1::from_iter((0..l).map(|j| j as f64)),
        )
        .unwrap();
        let src_mask = Array2::from_shape_fn((k, l), |_| u8::from(rng3.random::<f64>() < 0.5));
        let source = vec![TimeSeriesSample::new(
            Array2::from_shape_fn((k, l), |(i, j)| {
                if src_mask[[i, j]] == 1 {
                    0.0
                } else {
                    f64::NAN
                }
            }),
            src_mask,
            Array1::from_iter((0..l).map(|j| j as f64)),
        )
        .unwrap()];
        let strategy = &strategies[checked % strategies.len()];
        let split: MaskSplit = strategy.split(&sample, &source, &mut rng3).unwrap();
        split.check(&sample).unwrap();
        assert!(split.target_count() >= 1);
        checked += 1;
    }
    println!("[acceptance] criterion 5 (mask semantics): PASS — output masking exact, losses sentinel-blind, {checked} strategy splits valid");
}

// ---------------------------------------------------------------------
// criterion 6: variable-length / padding contract
// ---------------------------------------------------------------------
#[test]
fn criterion_06_padding_contract() {
    let model = DenoiserModel::init(desk_model_config(2), 600).unwrap();
    let mut rng = derive_rng(601, tag::TRAIN, 0);
    let mut worst: f64 = 0.0;
    for (l, l_padded) in [(4usize, 9usize), (5, 8), (7, 12)] {
        let cond_mask = Array2::from_shape_fn((2, l), |_| u8::from(rng.random::<f64>() < 0.4));
        let noisy = Array2::from_shape_fn((2, l), |(i, j)| {
            if cond_mask[[i, j]] == 1 {
                0.0
            } else {
                rng.sample(StandardNormal)
            }
        });
        let cond_obs = Array2::from_shape_fn((2, l), |(i, j)| {
            if cond_mask[[i, j]] == 1 {
                rng.sample(StandardNormal)
            } else {
                0.0
            }
        });
        let input = DenoiserInput::unpadded(
            noisy,
            cond_obs,
            cond_mask,
            Array1::from_iter((0..l).map(|j| j as f64)),
            rng.random_range(1..=50),
        )
        .unwrap();
        let out = model.forward(&input).unwrap();
        let out_padded = model.forward(&input.pad_to(l_padded).unwrap()).unwrap();
        for i in 0..2 {
            for j in 0..l {
                let diff = (out[[i, j]] - out_padded[[i, j]]).abs();
                worst = worst.max(diff);
                assert!(diff < 1e-10, "({i},{j}) differs by {diff}");
            }
        }
    }
    println!("[acceptance] criterion 6 (padding contract): PASS — worst real-position deviation {worst:.2e}");
}

// ---------------------------------------------------------------------
// criterion 7: CRPS oracle
// ---------------------------------------------------------------------
#[test]
fn criterion_07_crps_oracle() {
    // two-point fixture with exact value 0.25
    let mut draws = vec![0.0; 50];
    draws.extend(vec![1.0; 50]);
    let exact = crps_exact_empirical(&draws, 0.5).unwrap();
    assert!((exact - 0.25).abs() < 1e-12);
    let disc = crps_discretized(&draws, 0.5).unwrap();
    assert!((disc - exact).abs() < 0.02, "disc {disc} vs exact {exact}");

    // perfect forecasts score exactly zero
    assert_eq!(crps_discretized(&vec![1.7; 31], 1.7).unwrap(), 0.0);

    // randomized fixtures at the 100-draw evaluation protocol:
    // |discretized - exact| <= 0.05 * spread
    let mut rng = derive_rng(700, tag::SYNTH, 0);
    let mut worst_frac: f64 = 0.0;
    for _ in 0..1000 {
        let n = 100usize;
        let scale: f64 = 0.2 + rng.random::<f64>() * 4.0;
        let shift: f64 = rng.sample::<f64, _>(StandardNormal) * 2.0;
        let draws: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale + shift)
            .collect();
        let z: f64 = rng.sample::<f64, _>(StandardNormal) * scale + shift;
        let d = crps_discretized(&draws, z).unwrap();
        let e = crps_exact_empirical(&draws, z).unwrap();
        let spread = draws.iter().cloned().fold(f64::MIN, f64::max)
            - draws.iter().cloned().fold(f64::MAX, f64::min);
        assert!(
            (d - e).abs() <= 0.05 * spread + 1e-12,
            "disc {d}, exact {e}, spread {spread}"
        );
        if spread > 0.0 {
            worst_frac = worst_frac.max((d - e).abs() / spread);
        }
    }
    println!("[acceptance] criterion 7 (CRPS oracle): PASS — fixture |disc-exact| < 0.02, worst randomized error {worst_frac:.4} of spread");
}

// ---------------------------------------------------------------------
// criterion 8: conditional-law recovery
// ---------------------------------------------------------------------
#[test]
fn criterion_08_conditional_law_recovery() {
    let run = &SEED_RUNS[0];
    let target_std = (1.0 - RHO * RHO).sqrt();
    let mut mean_err = 0.0;
    let mut std_err = 0.0;
    let mut n = 0usize;
    for (truth, cond_ens, _) in &run.cases {
        for ((i, j), &m) in cond_ens.target_mask.indexed_iter() {
            if m != 1 || truth.mask()[[i, j]] != 1 {
                continue;
            }
            debug_assert_eq!(i, 1);
            let observed_partner = truth.values()[[0, j]];
            let draws = cond_ens.values_at(i, j);
            let nd = draws.len() as f64;
            let mean = draws.iter().sum::<f64>() / nd;
            let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / nd;
            mean_err += (mean - RHO * observed_partner).abs();
            std_err += (var.sqrt() - target_std).abs();
            n += 1;
        }
    }
    let mean_err = mean_err / n as f64;
    let std_err = std_err / n as f64;
    assert!(n >= 500, "only {n} evaluation cases");
    assert!(mean_err <= 0.1, "mean deviation {mean_err}");
    assert!(std_err <= 0.15, "std deviation {std_err}");
    println!(
        "[acceptance] criterion 8 (conditional-law recovery): PASS — over {n} cases, avg |mean - rho*x| = {mean_err:.4} (<= 0.1), avg |std - {target_std:.2}| = {std_err:.4} (<= 0.15)"
    );
}

// ---------------------------------------------------------------------
// criterion 9: conditional beats unconditional
// ---------------------------------------------------------------------
#[test]
fn criterion_09_conditional_beats_unconditional() {
    let mut improvements = Vec::new();
    for (i, run) in SEED_RUNS.iter().enumerate() {
        let cond = run_crps(run, true, UNCOND_DRAWS);
        let uncond = run_crps(run, false, UNCOND_DRAWS);
        assert!(
            cond < uncond,
            "seed run {i}: conditional {cond} not below unconditional {uncond}"
        );
        improvements.push((uncond - cond) / uncond);
    }
    let mean_improvement = improvements.iter().sum::<f64>() / improvements.len() as f64;
    assert!(
        mean_improvement >= 0.10,
        "mean relative improvement {mean_improvement:.4} below 10% ({improvements:?})"
    );
    println!(
        "[acceptance] criterion 9 (conditional beats unconditional): PASS — relative CRPS improvement {:.1}% (per seed {:?})",
        100.0 * mean_improvement,
        improvements.iter().map(|v| (v * 1000.0).round() / 10.0).collect::<Vec<_>>()
    );
}

// ---------------------------------------------------------------------
// criterion 10: sample-count monotonicity
// ---------------------------------------------------------------------
#[test]
fn criterion_10_sample_count_monotonicity() {
    let counts = [5usize, 10, 50, 100];
    let mut per_seed: Vec<[f64; 4]> = Vec::new();
    for run in SEED_RUNS.iter() {
        let mut row = [0.0; 4];
        for (c, &n) in counts.iter().enumerate() {
            row[c] = run_crps(run, true, n);
        }
        per_seed.push(row);
    }
    let mean = |c: usize| per_seed.iter().map(|r| r[c]).sum::<f64>() / per_seed.len() as f64;
    let sd_diff = |a: usize, b: usize| {
        let diffs: Vec<f64> = per_seed.iter().map(|r| r[a] - r[b]).collect();
        let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
        (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / diffs.len() as f64).sqrt()
    };
    let (c5, c10, c50, c100) = (mean(0), mean(1), mean(2), mean(3));
    // ordering holds up to seed noise (one standard deviation of the
    // per-seed differences)
    assert!(
        c100 <= c10 + sd_diff(1, 3),
        "CRPS at n=100 ({c100}) above n=10 ({c10})"
    );
    assert!(
        c10 <= c5 + sd_diff(0, 1),
        "CRPS at n=10 ({c10}) above n=5 ({c5})"
    );
    let tail_improvement = (c50 - c100) / c50;
    assert!(
        tail_improvement < 0.05,
        "n=50 -> n=100 improvement {tail_improvement:.4} not marginal"
    );
    println!(
        "[acceptance] criterion 10 (sample-count monotonicity): PASS — CRPS n=5 {c5:.4} >= n=10 {c10:.4} >= n=100 {c100:.4}; 50->100 improvement {:.2}%",
        100.0 * tail_improvement
    );
}

// ---------------------------------------------------------------------
// criterion 11: strategy study shape
// ---------------------------------------------------------------------

struct StrategyStudy {
    /// per seed: (random, mix) normalized CRPS on block-law holdouts
    matched: Vec<(f64, f64)>,
    /// per seed: (random, historical) normalized CRPS on entrywise holdouts
    mismatched: Vec<(f64, f64)>,
}

const STUDY_LEN: usize = 16;
const STUDY_EVAL_SERIES: usize = 24;
const STUDY_DRAWS: usize = 40;

fn study_eval_crps(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    eval: &[(TimeSeriesSample, TimeSeriesSample)],
    seed: u64,
) -> f64 {
    let mut cases = Vec::new();
    for (idx, (truth, reduced)) in eval.iter().enumerate() {
        let target = mask_complement(reduced.mask());
        if count_ones(&target) == 0 {
            continue;
        }
        let ens = generate_imputation_ensemble(
            model,
            sched,
            reduced,
            &target,
            SamplerKind::Conditional,
            STUDY_DRAWS,
            seed.wrapping_mul(131).wrapping_add(idx as u64),
        )
        .unwrap();
        for ((i, j), &m) in target.indexed_iter() {
            if m == 1 && truth.mask()[[i, j]] == 1 {
                cases.push((ens.values_at(i, j), truth.values()[[i, j]]));
            }
        }
    }
    crps_normalized_average(&cases).unwrap()
}

fn build_strategy_study() -> StrategyStudy {
    let sched = paper_schedule();
    let mut matched = Vec::new();
    let mut mismatched = Vec::new();
    for &seed in &[5u64, 6, 7] {
        // training data with block-structured missingness
        let data = generate_synthetic(&SynthSpec {
            kind: SynthKind::Ar1 {
                phi: 0.85,
                sigma: (1.0 - 0.85f64 * 0.85).sqrt(),
            },
            n_features: 2,
            length: STUDY_LEN,
            n_samples: 180,
            missing_rate: 0.3,
            pattern: MissingPattern::Blocks,
            seed,
        })
        .unwrap();
        let splits = split_dataset(&data, &[0.85, 0.15], seed).unwrap();
        let stats = splits[0].compute_stats().unwrap();
        let train = splits[0].normalized(&stats).unwrap();
        let val = splits[1].normalized(&stats).unwrap();

        let train_strategy = |strategy: Strategy| {
            train_one(
                seed,
                &TrainMode::Conditional(strategy),
                &train,
                &val,
                100,
                1,
            )
            .model
        };
        let random_model = train_strategy(Strategy::Random);
        let mix_model = train_strategy(Strategy::Mix);
        let hist_model = train_strategy(Strategy::Historical);

        // complete evaluation series from the same law
        let eval_data = generate_synthetic(&SynthSpec {
            kind: SynthKind::Ar1 {
                phi: 0.85,
                sigma: (1.0 - 0.85f64 * 0.85).sqrt(),
            },
            n_features: 2,
            length: STUDY_LEN,
            n_samples: STUDY_EVAL_SERIES,
            missing_rate: 0.0,
            pattern: MissingPattern::Random,
            seed: seed + 4000,
        })
        .unwrap()
        .normalized(&stats)
        .unwrap();

        // matched: holdout patterns drawn from the same block law as the
        // training missingness
        let matched_eval: Vec<(TimeSeriesSample, TimeSeriesSample)> = eval_data
            .samples
            .iter()
            .enumerate()
            .map(|(i, truth)| {
                let mut rng = derive_rng(seed + 500, tag::HOLDOUT, i as u64);
                let missing = block_missing_mask(2, STUDY_LEN, 0.3, &mut rng);
                let reduced_mask = masking::mask_minus(truth.mask(), &missing);
                let reduced = TimeSeriesSample::new(
                    truth.values().clone(),
                    reduced_mask,
                    truth.timestamps().clone(),
                )
                .unwrap();
                (truth.clone(), reduced)
            })
            .collect();
        // mismatched: entrywise random holdout
        let mismatched_eval: Vec<(TimeSeriesSample, TimeSeriesSample)> = eval_data
            .samples
            .iter()
            .enumerate()
            .map(|(i, truth)| {
                let mut rng = derive_rng(seed + 600, tag::HOLDOUT, i as u64);
                let (reduced, _) =
                    holdout_ground_truth(truth, 0.3, HoldoutMode::Entrywise, &mut rng).unwrap();
                (truth.clone(), reduced)
            })
            .collect();

        matched.push((
            study_eval_crps(&random_model, &sched, &matched_eval, seed + 21),
            study_eval_crps(&mix_model, &sched, &matched_eval, seed + 22),
        ));
        mismatched.push((
            study_eval_crps(&random_model, &sched, &mismatched_eval, seed + 23),
            study_eval_crps(&hist_model, &sched, &mismatched_eval, seed + 24),
        ));
    }
    StrategyStudy { matched, mismatched }
}

static STRATEGY_STUDY: LazyLock<StrategyStudy> = LazyLock::new(build_strategy_study);

#[test]
fn criterion_11_strategy_study_shape() {
    let study = &*STRATEGY_STUDY;
    let n = study.matched.len() as f64;
    let rand_matched = study.matched.iter().map(|p| p.0).sum::<f64>() / n;
    let mix_matched = study.matched.iter().map(|p| p.1).sum::<f64>() / n;
    let rand_mismatched = study.mismatched.iter().map(|p| p.0).sum::<f64>() / n;
    let hist_mismatched = study.mismatched.iter().map(|p| p.1).sum::<f64>() / n;

    // matched block law: mix does not lose to random by more than 5%
    assert!(
        mix_matched <= rand_matched * 1.05,
        "matched: mix {mix_matched:.4} vs random {rand_matched:.4}"
    );
    // mismatched patterns: historical does not beat random by more than 5%
    assert!(
        hist_mismatched >= rand_mismatched * 0.95,
        "mismatched: historical {hist_mismatched:.4} vs random {rand_mismatched:.4}"
    );
    println!(
        "[acceptance] criterion 11 (strategy study shape): PASS — matched mix {mix_matched:.4} vs random {rand_matched:.4}; mismatched historical {hist_mismatched:.4} vs random {rand_mismatched:.4}"
    );
}

// ---------------------------------------------------------------------
// criterion 12: end-to-end determinism
// ---------------------------------------------------------------------
#[test]
fn criterion_12_end_to_end_determinism() {
    use std::process::Command;
    let bin = env!("CARGO_BIN_EXE_tsdiff");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let synth_dir = root.join("synth");
    let status = Command::new(bin)
        .args([
            "--out-dir",
            synth_dir.to_str().unwrap(),
            "--seed",
            "9",
            "synth",
            "--kind",
            "bivariate-gaussian",
            "--rho",
            "0.8",
            "--length",
            "8",
            "--n-samples",
            "40",
            "--missing-rate",
            "0.1",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let dataset = synth_dir.join("dataset.ndjson");

    let run_pipeline = |label: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let train_dir = root.join(format!("train_{label}"));
        let cfg_path = root.join(format!("cfg_{label}.json"));
        std::fs::write(
            &cfg_path,
            serde_json::json!({
                "seed": 77,
                "dataset": dataset,
                "out_dir": train_dir,
                "model": {"residual_layers": 1, "channels": 8, "attention_heads": 2, "feedforward_dim": 8},
                "train": {"epochs": 3, "batch_size": 8, "strategy": "random"},
                "split": {"ratios": [0.7, 0.1, 0.2]}
            })
            .to_string(),
        )
        .unwrap();
        let status = Command::new(bin)
            .args(["--config", cfg_path.to_str().unwrap(), "train"])
            .status()
            .unwrap();
        assert!(status.success());

        let impute_dir = root.join(format!("impute_{label}"));
        let status = Command::new(bin)
            .args([
                "--out-dir",
                impute_dir.to_str().unwrap(),
                "--seed",
                "123",
                "impute",
                "--checkpoint",
                train_dir.join("checkpoint.json").to_str().unwrap(),
                "--dataset",
                dataset.to_str().unwrap(),
                "--n-samples",
                "5",
                "--target",
                "holdout:0.5",
            ])
            .status()
            .unwrap();
        assert!(status.success());

        let eval_dir = root.join(format!("eval_{label}"));
        let status = Command::new(bin)
            .args([
                "--out-dir",
                eval_dir.to_str().unwrap(),
                "evaluate",
                "--imputations",
                impute_dir.join("imputations.ndjson").to_str().unwrap(),
                "--truth-dataset",
                dataset.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());

        (
            std::fs::read(train_dir.join("history.csv")).unwrap(),
            std::fs::read(impute_dir.join("imputations.ndjson")).unwrap(),
            std::fs::read(eval_dir.join("report.json")).unwrap(),
        )
    };

    let (hist_a, imp_a, rep_a) = run_pipeline("a");
    let (hist_b, imp_b, rep_b) = run_pipeline("b");
    assert_eq!(hist_a, hist_b, "history CSVs differ across runs");
    assert_eq!(imp_a, imp_b, "imputation files differ across runs");
    assert_eq!(rep_a, rep_b, "score reports differ across runs");
    println!(
        "[acceptance] criterion 12 (end-to-end determinism): PASS — history, imputations, and report byte-identical across two runs"
    );
}
