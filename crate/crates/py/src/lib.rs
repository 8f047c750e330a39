//! Python bindings: schedules, samples, datasets, model training and
//! imputation, and the scoring functions, over plain lists so no Python
//! array dependency is required.

use ndarray::{Array1, Array2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use tsdiff::data;
use tsdiff::denoiser::{self, DenoiserConfig, DenoiserModel};
use tsdiff::masking::{self, TimeSeriesSample};
use tsdiff::metrics;
use tsdiff::rng::{derive_rng, tag};
use tsdiff::sampling::{self, SamplerKind};
use tsdiff::schedule::{self, NoiseSchedule, ScheduleParams};
use tsdiff::training::{self, Checkpoint, TrainConfig, TrainMode};

fn py_err(e: tsdiff::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn grid_to_vecs(a: &Array2<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[[i, j]]).collect())
        .collect()
}

fn vecs_to_grid(v: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let k = v.len();
    if k == 0 {
        return Err(PyValueError::new_err("empty grid"));
    }
    let l = v[0].len();
    if v.iter().any(|row| row.len() != l) {
        return Err(PyValueError::new_err("ragged grid"));
    }
    Ok(Array2::from_shape_fn((k, l), |(i, j)| v[i][j]))
}

fn vecs_to_mask(v: &[Vec<u8>]) -> PyResult<Array2<u8>> {
    let k = v.len();
    if k == 0 {
        return Err(PyValueError::new_err("empty mask"));
    }
    let l = v[0].len();
    if v.iter().any(|row| row.len() != l) {
        return Err(PyValueError::new_err("ragged mask"));
    }
    Ok(Array2::from_shape_fn((k, l), |(i, j)| v[i][j]))
}

/// Diffusion noise schedule (quadratic construction).
#[pyclass(name = "Schedule", from_py_object)]
#[derive(Clone)]
struct PySchedule {
    inner: NoiseSchedule,
    params: ScheduleParams,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps=50, beta1=1e-4, beta_t=0.5))]
    fn new(steps: usize, beta1: f64, beta_t: f64) -> PyResult<Self> {
        let params = ScheduleParams {
            steps,
            beta1,
            beta_t,
        };
        Ok(PySchedule {
            inner: params.build().map_err(py_err)?,
            params,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, t: usize) -> f64 {
        self.inner.beta(t)
    }

    fn alpha(&self, t: usize) -> f64 {
        self.inner.alpha(t)
    }

    fn alpha_hat(&self, t: usize) -> f64 {
        self.inner.alpha_hat(t)
    }

    fn beta_tilde(&self, t: usize) -> f64 {
        self.inner.beta_tilde(t)
    }

    fn sigma(&self, t: usize) -> PyResult<f64> {
        schedule::ddpm_sigma(t, &self.inner).map_err(py_err)
    }

    /// `sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps`, elementwise.
    fn forward_diffuse(
        &self,
        x0: Vec<Vec<f64>>,
        t: usize,
        eps: Vec<Vec<f64>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let x0 = vecs_to_grid(&x0)?;
        let eps = vecs_to_grid(&eps)?;
        let out = schedule::forward_diffuse(&x0, t, &eps, &self.inner).map_err(py_err)?;
        Ok(grid_to_vecs(&out))
    }

    /// One ancestral denoising step given a noise estimate.
    fn reverse_step(
        &self,
        x_t: Vec<Vec<f64>>,
        t: usize,
        eps_hat: Vec<Vec<f64>>,
        z: Vec<Vec<f64>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let x_t = vecs_to_grid(&x_t)?;
        let eps_hat = vecs_to_grid(&eps_hat)?;
        let z = vecs_to_grid(&z)?;
        let out = schedule::reverse_step(&x_t, t, &eps_hat, &z, &self.inner).map_err(py_err)?;
        Ok(grid_to_vecs(&out))
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

/// One multivariate series with an observation mask. Missing entries are
/// passed as `None`.
#[pyclass(name = "Sample", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: TimeSeriesSample,
}

#[pymethods]
impl PySample {
    #[new]
    fn new(values: Vec<Vec<Option<f64>>>, timestamps: Vec<f64>) -> PyResult<Self> {
        let k = values.len();
        if k == 0 {
            return Err(PyValueError::new_err("empty sample"));
        }
        let l = values[0].len();
        let mut grid = Array2::zeros((k, l));
        let mut mask = Array2::zeros((k, l));
        for (i, row) in values.iter().enumerate() {
            if row.len() != l {
                return Err(PyValueError::new_err("ragged values"));
            }
            for (j, v) in row.iter().enumerate() {
                match v {
                    Some(x) => {
                        grid[[i, j]] = *x;
                        mask[[i, j]] = 1;
                    }
                    None => grid[[i, j]] = f64::NAN,
                }
            }
        }
        let inner = TimeSeriesSample::new(grid, mask, Array1::from(timestamps)).map_err(py_err)?;
        Ok(PySample { inner })
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn length(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn mask(&self) -> Vec<Vec<u8>> {
        let m = self.inner.mask();
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[[i, j]]).collect())
            .collect()
    }

    /// Values with `None` at unobserved positions.
    #[getter]
    fn values(&self) -> Vec<Vec<Option<f64>>> {
        let v = self.inner.values();
        let m = self.inner.mask();
        (0..v.nrows())
            .map(|i| {
                (0..v.ncols())
                    .map(|j| {
                        if m[[i, j]] == 1 {
                            Some(v[[i, j]])
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[getter]
    fn timestamps(&self) -> Vec<f64> {
        self.inner.timestamps().to_vec()
    }

    fn observed_count(&self) -> usize {
        self.inner.observed_count()
    }
}

/// A list of samples sharing a feature set.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(samples: Vec<PySample>, feature_names: Vec<String>) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::Dataset {
                samples: samples.into_iter().map(|s| s.inner).collect(),
                feature_names,
            },
        })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_dataset(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        data::save_dataset(&path, &self.inner).map_err(py_err)
    }

    /// Synthetic generator. `kind` is one of `bivariate_gaussian`, `ar1`,
    /// `sinusoid_mixture`; `pattern` is `random` or `blocks`.
    #[staticmethod]
    #[pyo3(signature = (kind, n_features=2, length=10, n_samples=100, missing_rate=0.0,
                        pattern="random", seed=0, rho=0.8, phi=0.8, sigma=0.6))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        kind: &str,
        n_features: usize,
        length: usize,
        n_samples: usize,
        missing_rate: f64,
        pattern: &str,
        seed: u64,
        rho: f64,
        phi: f64,
        sigma: f64,
    ) -> PyResult<Self> {
        let kind = match kind {
            "bivariate_gaussian" => data::SynthKind::BivariateGaussian { rho },
            "ar1" => data::SynthKind::Ar1 { phi, sigma },
            "sinusoid_mixture" => data::SynthKind::SinusoidMixture,
            other => return Err(PyValueError::new_err(format!("unknown kind '{other}'"))),
        };
        let pattern = match pattern {
            "random" => data::MissingPattern::Random,
            "blocks" => data::MissingPattern::Blocks,
            other => return Err(PyValueError::new_err(format!("unknown pattern '{other}'"))),
        };
        let spec = data::SynthSpec {
            kind,
            n_features,
            length,
            n_samples,
            missing_rate,
            pattern,
            seed,
        };
        Ok(PyDataset {
            inner: data::generate_synthetic(&spec).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names.clone()
    }

    fn sample(&self, idx: usize) -> PyResult<PySample> {
        self.inner
            .samples
            .get(idx)
            .map(|s| PySample { inner: s.clone() })
            .ok_or_else(|| PyValueError::new_err(format!("sample index {idx} out of range")))
    }

    fn split(&self, ratios: Vec<f64>, seed: u64) -> PyResult<Vec<PyDataset>> {
        Ok(data::split_dataset(&self.inner, &ratios, seed)
            .map_err(py_err)?
            .into_iter()
            .map(|d| PyDataset { inner: d })
            .collect())
    }

    /// Per-feature (mean, std) over observed entries.
    fn stats(&self) -> PyResult<Vec<(f64, f64)>> {
        Ok(self
            .inner
            .compute_stats()
            .map_err(py_err)?
            .per_feature
            .iter()
            .map(|f| (f.mean, f.std))
            .collect())
    }
}

/// The conditional denoiser plus its diffusion schedule.
#[pyclass(name = "Model")]
struct PyModel {
    model: DenoiserModel,
    schedule: NoiseSchedule,
    schedule_params: ScheduleParams,
    unconditional: bool,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (n_features, residual_layers=2, channels=32, attention_heads=4,
                        feedforward_dim=64, schedule=None, seed=0))]
    fn new(
        n_features: usize,
        residual_layers: usize,
        channels: usize,
        attention_heads: usize,
        feedforward_dim: usize,
        schedule: Option<PySchedule>,
        seed: u64,
    ) -> PyResult<Self> {
        let schedule = match schedule {
            Some(s) => s,
            None => PySchedule::new(50, 1e-4, 0.5)?,
        };
        let config = DenoiserConfig {
            residual_layers,
            channels,
            attention_heads,
            diffusion_embed_dim: 128,
            time_embed_dim: 128,
            feature_embed_dim: 16,
            feedforward_dim,
            n_features,
            n_steps: schedule.params.steps,
        };
        Ok(PyModel {
            model: DenoiserModel::init(config, seed).map_err(py_err)?,
            schedule: schedule.inner,
            schedule_params: schedule.params,
            unconditional: false,
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.params().len()
    }

    #[getter]
    fn unconditional(&self) -> bool {
        self.unconditional
    }

    /// Self-supervised training; returns per-epoch
    /// `(train_loss, val_loss, lr)` tuples and keeps the best-validation
    /// parameters.
    #[pyo3(signature = (train, val, epochs=50, batch_size=16, lr=1e-3, seed=0,
                        strategy="random", unconditional=false))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        train: &PyDataset,
        val: &PyDataset,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
        strategy: &str,
        unconditional: bool,
    ) -> PyResult<Vec<(f64, f64, f64)>> {
        let strategy = match strategy {
            "random" => masking::Strategy::Random,
            "historical" => masking::Strategy::Historical,
            "mix" => masking::Strategy::Mix,
            "interpolation" => masking::Strategy::Interpolation,
            other => return Err(PyValueError::new_err(format!("unknown strategy '{other}'"))),
        };
        let mode = if unconditional {
            TrainMode::Unconditional
        } else {
            TrainMode::Conditional(strategy)
        };
        let mut cfg = TrainConfig::paper_default(seed);
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.lr = lr;
        let outcome = training::run_training(
            self.model.clone(),
            &self.schedule,
            &train.inner,
            &val.inner,
            &cfg,
            &mode,
        )
        .map_err(py_err)?;
        self.model = outcome.model;
        self.unconditional = unconditional;
        Ok(outcome
            .history
            .iter()
            .map(|h| (h.train_loss, h.val_loss, h.lr))
            .collect())
    }

    /// Predicted noise for an explicit denoiser input.
    #[pyo3(signature = (noisy_target, cond_obs, cond_mask, timestamps, t))]
    fn predict_noise(
        &self,
        noisy_target: Vec<Vec<f64>>,
        cond_obs: Vec<Vec<f64>>,
        cond_mask: Vec<Vec<u8>>,
        timestamps: Vec<f64>,
        t: usize,
    ) -> PyResult<Vec<Vec<f64>>> {
        let input = denoiser::DenoiserInput::unpadded(
            vecs_to_grid(&noisy_target)?,
            vecs_to_grid(&cond_obs)?,
            vecs_to_mask(&cond_mask)?,
            Array1::from(timestamps),
            t,
        )
        .map_err(py_err)?;
        Ok(grid_to_vecs(&self.model.forward(&input).map_err(py_err)?))
    }

    /// Generate an imputation ensemble over `target_mask`. Returns
    /// `(draws, median)` where draws is a list of full `K x L` grids
    /// (zero off-target).
    #[pyo3(signature = (sample, target_mask, n_draws=100, seed=0))]
    fn impute(
        &self,
        sample: &PySample,
        target_mask: Vec<Vec<u8>>,
        n_draws: usize,
        seed: u64,
    ) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
        let target = vecs_to_mask(&target_mask)?;
        let kind = if self.unconditional {
            SamplerKind::Unconditional
        } else {
            SamplerKind::Conditional
        };
        let ens = sampling::generate_imputation_ensemble(
            &self.model,
            &self.schedule,
            &sample.inner,
            &target,
            kind,
            n_draws,
            seed,
        )
        .map_err(py_err)?;
        let draws = ens.draws.iter().map(grid_to_vecs).collect();
        Ok((draws, grid_to_vecs(&ens.median())))
    }

    /// Write a checkpoint (identity normalization, features `f0..`).
    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        let k = self.model.config().n_features;
        let mode = if self.unconditional {
            TrainMode::Unconditional
        } else {
            TrainMode::Conditional(masking::Strategy::Random)
        };
        Checkpoint::new(
            &self.model,
            &mode,
            self.schedule_params,
            data::Normalization::identity(k),
            (0..k).map(|i| format!("f{i}")).collect(),
        )
        .save(&path)
        .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyModel {
            model: ck.build_model().map_err(py_err)?,
            schedule: ck.build_schedule().map_err(py_err)?,
            schedule_params: ck.schedule,
            unconditional: ck.mode == "unconditional",
        })
    }
}

/// Random-strategy split of a sample's observed entries; returns
/// `(cond_mask, target_mask)`.
#[pyfunction]
fn random_split(sample: &PySample, seed: u64) -> PyResult<(Vec<Vec<u8>>, Vec<Vec<u8>>)> {
    let mut rng = derive_rng(seed, tag::TRAIN, 0);
    let split = masking::random_split(&sample.inner, &mut rng).map_err(py_err)?;
    let to_vec = |m: &Array2<u8>| -> Vec<Vec<u8>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[[i, j]]).collect())
            .collect()
    };
    Ok((to_vec(&split.cond_mask), to_vec(&split.target_mask)))
}

#[pyfunction]
fn diffusion_step_embedding(t: usize) -> Vec<f64> {
    denoiser::diffusion_step_embedding(t, 128).to_vec()
}

#[pyfunction]
fn time_embedding(s: f64) -> Vec<f64> {
    denoiser::time_embedding(s, 128).to_vec()
}

#[pyfunction]
fn quantile_loss(alpha: f64, q: f64, z: f64) -> f64 {
    metrics::quantile_loss(alpha, q, z)
}

#[pyfunction]
fn crps_discretized(draws: Vec<f64>, z: f64) -> PyResult<f64> {
    metrics::crps_discretized(&draws, z).map_err(py_err)
}

#[pyfunction]
fn crps_exact_empirical(draws: Vec<f64>, z: f64) -> PyResult<f64> {
    metrics::crps_exact_empirical(&draws, z).map_err(py_err)
}

#[pyfunction]
fn crps_normalized_average(cases: Vec<(Vec<f64>, f64)>) -> PyResult<f64> {
    metrics::crps_normalized_average(&cases).map_err(py_err)
}

#[pyfunction]
fn mae(estimates: Vec<f64>, truths: Vec<f64>) -> PyResult<f64> {
    metrics::mae(&estimates, &truths).map_err(py_err)
}

#[pyfunction]
fn rmse(estimates: Vec<f64>, truths: Vec<f64>) -> PyResult<f64> {
    metrics::rmse(&estimates, &truths).map_err(py_err)
}

#[pymodule]
fn tsdiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(random_split, m)?)?;
    m.add_function(wrap_pyfunction!(diffusion_step_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(time_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(quantile_loss, m)?)?;
    m.add_function(wrap_pyfunction!(crps_discretized, m)?)?;
    m.add_function(wrap_pyfunction!(crps_exact_empirical, m)?)?;
    m.add_function(wrap_pyfunction!(crps_normalized_average, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    Ok(())
}
