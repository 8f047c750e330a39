//! The conditional denoising network: given a noisy target grid, clean
//! conditional observations, and side information, predict the noise that
//! was added at diffusion step `t`.
//!
//! The architecture is a stack of gated residual blocks. Each block injects
//! a learned projection of the diffusion-step embedding, runs one
//! transformer encoder layer over the time axis (per feature) and one over
//! the feature axis (per time step), mixes in side information (timestamp
//! embedding, feature embedding, and the conditional mask) through a 1x1
//! projection, applies a sigmoid/tanh gate on 2C channels, and emits
//! residual and skip branches. Skip outputs are summed, projected to one
//! channel, and masked so conditional positions output exactly zero.
//!
//! Parameters live in one flat vector with a named layout; the forward pass
//! is recorded on an autodiff tape, so losses differentiate exactly with
//! respect to every parameter.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, ArrayD, Ix2, IxDyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::masking::count_ones;
use crate::rng::{derive_rng, tag};

/// Architecture hyperparameters. The parameter count is a pure function of
/// this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub residual_layers: usize,
    pub channels: usize,
    pub attention_heads: usize,
    #[serde(default = "default_diffusion_embed_dim")]
    pub diffusion_embed_dim: usize,
    #[serde(default = "default_time_embed_dim")]
    pub time_embed_dim: usize,
    #[serde(default = "default_feature_embed_dim")]
    pub feature_embed_dim: usize,
    #[serde(default = "default_feedforward_dim")]
    pub feedforward_dim: usize,
    /// Size of the feature-embedding table; samples may use a prefix.
    pub n_features: usize,
    /// Diffusion step count the model is trained for.
    pub n_steps: usize,
}

fn default_diffusion_embed_dim() -> usize {
    128
}
fn default_time_embed_dim() -> usize {
    128
}
fn default_feature_embed_dim() -> usize {
    16
}
fn default_feedforward_dim() -> usize {
    64
}

impl DenoiserConfig {
    /// The hyperparameters used for the full-scale experiments: 4 residual
    /// layers, 64 channels, 8 heads, T = 50.
    pub fn paper(n_features: usize) -> Self {
        DenoiserConfig {
            residual_layers: 4,
            channels: 64,
            attention_heads: 8,
            diffusion_embed_dim: 128,
            time_embed_dim: 128,
            feature_embed_dim: 16,
            feedforward_dim: 64,
            n_features,
            n_steps: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.attention_heads == 0
            || self.residual_layers == 0
            || self.feedforward_dim == 0
            || self.feature_embed_dim == 0
            || self.n_features == 0
            || self.n_steps < 2
        {
            return Err(Error::Config("denoiser config has a zero dimension".into()));
        }
        if self.channels % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by attention heads {}",
                self.channels, self.attention_heads
            )));
        }
        if self.diffusion_embed_dim % 2 != 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("embedding dimensions must be even".into()));
        }
        Ok(())
    }

    pub fn side_info_dim(&self) -> usize {
        self.time_embed_dim + self.feature_embed_dim + 1
    }
}

/// Sinusoidal embedding of the diffusion step index:
/// `[sin(10^(j*4/(d/2-1)) t)]_j ++ [cos(...)]_j`. With the default 128
/// dimensions the frequency exponent is `j*4/63`.
pub fn diffusion_step_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    let denom = (half - 1) as f64;
    for j in 0..half {
        let freq = 10f64.powf(j as f64 * 4.0 / denom);
        let arg = freq * t as f64;
        out[j] = arg.sin();
        out[half + j] = arg.cos();
    }
    out
}

/// Sinusoidal embedding of a timestamp:
/// `[sin(s / tau^(j/(d/2)))]_j ++ [cos(...)]_j` with `tau = 10000`.
pub fn time_embedding(s: f64, dim: usize) -> Array1<f64> {
    const TAU_BASE: f64 = 10000.0;
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for j in 0..half {
        let arg = s / TAU_BASE.powf(j as f64 / half as f64);
        out[j] = arg.sin();
        out[half + j] = arg.cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum InitKind {
    /// uniform in +-1/sqrt(fan_in), fan_in = first shape dim
    WeightUniform,
    Zeros,
    Ones,
    /// standard normal entries
    Embedding,
}

/// One named parameter block in the flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    init: InitKind,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn build_layout(config: &DenoiserConfig) -> Vec<ParamSpec> {
    let c = config.channels;
    let d = config.diffusion_embed_dim;
    let w = config.feedforward_dim;
    let s = config.side_info_dim();
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut offset = 0usize;
    let mut push = |specs: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: InitKind| {
        let len: usize = shape.iter().product();
        specs.push(ParamSpec {
            name,
            shape,
            offset,
            init,
        });
        offset += len;
    };

    push(
        &mut specs,
        "input_proj.weight".into(),
        vec![2, c],
        InitKind::WeightUniform,
    );
    push(&mut specs, "input_proj.bias".into(), vec![c], InitKind::Zeros);
    push(
        &mut specs,
        "feature_embedding".into(),
        vec![config.n_features, config.feature_embed_dim],
        InitKind::Embedding,
    );
    for b in 0..config.residual_layers {
        let p = format!("block{b}");
        push(
            &mut specs,
            format!("{p}.diff_proj.weight"),
            vec![d, c],
            InitKind::WeightUniform,
        );
        push(&mut specs, format!("{p}.diff_proj.bias"), vec![c], InitKind::Zeros);
        for axis in ["time_layer", "feature_layer"] {
            for m in ["wq", "wk", "wv", "wo"] {
                push(
                    &mut specs,
                    format!("{p}.{axis}.{m}.weight"),
                    vec![c, c],
                    InitKind::WeightUniform,
                );
                push(
                    &mut specs,
                    format!("{p}.{axis}.{m}.bias"),
                    vec![c],
                    InitKind::Zeros,
                );
            }
            push(
                &mut specs,
                format!("{p}.{axis}.norm1.gamma"),
                vec![c],
                InitKind::Ones,
            );
            push(
                &mut specs,
                format!("{p}.{axis}.norm1.beta"),
                vec![c],
                InitKind::Zeros,
            );
            push(
                &mut specs,
                format!("{p}.{axis}.ff1.weight"),
                vec![c, w],
                InitKind::WeightUniform,
            );
            push(&mut specs, format!("{p}.{axis}.ff1.bias"), vec![w], InitKind::Zeros);
            push(
                &mut specs,
                format!("{p}.{axis}.ff2.weight"),
                vec![w, c],
                InitKind::WeightUniform,
            );
            push(&mut specs, format!("{p}.{axis}.ff2.bias"), vec![c], InitKind::Zeros);
            push(
                &mut specs,
                format!("{p}.{axis}.norm2.gamma"),
                vec![c],
                InitKind::Ones,
            );
            push(
                &mut specs,
                format!("{p}.{axis}.norm2.beta"),
                vec![c],
                InitKind::Zeros,
            );
        }
        push(
            &mut specs,
            format!("{p}.mid_proj.weight"),
            vec![c, 2 * c],
            InitKind::WeightUniform,
        );
        push(&mut specs, format!("{p}.mid_proj.bias"), vec![2 * c], InitKind::Zeros);
        push(
            &mut specs,
            format!("{p}.side_proj.weight"),
            vec![s, 2 * c],
            InitKind::WeightUniform,
        );
        push(&mut specs, format!("{p}.side_proj.bias"), vec![2 * c], InitKind::Zeros);
        push(
            &mut specs,
            format!("{p}.out_proj.weight"),
            vec![c, 2 * c],
            InitKind::WeightUniform,
        );
        push(&mut specs, format!("{p}.out_proj.bias"), vec![2 * c], InitKind::Zeros);
    }
    push(
        &mut specs,
        "output_proj1.weight".into(),
        vec![c, c],
        InitKind::WeightUniform,
    );
    push(&mut specs, "output_proj1.bias".into(), vec![c], InitKind::Zeros);
    // zero init: the untrained model predicts zero noise
    push(
        &mut specs,
        "output_proj2.weight".into(),
        vec![c, 1],
        InitKind::Zeros,
    );
    push(&mut specs, "output_proj2.bias".into(), vec![1], InitKind::Zeros);
    specs
}

/// Inputs to one denoiser evaluation over a `K x L` grid, possibly padded
/// along the time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput {
    /// Noisy extended target `x_t`: zero at conditional and padded
    /// positions.
    pub noisy_target: Array2<f64>,
    /// Clean conditional observations: zero off the conditional mask.
    pub cond_obs: Array2<f64>,
    /// Conditional mask (1 = clean observation supplied).
    pub cond_mask: Array2<u8>,
    /// 1 = real time step, 0 = padding.
    pub pad_mask: Array1<u8>,
    pub timestamps: Array1<f64>,
    /// Diffusion step, 1-based.
    pub t: usize,
}

impl DenoiserInput {
    pub fn new(
        noisy_target: Array2<f64>,
        cond_obs: Array2<f64>,
        cond_mask: Array2<u8>,
        pad_mask: Array1<u8>,
        timestamps: Array1<f64>,
        t: usize,
    ) -> Result<Self> {
        let input = DenoiserInput {
            noisy_target,
            cond_obs,
            cond_mask,
            pad_mask,
            timestamps,
            t,
        };
        input.validate()?;
        Ok(input)
    }

    /// Convenience constructor with no padding.
    pub fn unpadded(
        noisy_target: Array2<f64>,
        cond_obs: Array2<f64>,
        cond_mask: Array2<u8>,
        timestamps: Array1<f64>,
        t: usize,
    ) -> Result<Self> {
        let l = noisy_target.ncols();
        Self::new(
            noisy_target,
            cond_obs,
            cond_mask,
            Array1::ones(l),
            timestamps,
            t,
        )
    }

    pub fn n_features(&self) -> usize {
        self.noisy_target.nrows()
    }

    pub fn len(&self) -> usize {
        self.noisy_target.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_target.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let (k, l) = self.noisy_target.dim();
        if k == 0 || l == 0 {
            return Err(Error::Argument("empty denoiser input".into()));
        }
        if self.cond_obs.dim() != (k, l) || self.cond_mask.dim() != (k, l) {
            return Err(Error::Argument(
                "denoiser input grids disagree in shape".into(),
            ));
        }
        if self.pad_mask.len() != l || self.timestamps.len() != l {
            return Err(Error::Argument(
                "pad mask / timestamps length does not match the grid".into(),
            ));
        }
        if self.t == 0 {
            return Err(Error::Argument("diffusion step must be >= 1".into()));
        }
        for ((i, j), &m) in self.cond_mask.indexed_iter() {
            if m > 1 {
                return Err(Error::Argument(format!(
                    "cond_mask at ({i},{j}) is not binary"
                )));
            }
            let nt = self.noisy_target[[i, j]];
            let co = self.cond_obs[[i, j]];
            if !nt.is_finite() || !co.is_finite() {
                return Err(Error::Argument(format!(
                    "non-finite denoiser input at ({i},{j})"
                )));
            }
            if m == 1 && nt != 0.0 {
                return Err(Error::Argument(format!(
                    "noisy target must be zero on the conditional mask at ({i},{j})"
                )));
            }
            if m == 0 && co != 0.0 {
                return Err(Error::Argument(format!(
                    "conditional observations must be zero off the mask at ({i},{j})"
                )));
            }
            if self.pad_mask[j] == 0 && (nt != 0.0 || co != 0.0 || m != 0) {
                return Err(Error::Argument(format!(
                    "padded column {j} must be zero in all grids"
                )));
            }
        }
        if self.pad_mask.iter().all(|&p| p == 0) {
            return Err(Error::Argument("pad mask excludes every column".into()));
        }
        Ok(())
    }

    /// Zero-pad the time axis to `l_new` columns, extending the pad mask.
    pub fn pad_to(&self, l_new: usize) -> Result<DenoiserInput> {
        let (k, l) = self.noisy_target.dim();
        if l_new < l {
            return Err(Error::Argument(format!(
                "cannot pad length {l} down to {l_new}"
            )));
        }
        let mut noisy = Array2::zeros((k, l_new));
        let mut cond_obs = Array2::zeros((k, l_new));
        let mut cond_mask = Array2::zeros((k, l_new));
        let mut pad = Array1::zeros(l_new);
        let mut ts = Array1::zeros(l_new);
        for j in 0..l {
            pad[j] = self.pad_mask[j];
            ts[j] = self.timestamps[j];
            for i in 0..k {
                noisy[[i, j]] = self.noisy_target[[i, j]];
                cond_obs[[i, j]] = self.cond_obs[[i, j]];
                cond_mask[[i, j]] = self.cond_mask[[i, j]];
            }
        }
        // padded timestamps continue the last real timestamp to stay
        // nondecreasing; they are excluded from attention anyway
        let last_ts = self.timestamps[l - 1];
        for j in l..l_new {
            ts[j] = last_ts;
        }
        DenoiserInput::new(noisy, cond_obs, cond_mask, pad, ts, self.t)
    }
}

/// Anything that predicts the added noise from a [`DenoiserInput`]. The
/// samplers are generic over this, which lets tests substitute analytic
/// predictors for a trained model.
pub trait NoisePredictor: Sync {
    fn predict(&self, input: &DenoiserInput) -> Result<Array2<f64>>;
}

/// One element of a training batch.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub input: DenoiserInput,
    /// The noise that was mixed into the target (full grid).
    pub noise: Array2<f64>,
    /// Positions contributing to the loss.
    pub target_mask: Array2<u8>,
}

/// Parameter collection plus architecture config.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    layout: Vec<ParamSpec>,
    name_index: HashMap<String, usize>,
    params: Vec<f64>,
}

impl DenoiserModel {
    /// Initialize parameters: weights uniform in +-1/sqrt(fan_in), biases
    /// zero, layer-norm gains one, feature embeddings standard normal, and
    /// the final output projection zero so the fresh model predicts zero
    /// noise.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        let total: usize = layout.iter().map(|s| s.len()).sum();
        let mut params = vec![0.0f64; total];
        let mut rng = derive_rng(seed, tag::INIT, 0);
        for spec in &layout {
            let slice = &mut params[spec.offset..spec.offset + spec.len()];
            match spec.init {
                InitKind::WeightUniform => {
                    let bound = 1.0 / (spec.shape[0] as f64).sqrt();
                    for v in slice.iter_mut() {
                        *v = (rng.random::<f64>() * 2.0 - 1.0) * bound;
                    }
                }
                InitKind::Zeros => {}
                InitKind::Ones => slice.fill(1.0),
                InitKind::Embedding => {
                    for v in slice.iter_mut() {
                        *v = rng.sample(rand_distr::StandardNormal);
                    }
                }
            }
        }
        Ok(Self::from_parts(config, layout, params))
    }

    fn from_parts(config: DenoiserConfig, layout: Vec<ParamSpec>, params: Vec<f64>) -> Self {
        let name_index = layout
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        DenoiserModel {
            config,
            layout,
            name_index,
            params,
        }
    }

    /// Rebuild a model from a stored config and flat parameter vector.
    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        let total: usize = layout.iter().map(|s| s.len()).sum();
        if params.len() != total {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, config requires {total}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter in model".into()));
        }
        Ok(Self::from_parts(config, layout, params))
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Total parameter count for a config, without building a model.
    pub fn param_count(config: &DenoiserConfig) -> usize {
        build_layout(config).iter().map(|s| s.len()).sum()
    }

    fn param_array(&self, name: &str) -> ArrayD<f64> {
        let spec = &self.layout[self.name_index[name]];
        ArrayD::from_shape_vec(
            IxDyn(&spec.shape),
            self.params[spec.offset..spec.offset + spec.len()].to_vec(),
        )
        .unwrap()
    }

    /// Side information block: per position `(k, l)` the concatenation of
    /// the timestamp embedding, the feature embedding row, and the
    /// conditional-mask bit. Width `time_embed_dim + feature_embed_dim + 1`.
    pub fn assemble_side_info(
        &self,
        timestamps: &Array1<f64>,
        feature_ids: &[usize],
        cond_mask: &Array2<u8>,
    ) -> Result<Array3<f64>> {
        let k = feature_ids.len();
        let l = timestamps.len();
        if cond_mask.dim() != (k, l) {
            return Err(Error::Argument(format!(
                "cond_mask shape {:?} does not match {k}x{l}",
                cond_mask.dim()
            )));
        }
        for &id in feature_ids {
            if id >= self.config.n_features {
                return Err(Error::Argument(format!(
                    "feature id {id} outside embedding table of size {}",
                    self.config.n_features
                )));
            }
        }
        let td = self.config.time_embed_dim;
        let fd = self.config.feature_embed_dim;
        let femb = self.param_array("feature_embedding");
        let mut out = Array3::zeros((k, l, self.config.side_info_dim()));
        for (ki, &id) in feature_ids.iter().enumerate() {
            for j in 0..l {
                let te = time_embedding(timestamps[j], td);
                for d in 0..td {
                    out[[ki, j, d]] = te[d];
                }
                for d in 0..fd {
                    out[[ki, j, td + d]] = femb[IxDyn(&[id, d])];
                }
                out[[ki, j, td + fd]] = cond_mask[[ki, j]] as f64;
            }
        }
        Ok(out)
    }

    /// Evaluate the denoiser. The output is multiplied by the complement of
    /// the conditional mask (and the pad mask), so conditional and padded
    /// positions are exactly zero.
    pub fn forward(&self, input: &DenoiserInput) -> Result<Array2<f64>> {
        let (tape, out, _) = self.build_forward(input)?;
        Ok(tape
            .value(out)
            .to_owned()
            .into_dimensionality::<Ix2>()
            .unwrap())
    }

    /// Mean squared noise-prediction error over the batch's target entries
    /// plus its exact gradient with respect to every parameter.
    ///
    /// The loss is `sum_b ||(eps - eps_hat) * target||^2 / sum_b #targets`;
    /// normalizing by the target count keeps step sizes comparable while
    /// the random strategy varies the target fraction. Batch elements are
    /// evaluated in parallel and reduced in batch order, so results are
    /// deterministic.
    pub fn loss_and_gradients(&self, batch: &[TrainExample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Argument("empty training batch".into()));
        }
        let per: Vec<Result<(f64, Vec<f64>, usize)>> = batch
            .par_iter()
            .map(|ex| self.example_sse_and_grad(ex))
            .collect();
        let mut sse = 0.0;
        let mut count = 0usize;
        let mut grad = vec![0.0f64; self.params.len()];
        for r in per {
            let (s, g, c) = r?;
            sse += s;
            count += c;
            for (acc, v) in grad.iter_mut().zip(g.iter()) {
                *acc += v;
            }
        }
        if count == 0 {
            return Err(Error::Argument("batch has no target entries".into()));
        }
        let scale = 1.0 / count as f64;
        for g in grad.iter_mut() {
            *g *= scale;
        }
        Ok((sse * scale, grad))
    }

    /// Loss only (same normalization), for validation passes.
    pub fn loss(&self, batch: &[TrainExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let per: Vec<Result<(f64, usize)>> = batch
            .par_iter()
            .map(|ex| self.example_sse(ex))
            .collect();
        let mut sse = 0.0;
        let mut count = 0usize;
        for r in per {
            let (s, c) = r?;
            sse += s;
            count += c;
        }
        if count == 0 {
            return Err(Error::Argument("batch has no target entries".into()));
        }
        Ok(sse / count as f64)
    }

    fn check_example(&self, ex: &TrainExample) -> Result<usize> {
        let dim = ex.input.noisy_target.dim();
        if ex.noise.dim() != dim || ex.target_mask.dim() != dim {
            return Err(Error::Argument(
                "noise/target mask shape does not match the input grid".into(),
            ));
        }
        let n_targets = count_ones(&ex.target_mask);
        if n_targets == 0 {
            return Err(Error::Argument(
                "training example has no target entries".into(),
            ));
        }
        for ((i, j), &tm) in ex.target_mask.indexed_iter() {
            if tm == 1 && (ex.input.cond_mask[[i, j]] == 1 || ex.input.pad_mask[j] == 0) {
                return Err(Error::Argument(format!(
                    "target entry ({i},{j}) overlaps the conditional mask or padding"
                )));
            }
        }
        Ok(n_targets)
    }

    fn example_sse(&self, ex: &TrainExample) -> Result<(f64, usize)> {
        let n_targets = self.check_example(ex)?;
        let (tape, out, _) = self.build_forward(&ex.input)?;
        let (tape, sse) = Self::attach_loss(tape, out, ex);
        Ok((tape.scalar_value(sse), n_targets))
    }

    fn example_sse_and_grad(&self, ex: &TrainExample) -> Result<(f64, Vec<f64>, usize)> {
        let n_targets = self.check_example(ex)?;
        let (tape, out, param_nodes) = self.build_forward(&ex.input)?;
        let (tape, sse) = Self::attach_loss(tape, out, ex);
        let grads = tape.backward(sse);
        let mut flat = vec![0.0f64; self.params.len()];
        for pn in &param_nodes {
            if let Some(g) = &grads[pn.node.index()] {
                let spec = &self.layout[pn.layout_idx];
                debug_assert_eq!(g.len(), pn.used_len);
                for (d, v) in g.iter().enumerate() {
                    flat[spec.offset + d] += v;
                }
            }
        }
        Ok((tape.scalar_value(sse), flat, n_targets))
    }

    fn attach_loss(mut tape: Tape, out: NodeId, ex: &TrainExample) -> (Tape, NodeId) {
        let eps = tape.leaf(ex.noise.clone().into_dyn());
        let diff = tape.sub(eps, out);
        let masked = tape.mul_const(diff, ex.target_mask.mapv(f64::from).into_dyn());
        let sq = tape.mul(masked, masked);
        let sse = tape.sum_all(sq);
        (tape, sse)
    }

    /// Record the forward computation. Returns the tape, the masked output
    /// node of shape `(K, L)`, and the parameter bookkeeping needed to map
    /// tape gradients back into the flat vector.
    fn build_forward(&self, input: &DenoiserInput) -> Result<(Tape, NodeId, Vec<ParamNode>)> {
        input.validate()?;
        let cfg = &self.config;
        let (k, l) = input.noisy_target.dim();
        if k > cfg.n_features {
            return Err(Error::Argument(format!(
                "sample has {k} features, embedding table holds {}",
                cfg.n_features
            )));
        }
        if input.t > cfg.n_steps {
            return Err(Error::Argument(format!(
                "diffusion step {} exceeds configured T = {}",
                input.t, cfg.n_steps
            )));
        }
        let c = cfg.channels;
        let kl = k * l;

        let mut tape = Tape::new();
        let mut param_nodes: Vec<ParamNode> = Vec::with_capacity(self.layout.len());
        let mut by_name: HashMap<&str, NodeId> = HashMap::with_capacity(self.layout.len());
        for (idx, spec) in self.layout.iter().enumerate() {
            let (shape, used_len): (Vec<usize>, usize) = if spec.name == "feature_embedding" {
                // prefix of the table when the sample is narrower
                (vec![k, cfg.feature_embed_dim], k * cfg.feature_embed_dim)
            } else {
                (spec.shape.clone(), spec.len())
            };
            let value = ArrayD::from_shape_vec(
                IxDyn(&shape),
                self.params[spec.offset..spec.offset + used_len].to_vec(),
            )
            .unwrap();
            let node = tape.leaf(value);
            param_nodes.push(ParamNode {
                layout_idx: idx,
                node,
                used_len,
            });
            by_name.insert(spec.name.as_str(), node);
        }
        let linear = |tape: &mut Tape, x: NodeId, prefix: &str| -> NodeId {
            let w = by_name[format!("{prefix}.weight").as_str()];
            let b = by_name[format!("{prefix}.bias").as_str()];
            let y = tape.matmul(x, w);
            tape.add_row_vec(y, b)
        };

        // stacked input channels: conditional observations, noisy target
        let mut input2 = Array2::zeros((kl, 2));
        for i in 0..k {
            for j in 0..l {
                input2[[i * l + j, 0]] = input.cond_obs[[i, j]];
                input2[[i * l + j, 1]] = input.noisy_target[[i, j]];
            }
        }
        let input2 = tape.leaf(input2.into_dyn());
        let projected = linear(&mut tape, input2, "input_proj");
        let mut x = tape.relu(projected); // (KL, C)

        // diffusion-step embedding, projected per block
        let demb = diffusion_step_embedding(input.t, cfg.diffusion_embed_dim);
        let demb = tape.leaf(
            demb.into_shape_with_order(IxDyn(&[1, cfg.diffusion_embed_dim]))
                .unwrap(),
        );

        // side information: time embedding | feature embedding | cond mask
        let td = cfg.time_embed_dim;
        let mut time_emb = Array2::zeros((l, td));
        for j in 0..l {
            time_emb
                .row_mut(j)
                .assign(&time_embedding(input.timestamps[j], td));
        }
        let time_emb = tape.leaf(time_emb.into_dyn());
        let time_b = tape.broadcast_insert(time_emb, 0, k); // (K, L, Td)
        let femb = by_name["feature_embedding"];
        let femb_b = tape.broadcast_insert(femb, 1, l); // (K, L, F)
        let mask_c = tape.leaf(
            input
                .cond_mask
                .mapv(f64::from)
                .into_shape_with_order(IxDyn(&[k, l, 1]))
                .unwrap(),
        );
        let side3 = tape.concat_last(vec![time_b, femb_b, mask_c]);
        let side = tape.reshape(side3, &[kl, cfg.side_info_dim()]); // (KL, S)

        // additive key mask excluding padded time steps from attention
        let key_mask: Option<ArrayD<f64>> = if input.pad_mask.iter().any(|&p| p == 0) {
            let mut m = ArrayD::zeros(IxDyn(&[1, 1, l]));
            for j in 0..l {
                if input.pad_mask[j] == 0 {
                    m[IxDyn(&[0, 0, j])] = -1e30;
                }
            }
            Some(m)
        } else {
            None
        };

        let mut skip_acc: Option<NodeId> = None;
        for b in 0..cfg.residual_layers {
            let p = format!("block{b}");
            let demb_proj = linear(&mut tape, demb, &format!("{p}.diff_proj")); // (1, C)
            let demb_vec = tape.reshape(demb_proj, &[c]);
            let y = tape.add_row_vec(x, demb_vec);

            let y3 = tape.reshape(y, &[k, l, c]);
            let y3 = self.transformer_layer_on_tape(
                &mut tape,
                &by_name,
                y3,
                &format!("{p}.time_layer"),
                key_mask.as_ref(),
            );
            let yf = tape.permute(y3, &[1, 0, 2]); // (L, K, C)
            let yf = self.transformer_layer_on_tape(
                &mut tape,
                &by_name,
                yf,
                &format!("{p}.feature_layer"),
                None,
            );
            let y3 = tape.permute(yf, &[1, 0, 2]);
            let yflat = tape.reshape(y3, &[kl, c]);

            let z = linear(&mut tape, yflat, &format!("{p}.mid_proj")); // (KL, 2C)
            let sc = linear(&mut tape, side, &format!("{p}.side_proj")); // (KL, 2C)
            let z = tape.add(z, sc);
            let gate = tape.slice_last(z, 0, c);
            let filt = tape.slice_last(z, c, c);
            let sg = tape.sigmoid(gate);
            let th = tape.tanh(filt);
            let gated = tape.mul(sg, th); // (KL, C)

            let o = linear(&mut tape, gated, &format!("{p}.out_proj")); // (KL, 2C)
            let res = tape.slice_last(o, 0, c);
            let sk = tape.slice_last(o, c, c);
            let xr = tape.add(x, res);
            x = tape.scale(xr, std::f64::consts::FRAC_1_SQRT_2);
            skip_acc = Some(match skip_acc {
                None => sk,
                Some(acc) => tape.add(acc, sk),
            });

            if tape.value(x).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite activation after residual block {b} at t={}",
                    input.t
                )));
            }
        }

        let skip = tape.scale(
            skip_acc.expect("at least one residual layer"),
            1.0 / (cfg.residual_layers as f64).sqrt(),
        );
        let h1 = linear(&mut tape, skip, "output_proj1");
        let h1 = tape.relu(h1);
        let out = linear(&mut tape, h1, "output_proj2"); // (KL, 1)
        let out2 = tape.reshape(out, &[k, l]);

        // conditional and padded positions output exactly zero
        let mut out_factor = Array2::zeros((k, l));
        for i in 0..k {
            for j in 0..l {
                out_factor[[i, j]] =
                    (1.0 - input.cond_mask[[i, j]] as f64) * input.pad_mask[j] as f64;
            }
        }
        let masked = tape.mul_const(out2, out_factor.into_dyn());
        if tape.value(masked).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite output projection".into()));
        }
        Ok((tape, masked, param_nodes))
    }

    /// One transformer encoder layer over the middle axis of a `(G, N, C)`
    /// tensor: multi-head self-attention with residual and layer norm,
    /// then a position-wise feed-forward with residual and layer norm.
    fn transformer_layer_on_tape(
        &self,
        tape: &mut Tape,
        by_name: &HashMap<&str, NodeId>,
        x: NodeId,
        prefix: &str,
        key_mask: Option<&ArrayD<f64>>,
    ) -> NodeId {
        let shape: Vec<usize> = tape.value(x).shape().to_vec();
        let (g, n, c) = (shape[0], shape[1], shape[2]);
        let h = self.config.attention_heads;
        let dh = c / h;

        let linear = |tape: &mut Tape, x: NodeId, name: &str| -> NodeId {
            let w = by_name[format!("{prefix}.{name}.weight").as_str()];
            let b = by_name[format!("{prefix}.{name}.bias").as_str()];
            let y = tape.matmul(x, w);
            tape.add_row_vec(y, b)
        };
        let to_heads = |tape: &mut Tape, x: NodeId| -> NodeId {
            let r = tape.reshape(x, &[g, n, h, dh]);
            let p = tape.permute(r, &[0, 2, 1, 3]); // (G, H, N, Dh)
            tape.reshape(p, &[g * h, n, dh])
        };

        let flat = tape.reshape(x, &[g * n, c]);
        let q = linear(tape, flat, "wq");
        let kk = linear(tape, flat, "wk");
        let v = linear(tape, flat, "wv");
        let qh = to_heads(tape, q);
        let kh = to_heads(tape, kk);
        let vh = to_heads(tape, v);

        let scores = tape.batch_matmul_transposed(qh, kh); // (GH, N, N)
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax_last(scores, key_mask);
        let ctx = tape.batch_matmul(probs, vh); // (GH, N, Dh)
        let ctx = tape.reshape(ctx, &[g, h, n, dh]);
        let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
        let ctx = tape.reshape(ctx, &[g * n, c]);
        let attn = linear(tape, ctx, "wo");

        let a1 = tape.add(flat, attn);
        let n1 = {
            let gamma = by_name[format!("{prefix}.norm1.gamma").as_str()];
            let beta = by_name[format!("{prefix}.norm1.beta").as_str()];
            tape.layer_norm(a1, gamma, beta)
        };
        let f1 = linear(tape, n1, "ff1");
        let fa = tape.gelu(f1);
        let f2 = linear(tape, fa, "ff2");
        let a2 = tape.add(n1, f2);
        let n2 = {
            let gamma = by_name[format!("{prefix}.norm2.gamma").as_str()];
            let beta = by_name[format!("{prefix}.norm2.beta").as_str()];
            tape.layer_norm(a2, gamma, beta)
        };
        tape.reshape(n2, &[g, n, c])
    }

    /// Run a single transformer layer of block `block` over an explicit
    /// `(G, N, C)` tensor, attending over the middle axis. Exposed for
    /// direct testing of the attention contract.
    pub fn transformer_layer_forward(
        &self,
        block: usize,
        axis: AttentionAxis,
        input: &Array3<f64>,
        pad_mask: Option<&Array1<u8>>,
    ) -> Result<Array3<f64>> {
        if block >= self.config.residual_layers {
            return Err(Error::Argument(format!(
                "block {block} out of range 0..{}",
                self.config.residual_layers
            )));
        }
        let (_, n, c) = input.dim();
        if c != self.config.channels {
            return Err(Error::Argument(format!(
                "channel dim {c} does not match config {}",
                self.config.channels
            )));
        }
        let key_mask = match pad_mask {
            Some(pm) => {
                if pm.len() != n {
                    return Err(Error::Argument(format!(
                        "pad mask length {} does not match attended axis {n}",
                        pm.len()
                    )));
                }
                let mut m = ArrayD::zeros(IxDyn(&[1, 1, n]));
                for j in 0..n {
                    if pm[j] == 0 {
                        m[IxDyn(&[0, 0, j])] = -1e30;
                    }
                }
                Some(m)
            }
            None => None,
        };
        let prefix = match axis {
            AttentionAxis::Temporal => format!("block{block}.time_layer"),
            AttentionAxis::Feature => format!("block{block}.feature_layer"),
        };
        let mut tape = Tape::new();
        let mut by_name: HashMap<&str, NodeId> = HashMap::new();
        for spec in self.layout.iter() {
            if spec.name.starts_with(&prefix) {
                let value = ArrayD::from_shape_vec(
                    IxDyn(&spec.shape),
                    self.params[spec.offset..spec.offset + spec.len()].to_vec(),
                )
                .unwrap();
                let node = tape.leaf(value);
                by_name.insert(spec.name.as_str(), node);
            }
        }
        let x = tape.leaf(input.clone().into_dyn());
        let out =
            self.transformer_layer_on_tape(&mut tape, &by_name, x, &prefix, key_mask.as_ref());
        let v = tape.value(out).to_owned();
        Ok(v.into_dimensionality::<ndarray::Ix3>().unwrap())
    }
}

struct ParamNode {
    layout_idx: usize,
    node: NodeId,
    used_len: usize,
}

/// Which axis a transformer layer attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    Temporal,
    Feature,
}

impl NoisePredictor for DenoiserModel {
    fn predict(&self, input: &DenoiserInput) -> Result<Array2<f64>> {
        self.forward(input)
    }
}
