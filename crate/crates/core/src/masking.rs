//! Observation masks, the self-supervised target-choice strategies, and
//! evaluation holdout generation.
//!
//! A training step partitions the observed entries of a sample into
//! conditioning entries (kept as clean inputs) and target entries (noised
//! and predicted). The strategies below differ in how that partition is
//! drawn; all of them produce a [`MaskSplit`] satisfying the same
//! invariants: both masks are subsets of the observation mask, they are
//! disjoint, and at training time they partition it exactly.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One multivariate series: a value grid, its observation mask, and
/// timestamps. Unobserved entries are stored as NaN and are never read;
/// every consumer gates on the mask.
#[derive(Debug, Clone)]
pub struct TimeSeriesSample {
    values: Array2<f64>,
    mask: Array2<u8>,
    timestamps: Array1<f64>,
}

/// Equality over observed content: masks, timestamps, and values at
/// observed positions (sentinels are not compared).
impl PartialEq for TimeSeriesSample {
    fn eq(&self, other: &Self) -> bool {
        self.mask == other.mask
            && self.timestamps == other.timestamps
            && self
                .mask
                .indexed_iter()
                .all(|((i, j), &m)| m == 0 || self.values[[i, j]] == other.values[[i, j]])
    }
}

impl TimeSeriesSample {
    pub fn new(
        mut values: Array2<f64>,
        mask: Array2<u8>,
        timestamps: Array1<f64>,
    ) -> Result<Self> {
        let (k, l) = values.dim();
        if k == 0 || l == 0 {
            return Err(Error::Data(format!("empty sample grid {k}x{l}")));
        }
        if mask.dim() != (k, l) {
            return Err(Error::Data(format!(
                "mask shape {:?} does not match values {:?}",
                mask.dim(),
                values.dim()
            )));
        }
        if timestamps.len() != l {
            return Err(Error::Data(format!(
                "timestamps length {} does not match series length {l}",
                timestamps.len()
            )));
        }
        if timestamps.windows(2).into_iter().any(|w| w[1] < w[0]) {
            return Err(Error::Data("timestamps must be nondecreasing".into()));
        }
        for ((i, j), &m) in mask.indexed_iter() {
            match m {
                1 => {
                    if !values[[i, j]].is_finite() {
                        return Err(Error::Data(format!(
                            "observed entry ({i},{j}) is not finite"
                        )));
                    }
                }
                0 => values[[i, j]] = f64::NAN, // sentinel, never read
                _ => return Err(Error::Data(format!("mask entry ({i},{j}) is {m}, not 0/1"))),
            }
        }
        Ok(Self {
            values,
            mask,
            timestamps,
        })
    }

    pub fn n_features(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Raw value grid; unobserved entries hold the NaN sentinel.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Array2<u8> {
        &self.mask
    }

    pub fn timestamps(&self) -> &Array1<f64> {
        &self.timestamps
    }

    pub fn observed_count(&self) -> usize {
        count_ones(&self.mask)
    }

    /// Values gated by `select`: `X` where `select` is 1, zero elsewhere.
    /// Only positions with `select = 1` are read, and they must be observed.
    pub fn gated_values(&self, select: &Array2<u8>) -> Array2<f64> {
        debug_assert_eq!(select.dim(), self.values.dim());
        let mut out = Array2::zeros(self.values.dim());
        for ((i, j), &s) in select.indexed_iter() {
            if s == 1 {
                debug_assert_eq!(self.mask[[i, j]], 1, "gated read of unobserved entry");
                out[[i, j]] = self.values[[i, j]];
            }
        }
        out
    }

    /// Indices of observed entries in row-major order.
    pub fn observed_indices(&self) -> Vec<(usize, usize)> {
        self.mask
            .indexed_iter()
            .filter(|(_, &m)| m == 1)
            .map(|(idx, _)| idx)
            .collect()
    }
}

/// Partition of observed entries into conditioning and target masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSplit {
    pub cond_mask: Array2<u8>,
    pub target_mask: Array2<u8>,
}

impl MaskSplit {
    /// Build a split from the target selection; conditioning is the rest of
    /// the observed entries.
    pub fn from_target(sample: &TimeSeriesSample, target_mask: Array2<u8>) -> Self {
        let cond_mask = mask_minus(sample.mask(), &target_mask);
        MaskSplit {
            cond_mask,
            target_mask,
        }
    }

    pub fn target_count(&self) -> usize {
        count_ones(&self.target_mask)
    }

    /// Check the structural invariants against the sample the split came
    /// from: subset of observed, disjoint, exact partition.
    pub fn check(&self, sample: &TimeSeriesSample) -> Result<()> {
        let m = sample.mask();
        for ((i, j), &t) in self.target_mask.indexed_iter() {
            let c = self.cond_mask[[i, j]];
            if t > 1 || c > 1 {
                return Err(Error::Argument(format!("non-binary mask at ({i},{j})")));
            }
            if t + c != m[[i, j]] {
                return Err(Error::Argument(format!(
                    "split does not partition observed entries at ({i},{j})"
                )));
            }
        }
        Ok(())
    }
}

pub fn count_ones(mask: &Array2<u8>) -> usize {
    mask.iter().filter(|&&m| m == 1).count()
}

/// `a & !b`, elementwise.
pub fn mask_minus(a: &Array2<u8>, b: &Array2<u8>) -> Array2<u8> {
    let mut out = a.clone();
    for (o, &bv) in out.iter_mut().zip(b.iter()) {
        if bv == 1 {
            *o = 0;
        }
    }
    out
}

/// `!a`, elementwise.
pub fn mask_complement(a: &Array2<u8>) -> Array2<u8> {
    a.mapv(|m| 1 - m)
}

/// `a & b`, elementwise.
pub fn mask_intersect(a: &Array2<u8>, b: &Array2<u8>) -> Array2<u8> {
    let mut out = a.clone();
    for (o, &bv) in out.iter_mut().zip(b.iter()) {
        *o &= bv;
    }
    out
}

const MAX_REDRAWS: usize = 10_000;

/// Target-choice strategy selector, as named in config files.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Random,
    Historical,
    Mix,
    TestPattern(Array2<u8>),
    Interpolation,
}

impl Strategy {
    /// Apply the strategy to one sample. `pattern_source` is consulted by
    /// the historical and mix strategies (typically the training set).
    pub fn split(
        &self,
        sample: &TimeSeriesSample,
        pattern_source: &[TimeSeriesSample],
        rng: &mut ChaCha8Rng,
    ) -> Result<MaskSplit> {
        match self {
            Strategy::Random => random_split(sample, rng),
            Strategy::Historical => historical_split(sample, pattern_source, rng),
            Strategy::Mix => mix_split(sample, pattern_source, rng),
            Strategy::TestPattern(p) => test_pattern_split(sample, p),
            Strategy::Interpolation => interpolation_split(sample, rng),
        }
    }
}

/// Random strategy: draw a target ratio r ~ Uniform(0,100), mark
/// `floor(r/100 * #observed)` observed entries as targets, redraw if the
/// count comes out zero so every training step has at least one target.
pub fn random_split(sample: &TimeSeriesSample, rng: &mut ChaCha8Rng) -> Result<MaskSplit> {
    let n_obs = sample.observed_count();
    if n_obs == 0 {
        return Err(Error::Argument("sample has no observed entries".into()));
    }
    if n_obs == 1 {
        // floor of any ratio below 100% is zero here, so redrawing cannot
        // terminate; the only valid split targets the single entry
        return random_split_with_count(sample, 1, rng);
    }
    for _ in 0..MAX_REDRAWS {
        let r = rng.random::<f64>() * 100.0;
        let n_target = (r / 100.0 * n_obs as f64).floor() as usize;
        if n_target > 0 {
            return random_split_with_count(sample, n_target, rng);
        }
    }
    Err(Error::Numeric("target-ratio redraw limit exceeded".into()))
}

/// Random strategy with a forced target ratio in percent.
pub fn random_split_with_ratio(
    sample: &TimeSeriesSample,
    ratio_percent: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskSplit> {
    let n_obs = sample.observed_count();
    if n_obs == 0 {
        return Err(Error::Argument("sample has no observed entries".into()));
    }
    let n_target = (ratio_percent / 100.0 * n_obs as f64).floor() as usize;
    if n_target == 0 {
        return Err(Error::Argument(format!(
            "ratio {ratio_percent}% selects zero of {n_obs} observed entries"
        )));
    }
    random_split_with_count(sample, n_target, rng)
}

fn random_split_with_count(
    sample: &TimeSeriesSample,
    n_target: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MaskSplit> {
    let observed = sample.observed_indices();
    let picked = rand::seq::index::sample(rng, observed.len(), n_target.min(observed.len()));
    let mut target = Array2::zeros(sample.mask().dim());
    for p in picked.iter() {
        let (i, j) = observed[p];
        target[[i, j]] = 1;
    }
    Ok(MaskSplit::from_target(sample, target))
}

/// Historical strategy: draw a pattern sample and mark the intersection of
/// this sample's observed indices with the pattern's missing indices as
/// targets. Falls back to the random strategy when the intersection is
/// empty.
pub fn historical_split(
    sample: &TimeSeriesSample,
    pattern_source: &[TimeSeriesSample],
    rng: &mut ChaCha8Rng,
) -> Result<MaskSplit> {
    if pattern_source.is_empty() {
        return Err(Error::Config(
            "historical strategy needs a nonempty pattern source".into(),
        ));
    }
    let idx = rng.random_range(0..pattern_source.len());
    match historical_split_with_pattern(sample, &pattern_source[idx])? {
        Some(split) => Ok(split),
        None => random_split(sample, rng),
    }
}

/// Intersection core of the historical strategy. Returns `None` when the
/// pattern's missing indices do not hit any observed entry, leaving the
/// fallback policy to the caller. Feature counts must match; differing
/// lengths intersect over the overlapping prefix.
pub fn historical_split_with_pattern(
    sample: &TimeSeriesSample,
    pattern: &TimeSeriesSample,
) -> Result<Option<MaskSplit>> {
    if pattern.n_features() != sample.n_features() {
        return Err(Error::Argument(format!(
            "pattern has {} features, sample has {}",
            pattern.n_features(),
            sample.n_features()
        )));
    }
    let l = sample.len().min(pattern.len());
    let mut target = Array2::zeros(sample.mask().dim());
    for i in 0..sample.n_features() {
        for j in 0..l {
            if sample.mask()[[i, j]] == 1 && pattern.mask()[[i, j]] == 0 {
                target[[i, j]] = 1;
            }
        }
    }
    if count_ones(&target) == 0 {
        return Ok(None);
    }
    Ok(Some(MaskSplit::from_target(sample, target)))
}

/// Mix strategy: a fair coin per sample chooses between the random and the
/// historical strategy.
pub fn mix_split(
    sample: &TimeSeriesSample,
    pattern_source: &[TimeSeriesSample],
    rng: &mut ChaCha8Rng,
) -> Result<MaskSplit> {
    let coin: f64 = rng.random();
    if coin < 0.5 {
        random_split(sample, rng)
    } else {
        historical_split(sample, pattern_source, rng)
    }
}

/// Test-pattern strategy: targets are the pattern's marked entries,
/// restricted to positions actually observed in the sample. Used when the
/// deployment missing pattern is known, e.g. forecasting masks that cover
/// all features at future time steps.
pub fn test_pattern_split(sample: &TimeSeriesSample, pattern: &Array2<u8>) -> Result<MaskSplit> {
    if pattern.dim() != sample.mask().dim() {
        return Err(Error::Argument(format!(
            "pattern shape {:?} does not match sample {:?}",
            pattern.dim(),
            sample.mask().dim()
        )));
    }
    let target = mask_intersect(sample.mask(), pattern);
    if count_ones(&target) == 0 {
        return Err(Error::Config(
            "test pattern selects no observed entries".into(),
        ));
    }
    Ok(MaskSplit::from_target(sample, target))
}

/// Random strategy adjusted for interpolation: whole time columns are
/// sampled instead of single entries, so every selected column is entirely
/// target among its observed entries.
pub fn interpolation_split(sample: &TimeSeriesSample, rng: &mut ChaCha8Rng) -> Result<MaskSplit> {
    if sample.observed_count() == 0 {
        return Err(Error::Argument("sample has no observed entries".into()));
    }
    let l = sample.len();
    if l == 1 {
        return interpolation_split_with_columns(sample, &[0]);
    }
    for _ in 0..MAX_REDRAWS {
        let r = rng.random::<f64>() * 100.0;
        let n_cols = (r / 100.0 * l as f64).floor() as usize;
        if n_cols == 0 {
            continue;
        }
        let cols: Vec<usize> = rand::seq::index::sample(rng, l, n_cols).into_iter().collect();
        let split = interpolation_split_with_columns(sample, &cols)?;
        if split.target_count() > 0 {
            return Ok(split);
        }
    }
    Err(Error::Numeric("column redraw limit exceeded".into()))
}

/// Column-set core of the interpolation strategy: all observed entries in
/// the given columns become targets.
pub fn interpolation_split_with_columns(
    sample: &TimeSeriesSample,
    columns: &[usize],
) -> Result<MaskSplit> {
    let mut target = Array2::zeros(sample.mask().dim());
    for &j in columns {
        if j >= sample.len() {
            return Err(Error::Argument(format!(
                "column {j} out of range 0..{}",
                sample.len()
            )));
        }
        for i in 0..sample.n_features() {
            if sample.mask()[[i, j]] == 1 {
                target[[i, j]] = 1;
            }
        }
    }
    Ok(MaskSplit::from_target(sample, target))
}

/// Evaluation holdout mode: remove individual observed entries, or whole
/// time columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoldoutMode {
    Entrywise,
    Columnwise,
}

/// Remove a fraction of observed data to serve as ground truth.
///
/// Returns the reduced sample (held-out entries become unobserved) and the
/// mask of held-out positions. The caller keeps the original sample to
/// score against.
pub fn holdout_ground_truth(
    sample: &TimeSeriesSample,
    fraction: f64,
    mode: HoldoutMode,
    rng: &mut ChaCha8Rng,
) -> Result<(TimeSeriesSample, Array2<u8>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!(
            "holdout fraction must be in (0,1), got {fraction}"
        )));
    }
    let mut truth = Array2::zeros(sample.mask().dim());
    match mode {
        HoldoutMode::Entrywise => {
            let observed = sample.observed_indices();
            let n_hold = (fraction * observed.len() as f64).floor() as usize;
            if n_hold == 0 {
                return Err(Error::Argument(format!(
                    "fraction {fraction} holds out zero of {} observed entries",
                    observed.len()
                )));
            }
            for p in rand::seq::index::sample(rng, observed.len(), n_hold).iter() {
                let (i, j) = observed[p];
                truth[[i, j]] = 1;
            }
        }
        HoldoutMode::Columnwise => {
            let l = sample.len();
            let n_cols = (fraction * l as f64).floor() as usize;
            if n_cols == 0 {
                return Err(Error::Argument(format!(
                    "fraction {fraction} holds out zero of {l} columns"
                )));
            }
            for j in rand::seq::index::sample(rng, l, n_cols).iter() {
                for i in 0..sample.n_features() {
                    if sample.mask()[[i, j]] == 1 {
                        truth[[i, j]] = 1;
                    }
                }
            }
            if count_ones(&truth) == 0 {
                return Err(Error::Argument(
                    "held-out columns contain no observed entries".into(),
                ));
            }
        }
    }

    let reduced_mask = mask_minus(sample.mask(), &truth);
    let reduced = TimeSeriesSample::new(
        sample.values().clone(),
        reduced_mask,
        sample.timestamps().clone(),
    )?;
    Ok((reduced, truth))
}
