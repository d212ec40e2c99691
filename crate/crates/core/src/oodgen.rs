//! Generators for unlabeled out-of-distribution windows.
//!
//! Pure noise families ([`gen_gaussian`], [`gen_uniform`]) need only a shape;
//! corrupted families ([`mix_noise`], [`permute_channels`]) start from an
//! in-distribution window and keep its `source_trial_id`, so leakage audits
//! still see where the data came from.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{GroupTag, WindowedSample};
use crate::error::{Error, Result};
use crate::seed::{self, derive_seed};

pub const GENERATED_SOURCE: &str = "generated";

pub fn gen_gaussian(shape: (usize, usize), noise_std: f64, seed: u64) -> Result<WindowedSample> {
    if !(noise_std.is_finite() && noise_std > 0.0) {
        return Err(Error::invalid(format!("noise std must be positive, got {noise_std}")));
    }
    check_shape(shape)?;
    let mut rng = seed::rng(seed);
    let data = Array2::from_shape_simple_fn(shape, || {
        noise_std * rng.sample::<f64, _>(StandardNormal)
    });
    WindowedSample::new(data, None, GENERATED_SOURCE, 0, GroupTag::OodGauss)
}

/// I.i.d. entries on `[low, high)`.
pub fn gen_uniform(shape: (usize, usize), low: f64, high: f64, seed: u64) -> Result<WindowedSample> {
    if !(low.is_finite() && high.is_finite() && low < high) {
        return Err(Error::invalid(format!("uniform bounds need low < high, got [{low}, {high})")));
    }
    check_shape(shape)?;
    let mut rng = seed::rng(seed);
    let data = Array2::from_shape_simple_fn(shape, || rng.random_range(low..high));
    WindowedSample::new(data, None, GENERATED_SOURCE, 0, GroupTag::OodUniform)
}

fn check_shape((c, t): (usize, usize)) -> Result<()> {
    if c == 0 || t == 0 {
        return Err(Error::invalid(format!("window shape must be non-empty, got {c}×{t}")));
    }
    Ok(())
}

/// Mixing weights at or above which a mixed window counts as heavily or
/// moderately corrupted. Weights below `moderate` are still tagged moderate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixThresholds {
    pub heavy: f64,
    pub moderate: f64,
}

impl Default for MixThresholds {
    fn default() -> Self {
        Self {
            heavy: 0.5,
            moderate: 0.2,
        }
    }
}

impl MixThresholds {
    pub fn tag_for(&self, alpha: f64) -> GroupTag {
        if alpha >= self.heavy {
            GroupTag::OodMixHeavy
        } else {
            GroupTag::OodMixModerate
        }
    }
}

/// `(1 − alpha)·w + alpha·n` with `n` the unit-variance Gaussian window that
/// [`gen_gaussian`] produces for the same `seed`.
pub fn mix_noise(w: &WindowedSample, alpha: f64, seed: u64) -> Result<WindowedSample> {
    mix_noise_with(w, alpha, seed, &MixThresholds::default())
}

pub fn mix_noise_with(
    w: &WindowedSample,
    alpha: f64,
    seed: u64,
    thresholds: &MixThresholds,
) -> Result<WindowedSample> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("mixing weight must lie in (0, 1], got {alpha}")));
    }
    let noise = gen_gaussian(w.shape(), 1.0, seed)?;
    let data = &w.data * (1.0 - alpha) + &noise.data * alpha;
    WindowedSample::new(
        data,
        None,
        &w.source_trial_id,
        w.window_index,
        thresholds.tag_for(alpha),
    )
}

/// Reorders the rows of `w` by a uniformly drawn non-identity permutation.
pub fn permute_channels(w: &WindowedSample, seed: u64) -> Result<WindowedSample> {
    let n = w.data.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("channel permutation needs at least 2 channels, got {n}")));
    }
    let mut rng = seed::rng(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    // rejection keeps the draw uniform over the n! − 1 non-identity orders
    while perm.iter().enumerate().all(|(i, &p)| i == p) {
        perm.shuffle(&mut rng);
    }
    let data = Array2::from_shape_fn(w.data.dim(), |(r, t)| w.data[[perm[r], t]]);
    WindowedSample::new(data, None, &w.source_trial_id, w.window_index, GroupTag::OodChannelPerm)
}

/// Declarative description of one out-of-distribution family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSpec {
    pub family: GroupTag,
    #[serde(default = "one")]
    pub noise_std: f64,
    /// Mixing weight for the mixed families.
    #[serde(default)]
    pub mix_alpha: Option<f64>,
    #[serde(default)]
    pub permutation_seed: u64,
    /// Number of windows; `None` sizes the set to the validation set.
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default = "uniform_low")]
    pub low: f64,
    #[serde(default = "uniform_high")]
    pub high: f64,
}

fn one() -> f64 {
    1.0
}

// unit variance on [−√3, √3)
fn uniform_low() -> f64 {
    -(3.0f64).sqrt()
}

fn uniform_high() -> f64 {
    (3.0f64).sqrt()
}

impl OodSpec {
    pub fn new(family: GroupTag) -> Self {
        let mix_alpha = match family {
            GroupTag::OodMixHeavy => Some(0.5),
            GroupTag::OodMixModerate => Some(0.3),
            _ => None,
        };
        Self {
            family,
            noise_std: 1.0,
            mix_alpha,
            permutation_seed: 0,
            count: None,
            low: uniform_low(),
            high: uniform_high(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            GroupTag::InDist => Err(Error::Config("an OOD spec cannot use the IN_DIST family".into())),
            GroupTag::OodGauss if !(self.noise_std > 0.0) => {
                Err(Error::Config(format!("OOD_GAUSS noise_std must be positive, got {}", self.noise_std)))
            }
            GroupTag::OodUniform if !(self.low < self.high) => {
                Err(Error::Config("OOD_UNIFORM needs low < high".into()))
            }
            GroupTag::OodMixHeavy | GroupTag::OodMixModerate => match self.mix_alpha {
                Some(a) if a > 0.0 && a <= 1.0 => Ok(()),
                other => Err(Error::Config(format!(
                    "{} needs mix_alpha in (0, 1], got {other:?}",
                    self.family
                ))),
            },
            _ => Ok(()),
        }
    }

    /// Whether generating this family requires in-distribution windows.
    pub fn needs_source(&self) -> bool {
        matches!(
            self.family,
            GroupTag::OodMixHeavy | GroupTag::OodMixModerate | GroupTag::OodChannelPerm
        )
    }

    /// Window `index` of the family under `base_seed`. Corrupted families
    /// cycle through `pool`.
    pub fn sample(
        &self,
        shape: (usize, usize),
        pool: &[WindowedSample],
        base_seed: u64,
        index: usize,
        thresholds: &MixThresholds,
    ) -> Result<WindowedSample> {
        let s = derive_seed(
            base_seed,
            &[self.family.as_str().into(), self.permutation_seed.into(), index.into()],
        );
        let source = || {
            if pool.is_empty() {
                Err(Error::invalid(format!("{} needs in-distribution source windows", self.family)))
            } else {
                Ok(&pool[index % pool.len()])
            }
        };
        let mut w = match self.family {
            GroupTag::InDist => return Err(Error::invalid("IN_DIST is not an OOD family")),
            GroupTag::OodGauss => gen_gaussian(shape, self.noise_std, s)?,
            GroupTag::OodUniform => gen_uniform(shape, self.low, self.high, s)?,
            GroupTag::OodMixHeavy | GroupTag::OodMixModerate => {
                let alpha = self.mix_alpha.ok_or_else(|| Error::invalid("mix family without mix_alpha"))?;
                mix_noise_with(source()?, alpha, s, thresholds)?
            }
            GroupTag::OodChannelPerm => permute_channels(source()?, s)?,
        };
        if !self.needs_source() {
            w.window_index = index;
        }
        Ok(w)
    }

    pub fn generate(
        &self,
        shape: (usize, usize),
        pool: &[WindowedSample],
        base_seed: u64,
        count: usize,
        thresholds: &MixThresholds,
    ) -> Result<Vec<WindowedSample>> {
        (0..count)
            .map(|i| self.sample(shape, pool, base_seed, i, thresholds))
            .collect()
    }
}

/// Supplies out-of-distribution batches during stage-2 training.
pub trait OodSource {
    fn next_batch(&mut self, n: usize, shape: (usize, usize)) -> Result<Vec<WindowedSample>>;
}

/// Draws successive windows of one family from an endless seeded stream.
#[derive(Debug, Clone)]
pub struct SpecSource {
    spec: OodSpec,
    pool: Vec<WindowedSample>,
    seed: u64,
    thresholds: MixThresholds,
    drawn: usize,
}

impl SpecSource {
    pub fn new(spec: OodSpec, pool: Vec<WindowedSample>, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            pool,
            seed,
            thresholds: MixThresholds::default(),
            drawn: 0,
        })
    }

    pub fn with_thresholds(mut self, thresholds: MixThresholds) -> Self {
        self.thresholds = thresholds;
        self
    }

    pub fn gaussian(noise_std: f64, seed: u64) -> Result<Self> {
        Self::new(
            OodSpec {
                noise_std,
                ..OodSpec::new(GroupTag::OodGauss)
            },
            Vec::new(),
            seed,
        )
    }
}

impl OodSource for SpecSource {
    fn next_batch(&mut self, n: usize, shape: (usize, usize)) -> Result<Vec<WindowedSample>> {
        let out = (self.drawn..self.drawn + n)
            .map(|i| self.spec.sample(shape, &self.pool, self.seed, i, &self.thresholds))
            .collect();
        self.drawn += n;
        out
    }
}
