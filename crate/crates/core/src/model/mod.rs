//! Backbones, the subspace split of their feature vector, and the
//! classification head.
//!
//! A backbone maps a `[C × T]` window to a feature vector of length
//! `feature_dim`. Dimensions `[0, detector_dim)` form the detector subspace
//! and `[detector_dim, feature_dim)` the classifier subspace; only the latter
//! reaches the head (affine → ReLU → affine → logits).

mod backbone;
pub mod checkpoint;
mod params;

pub use backbone::{BackboneKind, BackboneSpec};
pub use params::ParamSet;

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{LabelSpace, WindowedSample};
use crate::detector::{Decision, DetectorState};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceLayout {
    pub feature_dim: usize,
    pub detector_dim: usize,
    pub classifier_dim: usize,
}

impl Default for SubspaceLayout {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            detector_dim: 64,
            classifier_dim: 64,
        }
    }
}

impl SubspaceLayout {
    pub fn new(detector_dim: usize, classifier_dim: usize) -> Result<Self> {
        let l = Self {
            feature_dim: detector_dim + classifier_dim,
            detector_dim,
            classifier_dim,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.detector_dim + self.classifier_dim != self.feature_dim {
            return Err(Error::Config(format!(
                "detector_dim {} + classifier_dim {} must equal feature_dim {}",
                self.detector_dim, self.classifier_dim, self.feature_dim
            )));
        }
        if self.detector_dim < 2 || self.classifier_dim < 2 {
            return Err(Error::Config("both subspaces need at least 2 dimensions".into()));
        }
        Ok(())
    }
}

fn check_feature_len(f: ArrayView1<'_, f64>, layout: &SubspaceLayout) -> Result<()> {
    if f.len() != layout.feature_dim {
        return Err(Error::shape("feature vector", layout.feature_dim, f.len()));
    }
    Ok(())
}

/// Dimensions `[0, detector_dim)`.
pub fn detector_slice<'a>(f: ArrayView1<'a, f64>, layout: &SubspaceLayout) -> Result<ArrayView1<'a, f64>> {
    check_feature_len(f, layout)?;
    Ok(f.slice_move(s![..layout.detector_dim]))
}

/// Dimensions `[detector_dim, feature_dim)`.
pub fn classifier_slice<'a>(f: ArrayView1<'a, f64>, layout: &SubspaceLayout) -> Result<ArrayView1<'a, f64>> {
    check_feature_len(f, layout)?;
    Ok(f.slice_move(s![layout.detector_dim..]))
}

/// Max-subtracted softmax and its largest probability.
pub fn softmax_confidence(logits: ArrayView1<'_, f64>) -> (Array1<f64>, f64) {
    let m = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - m).exp());
    let p = &e / e.sum();
    let conf = p.fold(0.0f64, |m, &v| m.max(v));
    (p, conf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainingStage {
    Initialized,
    Stage1,
    Stage2,
}

/// Parameter handles of a model bound to one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: BackboneSpec,
    pub layout: SubspaceLayout,
    pub labels: LabelSpace,
    pub params: ParamSet,
    pub detector: Option<DetectorState>,
    pub stage: TrainingStage,
}

impl Model {
    /// Randomly initialized model (Xavier-uniform weights, zero biases).
    pub fn new(spec: BackboneSpec, layout: SubspaceLayout, labels: LabelSpace, seed: u64) -> Result<Self> {
        layout.validate()?;
        spec.validate()?;
        if spec.feature_dim != layout.feature_dim {
            return Err(Error::Config(format!(
                "backbone feature_dim {} differs from layout feature_dim {}",
                spec.feature_dim, layout.feature_dim
            )));
        }
        let mut rng = seed::rng(seed);
        let mut params = ParamSet::default();
        spec.init_params(&mut params, &mut rng);
        let (c, n) = (layout.classifier_dim, labels.n_class());
        params.insert(format!("{HEAD_PREFIX}hidden.w"), xavier(&mut rng, c, c));
        params.insert(format!("{HEAD_PREFIX}hidden.b"), Array2::zeros((1, c)));
        params.insert(format!("{HEAD_PREFIX}out.w"), xavier(&mut rng, c, n));
        params.insert(format!("{HEAD_PREFIX}out.b"), Array2::zeros((1, n)));
        Ok(Self {
            spec,
            layout,
            labels,
            params,
            detector: None,
            stage: TrainingStage::Initialized,
        })
    }

    pub fn n_class(&self) -> usize {
        self.labels.n_class()
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.spec.input_channels, self.spec.input_len)
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.to_string(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    fn check_input(&self, w: &WindowedSample) -> Result<()> {
        if w.shape() != self.input_shape() {
            return Err(Error::shape(
                format!("input window {}#{}", w.source_trial_id, w.window_index),
                format!("{:?}", self.input_shape()),
                format!("{:?}", w.shape()),
            ));
        }
        Ok(())
    }

    /// `[B × feature_dim]` features of `windows` recorded on `tape`.
    pub fn features_on_tape(&self, tape: &mut Tape, bound: &Bound, windows: &[&WindowedSample]) -> Result<Var> {
        if windows.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for w in windows {
            self.check_input(w)?;
        }
        Ok(self.spec.forward(tape, bound, windows))
    }

    /// Head logits for a `[B × feature_dim]` feature node.
    pub fn logits_on_tape(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Var {
        let cls = tape.slice_cols(features, self.layout.detector_dim, self.layout.feature_dim);
        self.head_on_tape(tape, bound, cls)
    }

    fn head_on_tape(&self, tape: &mut Tape, bound: &Bound, cls: Var) -> Var {
        let h = tape.matmul(cls, bound.var("head.hidden.w"));
        let h = tape.add_row(h, bound.var("head.hidden.b"));
        let h = tape.relu(h);
        let z = tape.matmul(h, bound.var("head.out.w"));
        tape.add_row(z, bound.var("head.out.b"))
    }

    /// Features for many windows, evaluated in chunks.
    pub fn features_batch(&self, windows: &[WindowedSample]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((windows.len(), self.layout.feature_dim));
        for (chunk_idx, chunk) in windows.chunks(64).enumerate() {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let refs: Vec<&WindowedSample> = chunk.iter().collect();
            let f = self.features_on_tape(&mut tape, &bound, &refs)?;
            let lo = chunk_idx * 64;
            out.slice_mut(s![lo..lo + chunk.len(), ..]).assign(tape.value(f));
        }
        Ok(out)
    }

    pub fn forward_features(&self, w: &WindowedSample) -> Result<Array1<f64>> {
        Ok(self.features_batch(std::slice::from_ref(w))?.row(0).to_owned())
    }

    /// Logits from a full feature vector; only the classifier slice is read.
    pub fn classifier_logits(&self, f: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let cls = classifier_slice(f, &self.layout)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(cls.to_owned().insert_axis(ndarray::Axis(0)));
        let z = self.head_on_tape(&mut tape, &bound, x);
        Ok(tape.value(z).row(0).to_owned())
    }

    /// `[B × n_class]` logits for a feature matrix.
    pub fn logits_batch(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.layout.feature_dim {
            return Err(Error::shape("feature matrix", self.layout.feature_dim, features.ncols()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(features.clone());
        let z = self.logits_on_tape(&mut tape, &bound, x);
        Ok(tape.value(z).clone())
    }

    pub fn predict(&self, windows: &[WindowedSample]) -> Result<Vec<(usize, f64)>> {
        let logits = self.logits_batch(&self.features_batch(windows)?)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|z| {
                let (p, conf) = softmax_confidence(z);
                let arg = p
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > p[best] { i } else { best });
                (arg, conf)
            })
            .collect())
    }

    pub fn detector_embeddings(&self, windows: &[WindowedSample]) -> Result<Array2<f64>> {
        let f = self.features_batch(windows)?;
        Ok(f.slice(s![.., ..self.layout.detector_dim]).to_owned())
    }

    pub fn decide(&self, windows: &[WindowedSample]) -> Result<Vec<Decision>> {
        let state = self.detector.as_ref().ok_or(Error::DetectorNotFitted)?;
        let emb = self.detector_embeddings(windows)?;
        Ok(emb.rows().into_iter().map(|e| state.decide(e)).collect())
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.len()).sum()
    }
}

pub(crate) fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit))
}
