//! Accept/exclude gate on detector-subspace embeddings.
//!
//! The gate scores an embedding by its cosine similarity to the normalized
//! mean direction of the in-distribution training embeddings, and accepts
//! it when the score reaches a threshold calibrated as a low percentile of
//! the training scores.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCORE_EPS: f64 = 1e-12;
pub const MIN_CALIBRATION: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub reference_centroid: Vec<f64>,
    pub threshold: f64,
    pub calibration_percentile: f64,
    pub n_calibration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Accept,
    Exclude,
}

impl DetectorState {
    /// Fits the centroid and calibrates the threshold on the same training
    /// embeddings (`[N × k]`).
    pub fn fit(train_embeddings: ArrayView2<'_, f64>, percentile: f64) -> Result<Self> {
        let centroid = fit_reference(train_embeddings)?;
        let scores: Vec<f64> = train_embeddings
            .rows()
            .into_iter()
            .map(|e| cosine_similarity(e, centroid.view()))
            .collect();
        let threshold = calibrate_threshold(&scores, percentile)?;
        Ok(Self {
            reference_centroid: centroid.to_vec(),
            threshold,
            calibration_percentile: percentile,
            n_calibration: scores.len(),
        })
    }

    pub fn detector_dim(&self) -> usize {
        self.reference_centroid.len()
    }

    pub fn score(&self, embedding: ArrayView1<'_, f64>) -> f64 {
        detector_score(embedding, self)
    }

    pub fn decide(&self, embedding: ArrayView1<'_, f64>) -> Decision {
        decide(embedding, self)
    }
}

/// Cosine similarity with a guarded denominator. Values within 1e-12 of ±1
/// snap to ±1 so that parallel vectors score exactly 1 despite rounding.
fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let denom = (a.dot(&a).sqrt() * b.dot(&b).sqrt()).max(SCORE_EPS);
    let c = (a.dot(&b) / denom).clamp(-1.0, 1.0);
    if 1.0 - c.abs() < 1e-12 {
        c.signum()
    } else {
        c
    }
}

/// Unit vector along the mean of the unit-normalized embeddings.
pub fn fit_reference(embeddings: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if embeddings.nrows() == 0 {
        return Err(Error::invalid("cannot fit a reference direction from zero embeddings"));
    }
    let mut sum = Array1::<f64>::zeros(embeddings.ncols());
    for e in embeddings.rows() {
        let n = e.dot(&e).sqrt();
        if n > 0.0 {
            sum.scaled_add(1.0 / n, &e);
        }
    }
    let n = sum.dot(&sum).sqrt();
    if !(n > 0.0) {
        return Err(Error::invalid(
            "embeddings are all zero (or cancel exactly); no reference direction",
        ));
    }
    Ok(sum / n)
}

pub fn detector_score(embedding: ArrayView1<'_, f64>, state: &DetectorState) -> f64 {
    cosine_similarity(embedding, ArrayView1::from(&state.reference_centroid))
}

/// Threshold at the `percentile`-th percentile of in-distribution scores.
pub fn calibrate_threshold(scores: &[f64], percentile: f64) -> Result<f64> {
    if scores.len() < MIN_CALIBRATION {
        return Err(Error::invalid(format!(
            "threshold calibration needs at least {MIN_CALIBRATION} scores, got {}",
            scores.len()
        )));
    }
    if !(percentile > 0.0 && percentile <= 50.0) {
        return Err(Error::invalid(format!(
            "calibration percentile must lie in (0, 50], got {percentile}"
        )));
    }
    Ok(interpolated_percentile(scores, percentile))
}

/// Percentile with linear interpolation between order statistics at
/// position `p/100 · (n − 1)`. `values` must be non-empty.
pub fn interpolated_percentile(values: &[f64], percentile: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Ties go to [`Decision::Accept`].
pub fn decide(embedding: ArrayView1<'_, f64>, state: &DetectorState) -> Decision {
    if detector_score(embedding, state) >= state.threshold {
        Decision::Accept
    } else {
        Decision::Exclude
    }
}
