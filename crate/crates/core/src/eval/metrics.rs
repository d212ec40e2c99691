use std::collections::BTreeMap;

use crate::data::{GroupTag, WindowedSample};
use crate::detector::Decision;
use crate::error::{Error, Result};
use crate::model::{softmax_confidence, Model};

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("accuracy labels", predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean max-softmax probability.
pub fn mean_confidence(windows: &[WindowedSample], model: &Model) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::invalid("mean confidence of an empty set"));
    }
    let logits = model.logits_batch(&model.features_batch(windows)?)?;
    let total: f64 = logits.rows().into_iter().map(|z| softmax_confidence(z).1).sum();
    Ok(total / windows.len() as f64)
}

fn fraction(decisions: &[Decision], which: Decision) -> f64 {
    decisions.iter().filter(|&&d| d == which).count() as f64 / decisions.len() as f64
}

/// Fraction of in-distribution windows the detector accepts.
pub fn acceptance_rate(windows: &[WindowedSample], model: &Model) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::invalid("acceptance rate of an empty set"));
    }
    if let Some(w) = windows.iter().find(|w| w.group.is_ood()) {
        return Err(Error::invalid(format!("acceptance rate is defined on IN_DIST windows, found {}", w.group)));
    }
    Ok(fraction(&model.decide(windows)?, Decision::Accept))
}

/// Fraction of OOD windows the detector excludes.
pub fn exclusion_rate(windows: &[WindowedSample], model: &Model) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::invalid("exclusion rate of an empty set"));
    }
    if windows.iter().any(|w| w.group == GroupTag::InDist) {
        return Err(Error::invalid("exclusion rate is defined on OOD windows, found IN_DIST"));
    }
    Ok(fraction(&model.decide(windows)?, Decision::Exclude))
}

/// [`exclusion_rate`] per group tag present in `windows`.
pub fn exclusion_by_family(windows: &[WindowedSample], model: &Model) -> Result<BTreeMap<GroupTag, f64>> {
    let mut groups: BTreeMap<GroupTag, Vec<WindowedSample>> = BTreeMap::new();
    for w in windows {
        groups.entry(w.group).or_default().push(w.clone());
    }
    groups
        .into_iter()
        .map(|(g, ws)| Ok((g, exclusion_rate(&ws, model)?)))
        .collect()
}
