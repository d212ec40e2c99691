use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use super::WindowedSample;
use crate::error::{Error, Result};
use crate::seed;

/// Trial-level train/validation partition for one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_trial_ids: BTreeSet<String>,
    pub valid_trial_ids: BTreeSet<String>,
    pub fold_index: usize,
}

/// Shuffles the trial ids with `seed` and deals them round-robin into
/// `n_folds` validation folds. Folds are not stratified by class.
pub fn make_cv_splits(trial_ids: &[String], n_folds: usize, seed: u64) -> Result<Vec<DatasetSplit>> {
    if n_folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {n_folds}")));
    }
    let unique: BTreeSet<&String> = trial_ids.iter().collect();
    if unique.len() != trial_ids.len() {
        return Err(Error::invalid("trial ids must be unique"));
    }
    if trial_ids.len() < n_folds {
        return Err(Error::invalid(format!(
            "cannot build {n_folds} folds from {} trials: every fold needs at least one validation trial",
            trial_ids.len()
        )));
    }

    let mut order: Vec<&String> = trial_ids.iter().collect();
    order.shuffle(&mut seed::rng(seed));

    let mut folds: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n_folds];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % n_folds].insert(id.clone());
    }

    Ok(folds
        .iter()
        .enumerate()
        .map(|(fold_index, valid)| DatasetSplit {
            train_trial_ids: trial_ids
                .iter()
                .filter(|id| !valid.contains(*id))
                .cloned()
                .collect(),
            valid_trial_ids: valid.clone(),
            fold_index,
        })
        .collect())
}

/// Partitions windows by their source trial. Order within each side follows
/// the input order.
pub fn windows_for_split(
    dataset: &[WindowedSample],
    split: &DatasetSplit,
) -> Result<(Vec<WindowedSample>, Vec<WindowedSample>)> {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for w in dataset {
        let in_train = split.train_trial_ids.contains(&w.source_trial_id);
        let in_valid = split.valid_trial_ids.contains(&w.source_trial_id);
        match (in_train, in_valid) {
            (true, false) => train.push(w.clone()),
            (false, true) => valid.push(w.clone()),
            (true, true) => {
                return Err(Error::invalid(format!(
                    "trial {} is on both sides of fold {}",
                    w.source_trial_id, split.fold_index
                )))
            }
            (false, false) => {
                return Err(Error::invalid(format!(
                    "window {}#{} comes from a trial unknown to fold {}",
                    w.source_trial_id, w.window_index, split.fold_index
                )))
            }
        }
    }
    Ok((train, valid))
}
