//! Neutral on-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json      dataset name, class names, sampling rate, trial list
//! <dir>/<trial file>.csv   header = channel names, one row per time sample
//! ```
//!
//! For `hbo_hbr` data all HbO channels come first, then all HbR channels.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Chromophore, LabelSpace, TimeSeriesTrial};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub sampling_rate_hz: f64,
    #[serde(default = "default_chromophore")]
    pub chromophore: Chromophore,
    pub trials: Vec<ManifestTrial>,
}

fn default_chromophore() -> Chromophore {
    Chromophore::HboHbr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTrial {
    pub trial_id: String,
    pub subject_id: String,
    /// Class name; `null` for unlabeled recordings.
    pub label: Option<String>,
    pub file: String,
    /// Nominal task start, seconds from the start of the recording.
    pub task_onset_s: f64,
    pub task_duration_s: f64,
}

/// A trial plus the task timing needed for baseline correction and
/// segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTrial {
    pub trial: TimeSeriesTrial,
    pub task_onset_s: f64,
    pub task_duration_s: f64,
}

impl DatasetTrial {
    pub fn task_interval(&self) -> (f64, f64) {
        (self.task_onset_s, self.task_onset_s + self.task_duration_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub labels: LabelSpace,
    pub sampling_rate_hz: f64,
    pub chromophore: Chromophore,
    pub channel_names: Vec<String>,
    pub trials: Vec<DatasetTrial>,
}

impl Dataset {
    /// Subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.trials {
            if !out.contains(&t.trial.subject_id) {
                out.push(t.trial.subject_id.clone());
            }
        }
        out
    }

    pub fn subject_trials(&self, subject_id: &str) -> Vec<&DatasetTrial> {
        self.trials
            .iter()
            .filter(|t| t.trial.subject_id == subject_id)
            .collect()
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let labels = LabelSpace::new(manifest.class_names.clone())
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if !(manifest.sampling_rate_hz > 0.0) {
        return Err(Error::format(&manifest_path, "sampling_rate_hz must be positive"));
    }

    let mut channel_names: Option<Vec<String>> = None;
    let mut trials = Vec::with_capacity(manifest.trials.len());
    for (i, mt) in manifest.trials.iter().enumerate() {
        if manifest.trials[..i].iter().any(|o| o.trial_id == mt.trial_id) {
            return Err(Error::format(
                &manifest_path,
                format!("duplicate trial id {}", mt.trial_id),
            ));
        }
        let label = match &mt.label {
            None => None,
            Some(name) => Some(labels.index_of(name).ok_or_else(|| {
                Error::format(
                    &manifest_path,
                    format!("trial {}: unknown class {name:?}", mt.trial_id),
                )
            })?),
        };
        let csv_path = dir.join(&mt.file);
        let (names, data) = read_matrix_csv(&csv_path)?;
        match &channel_names {
            None => channel_names = Some(names),
            Some(prev) if *prev != names => {
                return Err(Error::format(
                    &csv_path,
                    "channel header differs from the first trial",
                ))
            }
            Some(_) => {}
        }
        let trial = TimeSeriesTrial::new(
            &mt.trial_id,
            &mt.subject_id,
            data,
            manifest.sampling_rate_hz,
            label,
            manifest.chromophore,
        )
        .map_err(|e| Error::format(&csv_path, e.to_string()))?;
        trials.push(DatasetTrial {
            trial,
            task_onset_s: mt.task_onset_s,
            task_duration_s: mt.task_duration_s,
        });
    }

    Ok(Dataset {
        name: manifest.name,
        labels,
        sampling_rate_hz: manifest.sampling_rate_hz,
        chromophore: manifest.chromophore,
        channel_names: channel_names.unwrap_or_default(),
        trials,
    })
}

/// Reads a CSV whose header holds column names and whose rows are time
/// samples. Returns the names and the transposed `[columns × rows]` matrix.
fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(Error::format(path, "empty header"));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        if record.len() != names.len() {
            return Err(Error::format(
                path,
                format!("row {}: expected {} fields, got {}", row + 2, names.len(), record.len()),
            ));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(
                    path,
                    format!("row {}, column {}: not a number: {field:?}", row + 2, col + 1),
                )
            })?;
            columns[col].push(v);
        }
    }
    let n_t = columns[0].len();
    let flat: Vec<f64> = columns.into_iter().flatten().collect();
    let data = Array2::from_shape_vec((names.len(), n_t), flat)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((names, data))
}

/// Writes the dataset into `dir` (created if missing). Trial files are named
/// `<trial_id>.csv`. Output bytes depend only on the dataset contents.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest {
        name: dataset.name.clone(),
        class_names: dataset.labels.names().to_vec(),
        sampling_rate_hz: dataset.sampling_rate_hz,
        chromophore: dataset.chromophore,
        trials: Vec::with_capacity(dataset.trials.len()),
    };
    for dt in &dataset.trials {
        let t = &dt.trial;
        if t.n_channels() != dataset.channel_names.len() {
            return Err(Error::shape(
                format!("trial {}", t.trial_id),
                format!("{} channels", dataset.channel_names.len()),
                format!("{} channels", t.n_channels()),
            ));
        }
        let file = format!("{}.csv", t.trial_id);
        let path = dir.join(&file);
        let mut text = dataset.channel_names.join(",");
        text.push('\n');
        for col in t.data.columns() {
            let row: Vec<String> = col.iter().map(|v| format!("{v}")).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        manifest.trials.push(ManifestTrial {
            trial_id: t.trial_id.clone(),
            subject_id: t.subject_id.clone(),
            label: t
                .label
                .and_then(|l| dataset.labels.name(l))
                .map(str::to_string),
            file,
            task_onset_s: dt.task_onset_s,
            task_duration_s: dt.task_duration_s,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
