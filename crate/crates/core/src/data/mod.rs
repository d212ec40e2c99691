//! Domain types shared by every stage of the pipeline.

mod io;
mod split;

pub use io::{read_dataset, write_dataset, Dataset, DatasetTrial, Manifest, ManifestTrial};
pub use split::{make_cv_splits, windows_for_split, DatasetSplit};

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered, duplicate-free class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    class_names: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let class_names: Vec<String> = names.into_iter().map(Into::into).collect();
        if class_names.len() < 2 {
            return Err(Error::invalid(format!(
                "label space needs at least 2 classes, got {}",
                class_names.len()
            )));
        }
        for (i, name) in class_names.iter().enumerate() {
            if class_names[..i].contains(name) {
                return Err(Error::invalid(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { class_names })
    }

    pub fn n_class(&self) -> usize {
        self.class_names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.class_names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.class_names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        LabelSpace::new(v)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(l: LabelSpace) -> Self {
        l.class_names
    }
}

/// What the channels of a trial measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chromophore {
    /// Detected light intensity, wavelength-major: all optode pairs at the
    /// first wavelength, then all pairs at the second, and so on.
    RawIntensity,
    /// Concentration changes: all HbO channels first, then all HbR channels.
    HboHbr,
}

/// One labeled continuous recording segment, `[n_channels × n_samples]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTrial {
    pub trial_id: String,
    pub subject_id: String,
    pub data: Array2<f64>,
    pub sampling_rate_hz: f64,
    pub label: Option<usize>,
    pub chromophore: Chromophore,
}

impl TimeSeriesTrial {
    pub fn new(
        trial_id: impl Into<String>,
        subject_id: impl Into<String>,
        data: Array2<f64>,
        sampling_rate_hz: f64,
        label: Option<usize>,
        chromophore: Chromophore,
    ) -> Result<Self> {
        let trial_id = trial_id.into();
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::invalid(format!(
                "trial {trial_id}: data must have at least one channel and one sample, got {:?}",
                data.dim()
            )));
        }
        if !(sampling_rate_hz.is_finite() && sampling_rate_hz > 0.0) {
            return Err(Error::invalid(format!(
                "trial {trial_id}: sampling rate must be positive, got {sampling_rate_hz}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("trial {trial_id}: non-finite sample")));
        }
        Ok(Self {
            trial_id,
            subject_id: subject_id.into(),
            data,
            sampling_rate_hz,
            label,
            chromophore,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sampling_rate_hz
    }

    pub fn check_label(&self, labels: &LabelSpace) -> Result<()> {
        match self.label {
            Some(l) if l >= labels.n_class() => Err(Error::invalid(format!(
                "trial {}: label {l} out of range for {} classes",
                self.trial_id,
                labels.n_class()
            ))),
            _ => Ok(()),
        }
    }

    /// Same trial with its data replaced; metadata is carried over.
    pub fn with_data(&self, data: Array2<f64>, chromophore: Chromophore) -> Self {
        Self {
            trial_id: self.trial_id.clone(),
            subject_id: self.subject_id.clone(),
            data,
            sampling_rate_hz: self.sampling_rate_hz,
            label: self.label,
            chromophore,
        }
    }
}

/// Provenance family of a window. Out-of-distribution families are listed
/// roughly from easiest to hardest to reject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GroupTag {
    InDist,
    OodGauss,
    OodUniform,
    OodMixHeavy,
    OodMixModerate,
    OodChannelPerm,
}

impl GroupTag {
    pub const OOD_FAMILIES: [GroupTag; 5] = [
        GroupTag::OodGauss,
        GroupTag::OodUniform,
        GroupTag::OodMixHeavy,
        GroupTag::OodMixModerate,
        GroupTag::OodChannelPerm,
    ];

    pub fn is_ood(self) -> bool {
        self != GroupTag::InDist
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupTag::InDist => "IN_DIST",
            GroupTag::OodGauss => "OOD_GAUSS",
            GroupTag::OodUniform => "OOD_UNIFORM",
            GroupTag::OodMixHeavy => "OOD_MIX_HEAVY",
            GroupTag::OodMixModerate => "OOD_MIX_MODERATE",
            GroupTag::OodChannelPerm => "OOD_CHANNEL_PERM",
        }
    }

    /// Lower-case suffix used in report column names.
    pub fn column_suffix(self) -> &'static str {
        match self {
            GroupTag::InDist => "in",
            GroupTag::OodGauss => "gauss",
            GroupTag::OodUniform => "uniform",
            GroupTag::OodMixHeavy => "mix_heavy",
            GroupTag::OodMixModerate => "mix_moderate",
            GroupTag::OodChannelPerm => "channel_perm",
        }
    }

    pub fn parse(s: &str) -> Option<GroupTag> {
        [GroupTag::InDist]
            .into_iter()
            .chain(GroupTag::OOD_FAMILIES)
            .find(|t| t.as_str() == s)
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fixed-size `[n_channels × window_len]` model input.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub data: Array2<f64>,
    pub label: Option<usize>,
    pub source_trial_id: String,
    pub window_index: usize,
    pub group: GroupTag,
}

impl WindowedSample {
    pub fn new(
        data: Array2<f64>,
        label: Option<usize>,
        source_trial_id: impl Into<String>,
        window_index: usize,
        group: GroupTag,
    ) -> Result<Self> {
        let source_trial_id = source_trial_id.into();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "window {source_trial_id}#{window_index}: non-finite value"
            )));
        }
        match (group, label) {
            (GroupTag::InDist, None) => {
                return Err(Error::invalid(format!(
                    "in-distribution window {source_trial_id}#{window_index} has no label"
                )))
            }
            (g, Some(_)) if g.is_ood() => {
                return Err(Error::invalid(format!(
                    "{g} window {source_trial_id}#{window_index} must be unlabeled"
                )))
            }
            _ => {}
        }
        Ok(Self {
            data,
            label,
            source_trial_id,
            window_index,
            group,
        })
    }

    /// `(n_channels, window_len)`.
    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }
}
