//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_dataset, Dataset, GroupTag};
use crate::error::{Error, Result};
use crate::eval::synth::{generate_synthetic_dataset, SyntheticSpec};
use crate::model::{BackboneKind, BackboneSpec, SubspaceLayout};
use crate::oodgen::{MixThresholds, OodSpec};
use crate::preprocess::PreprocessConfig;
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub layout: SubspaceLayout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::TransformerEnc {
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                ff_dim: 32,
            },
            layout: SubspaceLayout::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodConfig {
    /// Family drawn during stage 2.
    pub train: OodSpec,
    /// Families evaluated on every fold.
    pub eval: Vec<OodSpec>,
    pub mix_thresholds: MixThresholds,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            train: OodSpec::new(GroupTag::OodGauss),
            eval: GroupTag::OOD_FAMILIES.iter().map(|&f| OodSpec::new(f)).collect(),
            mix_thresholds: MixThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_folds: usize,
    pub detector_percentile: f64,
    pub projections: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_folds: 5,
            detector_percentile: 5.0,
            projections: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub ood: OodConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The small synthetic setup used for desk-scale runs: 2 subjects,
    /// 2 classes, 8 channels, 10 trials per class, 12.5 Hz.
    pub fn toy() -> Self {
        Self {
            dataset: DatasetConfig {
                path: None,
                synthetic: Some(SyntheticSpec::default()),
            },
            preprocess: PreprocessConfig::default(),
            model: ModelConfig {
                layout: SubspaceLayout::new(16, 16).expect("valid layout"),
                ..Default::default()
            },
            training: TrainingConfig {
                stage1_epochs: 30,
                stage2_epochs: 30,
                batch_size: 16,
                learning_rate: 2e-3,
                ..Default::default()
            },
            ood: OodConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            output_dir: default_output_dir(),
        }
    }

    /// Checks everything that does not need the data itself.
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("dataset: give either path or synthetic, not both".into()))
            }
            (None, None) => return Err(Error::Config("dataset: missing path or synthetic block".into())),
            (None, Some(s)) => {
                section("dataset.synthetic", s.validate())?;
                section("preprocess", self.preprocess.validate(s.sampling_rate_hz))?;
            }
            (Some(_), None) => {}
        }
        section("model.layout", self.model.layout.validate())?;
        let probe = BackboneSpec::new(self.model.backbone.clone(), 1, 1, self.model.layout.feature_dim);
        section("model.backbone", probe.validate())?;
        section("training", self.training.validate())?;
        if let Some(n) = &self.training.nested {
            section("training.nested", n.validate(self.model.layout.detector_dim))?;
        }
        section("ood.train", self.ood.train.validate())?;
        for s in &self.ood.eval {
            section("ood.eval", s.validate())?;
        }
        let mut fams: Vec<GroupTag> = self.ood.eval.iter().map(|s| s.family).collect();
        fams.sort();
        if fams.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("ood.eval lists a family twice".into()));
        }
        if self.eval.n_folds < 2 {
            return Err(Error::Config("eval.n_folds must be at least 2".into()));
        }
        let p = self.eval.detector_percentile;
        if !(p > 0.0 && p <= 50.0) {
            return Err(Error::Config(format!("eval.detector_percentile must lie in (0, 50], got {p}")));
        }
        Ok(())
    }

    /// Reads or generates the dataset and checks the preprocessing against
    /// its sampling rate.
    pub fn load_dataset(&self) -> Result<Dataset> {
        self.validate()?;
        let ds = match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(p), _) => read_dataset(p)?,
            (None, Some(s)) => generate_synthetic_dataset(s)?,
            (None, None) => unreachable!("validated"),
        };
        section("preprocess", self.preprocess.validate(ds.sampling_rate_hz))?;
        Ok(ds)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the compact resolved JSON, hex encoded.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn section(name: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::InvalidArgument(m) | Error::Config(m) => Error::Config(format!("{name}: {m}")),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_json_round_trips() {
        let cfg = ExperimentConfig::toy();
        let back = ExperimentConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
        cfg.validate().unwrap();
    }

    #[test]
    fn minimal_document_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"dataset": {"path": "data"}}"#).unwrap();
        assert_eq!(cfg.eval.n_folds, 5);
        assert_eq!(cfg.training.lambda_metric, 1.0);
        assert_eq!(cfg.ood.eval.len(), 5);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_documents() {
        let err = ExperimentConfig::from_json(r#"{"dataset": {"path": "d"}, "sede": 1}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"dataset": {}}"#).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("missing path or synthetic"));
        let mut cfg = ExperimentConfig::toy();
        cfg.preprocess.bandpass.high_hz = 7.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("Nyquist"));
        let mut cfg = ExperimentConfig::toy();
        cfg.eval.detector_percentile = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::toy();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }
}
