use serde::{Deserialize, Serialize};

use super::{
    baseline_correct, design_butterworth_bandpass, mbll_convert, normalize_window, segment_windows,
    zero_phase_filter, BandpassSpec, MbllConfig, WindowSpec,
};
use crate::data::{Chromophore, DatasetTrial, WindowedSample};
use crate::error::{Error, Result};

/// Band edges and order; the sampling rate comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandpassConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
}

impl Default for BandpassConfig {
    fn default() -> Self {
        Self {
            low_hz: 0.01,
            high_hz: 0.1,
            order: 6,
        }
    }
}

impl BandpassConfig {
    pub fn at(&self, sampling_rate_hz: f64) -> BandpassSpec {
        BandpassSpec {
            low_hz: self.low_hz,
            high_hz: self.high_hz,
            order: self.order,
            sampling_rate_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub bandpass: BandpassConfig,
    pub window: WindowSpec,
    /// Constants for raw-intensity input; ignored for HbO/HbR data.
    pub mbll: Option<MbllConfig>,
    /// Subtract the 1 s pre-onset mean after filtering.
    pub baseline: bool,
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            bandpass: BandpassConfig::default(),
            window: WindowSpec::default(),
            mbll: Some(MbllConfig::default()),
            baseline: false,
            normalize: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, sampling_rate_hz: f64) -> Result<()> {
        self.bandpass.at(sampling_rate_hz).validate()?;
        self.window.validate()?;
        if let Some(m) = &self.mbll {
            m.validate()?;
        }
        Ok(())
    }
}

/// MBLL (raw input only) → zero-phase band-pass → optional baseline
/// correction → task-interval windows → optional z-scoring.
pub fn preprocess_trial(dt: &DatasetTrial, cfg: &PreprocessConfig) -> Result<Vec<WindowedSample>> {
    let fs = dt.trial.sampling_rate_hz;
    let trial = match dt.trial.chromophore {
        Chromophore::HboHbr => dt.trial.clone(),
        Chromophore::RawIntensity => {
            let mbll = cfg.mbll.as_ref().ok_or_else(|| {
                Error::Config("raw-intensity data requires a preprocess.mbll block".into())
            })?;
            mbll_convert(&dt.trial, mbll, (0.0, dt.task_onset_s))?
        }
    };
    let coeffs = design_butterworth_bandpass(&cfg.bandpass.at(fs))?;
    let filtered = trial.with_data(zero_phase_filter(&trial.data, &coeffs)?, trial.chromophore);
    let corrected = if cfg.baseline {
        baseline_correct(&filtered, dt.task_onset_s)?
    } else {
        filtered
    };
    let windows = segment_windows(&corrected, &cfg.window, dt.task_interval())?;
    Ok(if cfg.normalize {
        windows.iter().map(normalize_window).collect()
    } else {
        windows
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TimeSeriesTrial;
    use ndarray::Array2;

    #[test]
    fn raw_trial_runs_through_every_stage() {
        let fs = 12.5;
        let n = (27.0 * fs) as usize;
        let data = Array2::from_shape_fn((4, n), |(c, t)| {
            1.0 + 0.01 * (c as f64 + 1.0) * (2.0 * std::f64::consts::PI * 0.05 * t as f64 / fs).sin()
        });
        let dt = DatasetTrial {
            trial: TimeSeriesTrial::new("r1", "s1", data, fs, Some(0), Chromophore::RawIntensity).unwrap(),
            task_onset_s: 2.0,
            task_duration_s: 10.0,
        };
        let cfg = PreprocessConfig {
            baseline: true,
            ..PreprocessConfig::default()
        };
        let ws = preprocess_trial(&dt, &cfg).unwrap();
        assert_eq!(ws.len(), 8);
        assert!(ws.iter().all(|w| w.shape() == (4, 37)));

        let no_mbll = PreprocessConfig { mbll: None, ..cfg };
        assert!(matches!(preprocess_trial(&dt, &no_mbll), Err(Error::Config(_))));
    }
}
