use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{sample_at_or_after, samples_in};
use crate::data::{GroupTag, TimeSeriesTrial, WindowedSample};
use crate::error::{Error, Result};

pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub window_s: f64,
    pub step_s: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window_s: 3.0,
            step_s: 1.0,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.step_s > 0.0) {
            return Err(Error::invalid(format!(
                "window and step must be positive, got {} s / {} s",
                self.window_s, self.step_s
            )));
        }
        Ok(())
    }

    /// `(window_len, step)` in samples, both floored.
    pub fn in_samples(&self, fs: f64) -> (usize, usize) {
        (samples_in(self.window_s, fs), samples_in(self.step_s, fs))
    }
}

/// Number of windows of `window_len` samples, advancing by `step`, that fit
/// in `total` samples.
pub fn window_count(total: usize, window_len: usize, step: usize) -> usize {
    if window_len == 0 || step == 0 || window_len > total {
        0
    } else {
        (total - window_len) / step + 1
    }
}

/// Subtracts from each channel its mean over `[onset − 1 s, onset)`.
pub fn baseline_correct(trial: &TimeSeriesTrial, task_onset_s: f64) -> Result<TimeSeriesTrial> {
    let fs = trial.sampling_rate_hz;
    if task_onset_s - 1.0 < -1e-9 {
        return Err(Error::invalid(format!(
            "task onset {task_onset_s} s of trial {} leaves less than 1 s of pre-task baseline",
            trial.trial_id
        )));
    }
    let i0 = sample_at_or_after(task_onset_s - 1.0, fs);
    let i1 = sample_at_or_after(task_onset_s, fs).min(trial.n_samples());
    if i1 <= i0 {
        return Err(Error::invalid(format!(
            "no samples in the baseline interval before {task_onset_s} s of trial {}",
            trial.trial_id
        )));
    }
    let means = trial
        .data
        .slice(s![.., i0..i1])
        .mean_axis(Axis(1))
        .expect("non-empty interval");
    let corrected = &trial.data - &means.insert_axis(Axis(1));
    Ok(trial.with_data(corrected, trial.chromophore))
}

/// Slides a window over `task_interval_s` (seconds from trial start).
///
/// Lengths are floored: `window_len = ⌊window_s·fs⌋`, `step = ⌊step_s·fs⌋`,
/// task length `⌊(end − start)·fs⌋`, first sample at `start`.
pub fn segment_windows(
    trial: &TimeSeriesTrial,
    spec: &WindowSpec,
    task_interval_s: (f64, f64),
) -> Result<Vec<WindowedSample>> {
    spec.validate()?;
    let fs = trial.sampling_rate_hz;
    let (start, end) = task_interval_s;
    if !(start >= 0.0 && end > start) {
        return Err(Error::invalid(format!(
            "invalid task interval ({start}, {end}) s for trial {}",
            trial.trial_id
        )));
    }
    let (window_len, step) = spec.in_samples(fs);
    if window_len == 0 || step == 0 {
        return Err(Error::invalid(format!(
            "window {} s / step {} s round to zero samples at {fs} Hz",
            spec.window_s, spec.step_s
        )));
    }
    let first = sample_at_or_after(start, fs);
    let task_len = samples_in(end - start, fs);
    if first + task_len > trial.n_samples() {
        return Err(Error::invalid(format!(
            "task interval ({start}, {end}) s exceeds trial {} ({:.3} s)",
            trial.trial_id,
            trial.duration_s()
        )));
    }
    if window_len > task_len {
        return Err(Error::invalid(format!(
            "window of {window_len} samples is longer than the {task_len}-sample task interval"
        )));
    }
    if trial.label.is_none() {
        return Err(Error::invalid(format!(
            "trial {} is unlabeled; only labeled trials are segmented",
            trial.trial_id
        )));
    }
    (0..window_count(task_len, window_len, step))
        .map(|i| {
            let lo = first + i * step;
            WindowedSample::new(
                trial.data.slice(s![.., lo..lo + window_len]).to_owned(),
                trial.label,
                &trial.trial_id,
                i,
                GroupTag::InDist,
            )
        })
        .collect()
}

/// Per-channel z-score with population standard deviation:
/// `(x − mean) / (std + ε)`.
pub fn normalize_window(w: &WindowedSample) -> WindowedSample {
    let mut data: Array2<f64> = w.data.clone();
    for mut row in data.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let denom = var.sqrt() + NORMALIZE_EPS;
        row.mapv_inplace(|v| (v - mean) / denom);
    }
    WindowedSample {
        data,
        ..w.clone()
    }
}
