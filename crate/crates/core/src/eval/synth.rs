//! Desk-scale synthetic fNIRS recordings.
//!
//! Each trial is `pre_s` of rest, a `task_s` boxcar convolved with a
//! double-gamma hemodynamic response, then `rest_s` of recovery. A class
//! owns a fixed weight per optode; HbO channels carry the weighted response
//! and HbR channels a scaled, sign-flipped copy. Background AR(1) noise and
//! white sensor noise are added per channel.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Chromophore, Dataset, DatasetTrial, LabelSpace, TimeSeriesTrial};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};

pub const HRF_PEAK_S: f64 = 6.0;
pub const HRF_UNDERSHOOT_S: f64 = 16.0;
pub const HRF_UNDERSHOOT_RATIO: f64 = 1.0 / 6.0;
pub const HBR_SCALE: f64 = -0.4;
pub const AR_COEFF: f64 = 0.95;
/// Lower bound on the sampling rate: ten times the 0.2 Hz band ceiling.
pub const MIN_SAMPLING_RATE_HZ: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub n_subjects: usize,
    /// Trials per class per subject.
    pub n_trials: usize,
    /// Even; half HbO, half HbR.
    pub n_channels: usize,
    pub classes: Vec<String>,
    pub sampling_rate_hz: f64,
    pub seed: u64,
    pub pre_s: f64,
    pub task_s: f64,
    pub rest_s: f64,
    pub onset_jitter_s: f64,
    pub signal_amplitude: f64,
    pub background_amplitude: f64,
    pub sensor_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            n_subjects: 2,
            n_trials: 10,
            n_channels: 8,
            classes: vec!["rest".into(), "task".into()],
            sampling_rate_hz: 12.5,
            seed: 0,
            pre_s: 2.0,
            task_s: 10.0,
            rest_s: 15.0,
            onset_jitter_s: 0.5,
            signal_amplitude: 1.0,
            background_amplitude: 0.3,
            sensor_noise: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_trials == 0 {
            return Err(Error::Config("synthetic n_subjects and n_trials must be positive".into()));
        }
        if self.n_channels < 2 || self.n_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "synthetic n_channels must be even and at least 2, got {}",
                self.n_channels
            )));
        }
        LabelSpace::new(self.classes.clone()).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.sampling_rate_hz > MIN_SAMPLING_RATE_HZ) {
            return Err(Error::Config(format!(
                "synthetic sampling_rate_hz must exceed {MIN_SAMPLING_RATE_HZ} Hz, got {}",
                self.sampling_rate_hz
            )));
        }
        if !(self.task_s > 0.0 && self.pre_s >= 0.0 && self.rest_s >= 0.0) {
            return Err(Error::Config("synthetic timing must be non-negative with task_s > 0".into()));
        }
        if !(self.onset_jitter_s >= 0.0 && self.onset_jitter_s <= self.pre_s) {
            return Err(Error::Config("onset_jitter_s must lie in [0, pre_s]".into()));
        }
        for (k, v) in [
            ("signal_amplitude", self.signal_amplitude),
            ("background_amplitude", self.background_amplitude),
            ("sensor_noise", self.sensor_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn gamma_pdf(t: f64, shape: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    // unit scale: mode at shape − 1
    ((shape - 1.0) * t.ln() - t - ln_gamma(shape)).exp()
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Double-gamma response peaking near 6 s with an undershoot near 16 s.
pub fn hrf(t: f64) -> f64 {
    gamma_pdf(t, HRF_PEAK_S + 1.0) - HRF_UNDERSHOOT_RATIO * gamma_pdf(t, HRF_UNDERSHOOT_S + 1.0)
}

/// Task boxcar of length `task_s` convolved with [`hrf`], sampled at
/// `t − onset`, scaled to a unit plateau maximum.
fn task_response(n: usize, fs: f64, onset: f64, task_s: f64) -> Array1<f64> {
    let dt = 1.0 / fs;
    let kernel_len = (32.0 * fs).ceil() as usize;
    let peak = (0..(task_s.max(HRF_PEAK_S * 2.0) * fs) as usize)
        .map(|i| boxcar_conv(i as f64 * dt, task_s, dt, kernel_len))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    Array1::from_shape_fn(n, |i| boxcar_conv(i as f64 * dt - onset, task_s, dt, kernel_len) / peak)
}

fn boxcar_conv(t: f64, task_s: f64, dt: f64, kernel_len: usize) -> f64 {
    (0..kernel_len)
        .map(|k| {
            let lag = k as f64 * dt;
            let s = t - lag;
            if (0.0..task_s).contains(&s) {
                hrf(lag) * dt
            } else {
                0.0
            }
        })
        .sum()
}

/// One weight vector per class over the `n_optodes` optodes, orthogonalized
/// across classes (when `n_class ≤ n_optodes`) and scaled to unit max.
pub fn class_patterns(n_class: usize, n_optodes: usize, seed: u64) -> Vec<Array1<f64>> {
    let mut r = rng(derive_seed(seed, &["patterns".into()]));
    let mut out: Vec<Array1<f64>> = Vec::new();
    for _ in 0..n_class {
        let mut v = Array1::from_shape_simple_fn(n_optodes, || r.sample::<f64, _>(rand_distr::StandardNormal));
        if out.len() < n_optodes {
            for u in &out {
                let nu = u.dot(u);
                v = &v - &(u * (v.dot(u) / nu));
            }
        }
        let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        out.push(v / m);
    }
    out
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let labels = LabelSpace::new(spec.classes.clone())?;
    let fs = spec.sampling_rate_hz;
    let n_opt = spec.n_channels / 2;
    let patterns = class_patterns(labels.n_class(), n_opt, spec.seed);
    let n = ((spec.pre_s + spec.task_s + spec.rest_s) * fs).round() as usize;
    let white = Normal::new(0.0, 1.0).expect("unit normal");
    let innovation = (1.0 - AR_COEFF * AR_COEFF).sqrt();

    let mut trials = Vec::new();
    for s in 0..spec.n_subjects {
        let subject = format!("s{:02}", s + 1);
        for i in 0..spec.n_trials * labels.n_class() {
            let class = i % labels.n_class();
            let trial_id = format!("{subject}_t{:03}", i + 1);
            let mut r = rng(derive_seed(spec.seed, &["trial".into(), subject.as_str().into(), i.into()]));
            let jitter = if spec.onset_jitter_s > 0.0 {
                r.random_range(-spec.onset_jitter_s..=spec.onset_jitter_s)
            } else {
                0.0
            };
            let onset = spec.pre_s + jitter;
            let resp = task_response(n, fs, onset, spec.task_s) * spec.signal_amplitude;
            let mut data = Array2::zeros((spec.n_channels, n));
            for ch in 0..spec.n_channels {
                let (opt, scale) = if ch < n_opt { (ch, 1.0) } else { (ch - n_opt, HBR_SCALE) };
                let w = patterns[class][opt] * scale;
                let mut ar = white.sample(&mut r);
                for t in 0..n {
                    ar = AR_COEFF * ar + innovation * white.sample(&mut r);
                    data[[ch, t]] = w * resp[t]
                        + spec.background_amplitude * ar
                        + spec.sensor_noise * white.sample(&mut r);
                }
            }
            let trial = TimeSeriesTrial::new(trial_id, &subject, data, fs, Some(class), Chromophore::HboHbr)?;
            trials.push(DatasetTrial {
                trial,
                task_onset_s: spec.pre_s,
                task_duration_s: spec.task_s,
            });
        }
    }
    let channel_names = (0..n_opt)
        .map(|i| format!("hbo_{}", i + 1))
        .chain((0..n_opt).map(|i| format!("hbr_{}", i + 1)))
        .collect();
    Ok(Dataset {
        name: spec.name.clone(),
        labels,
        sampling_rate_hz: fs,
        chromophore: Chromophore::HboHbr,
        channel_names,
        trials,
    })
}
