use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::sample_at_or_after;
use crate::data::{Chromophore, TimeSeriesTrial};
use crate::error::{Error, Result};

/// Optical constants for the modified Beer-Lambert conversion.
///
/// `extinction[i] = [ε_HbO(λ_i), ε_HbR(λ_i)]` in 1/(mM·cm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MbllConfig {
    pub wavelengths_nm: Vec<f64>,
    pub extinction: Vec<[f64; 2]>,
    pub dpf: Vec<f64>,
    pub source_detector_distance_cm: f64,
}

impl Default for MbllConfig {
    /// 760/850 nm, tabulated decadic molar extinction coefficients, DPF 6,
    /// 3 cm optode spacing.
    fn default() -> Self {
        Self {
            wavelengths_nm: vec![760.0, 850.0],
            extinction: vec![[1.4866, 3.8437], [2.5264, 1.7986]],
            dpf: vec![6.0, 6.0],
            source_detector_distance_cm: 3.0,
        }
    }
}

impl MbllConfig {
    pub fn n_wavelengths(&self) -> usize {
        self.wavelengths_nm.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_wavelengths();
        if n < 2 {
            return Err(Error::invalid("MBLL needs at least two wavelengths"));
        }
        if self.extinction.len() != n || self.dpf.len() != n {
            return Err(Error::invalid(format!(
                "MBLL config has {n} wavelengths but {} extinction rows and {} DPF values",
                self.extinction.len(),
                self.dpf.len()
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !self.wavelengths_nm.iter().copied().all(positive)
            || !self.extinction.iter().flatten().copied().all(positive)
            || !self.dpf.iter().copied().all(positive)
            || !positive(self.source_detector_distance_cm)
        {
            return Err(Error::invalid("MBLL constants must all be positive"));
        }
        self.pseudo_inverse().map(|_| ())
    }

    fn extinction_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_wavelengths(), 2, |r, c| self.extinction[r][c])
    }

    /// `[2 × n_wavelengths]` least-squares solve operator, via SVD.
    fn pseudo_inverse(&self) -> Result<DMatrix<f64>> {
        let e = self.extinction_matrix();
        let svd = e.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > smax * 1e-12) {
            return Err(Error::invalid(
                "extinction matrix is rank deficient; HbO/HbR cannot be separated",
            ));
        }
        svd.pseudo_inverse(smax * 1e-12)
            .map_err(|e| Error::invalid(format!("pseudo-inverse failed: {e}")))
    }
}

/// Converts a raw-intensity trial to HbO/HbR concentration changes.
///
/// Input channels are wavelength-major (`n_wavelengths × n_pairs` rows);
/// output rows are all HbO pairs followed by all HbR pairs.
/// `baseline_window` is in seconds from the start of the trial and sets the
/// reference intensity of each channel.
pub fn mbll_convert(
    intensity: &TimeSeriesTrial,
    cfg: &MbllConfig,
    baseline_window: (f64, f64),
) -> Result<TimeSeriesTrial> {
    if intensity.chromophore != Chromophore::RawIntensity {
        return Err(Error::invalid(format!(
            "trial {} is already converted to concentrations",
            intensity.trial_id
        )));
    }
    cfg.validate()?;
    let pinv = cfg.pseudo_inverse()?;
    let n_wl = cfg.n_wavelengths();
    let (n_ch, n_t) = intensity.data.dim();
    if n_ch % n_wl != 0 {
        return Err(Error::shape(
            format!("trial {} channels", intensity.trial_id),
            format!("a multiple of {n_wl} wavelengths"),
            n_ch,
        ));
    }
    if intensity.data.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid(format!(
            "trial {}: intensity must be strictly positive",
            intensity.trial_id
        )));
    }
    let fs = intensity.sampling_rate_hz;
    let (t0, t1) = baseline_window;
    let i0 = sample_at_or_after(t0, fs);
    let i1 = sample_at_or_after(t1, fs).min(n_t);
    if t0 < 0.0 || i1 <= i0 {
        return Err(Error::invalid(format!(
            "baseline window ({t0}, {t1}) s holds no samples of trial {} ({:.3} s long)",
            intensity.trial_id,
            intensity.duration_s()
        )));
    }

    let n_pairs = n_ch / n_wl;
    let reference: Vec<f64> = (0..n_ch)
        .map(|c| {
            let row = intensity.data.row(c);
            row.slice(ndarray::s![i0..i1]).sum() / (i1 - i0) as f64
        })
        .collect();
    let path: Vec<f64> = cfg
        .dpf
        .iter()
        .map(|dpf| dpf * cfg.source_detector_distance_cm)
        .collect();

    let mut out = Array2::<f64>::zeros((2 * n_pairs, n_t));
    let mut od = vec![0.0; n_wl];
    for pair in 0..n_pairs {
        for t in 0..n_t {
            for (w, od_w) in od.iter_mut().enumerate() {
                let c = w * n_pairs + pair;
                *od_w = -(intensity.data[[c, t]] / reference[c]).log10() / path[w];
            }
            for chrom in 0..2 {
                out[[chrom * n_pairs + pair, t]] =
                    (0..n_wl).map(|w| pinv[(chrom, w)] * od[w]).sum();
            }
        }
    }
    TimeSeriesTrial::new(
        &intensity.trial_id,
        &intensity.subject_id,
        out,
        fs,
        intensity.label,
        Chromophore::HboHbr,
    )
}
