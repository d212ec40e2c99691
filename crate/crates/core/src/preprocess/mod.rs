//! Signal preprocessing: concentration conversion, zero-phase band-pass,
//! baseline correction, sliding-window segmentation and per-window z-scoring.

mod filter;
mod mbll;
mod pipeline;
mod window;

pub use filter::{design_butterworth_bandpass, zero_phase_filter, BandpassSpec, Biquad, FilterCoefficients};
pub use mbll::{mbll_convert, MbllConfig};
pub use pipeline::{preprocess_trial, BandpassConfig, PreprocessConfig};
pub use window::{
    baseline_correct, normalize_window, segment_windows, window_count, WindowSpec, NORMALIZE_EPS,
};

/// Index of the first sample at or after `t_s`.
///
/// A small tolerance absorbs representation error in products such as
/// `0.3 * 10.0`, so a time that lands on a sample boundary maps to that sample.
pub(crate) fn sample_at_or_after(t_s: f64, fs: f64) -> usize {
    let x = t_s * fs;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r.max(0.0) as usize
    } else {
        x.ceil().max(0.0) as usize
    }
}

/// `floor(seconds · fs)` with the same boundary tolerance.
pub(crate) fn samples_in(seconds: f64, fs: f64) -> usize {
    let x = seconds * fs;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r.max(0.0) as usize
    } else {
        x.floor().max(0.0) as usize
    }
}
