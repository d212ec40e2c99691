//! Out-of-distribution-aware fNIRS classification.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! ```text
//! raw intensity ─ mbll ─ band-pass (zero phase) ─ baseline ─ windows ─ z-score
//!                                                                   │
//!                 backbone ── feature vector ─┬─ [0, k)  detector subspace ── cosine-to-centroid gate
//!                                             └─ [k, F)  classifier subspace ── head ── softmax
//! ```
//!
//! Training runs in two stages: cross-entropy on labeled in-distribution
//! windows, then cross-entropy plus a metric term that pushes generated
//! out-of-distribution windows away from in-distribution windows inside the
//! detector subspace. [`eval`] drives subject-specific cross-validation and
//! produces the accuracy, confidence, acceptance and exclusion statistics.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod model;
pub mod oodgen;
pub mod preprocess;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
