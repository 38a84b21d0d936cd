//! Channel-wise magnitude equalization (CME) and the inverted-weight
//! logarithmic (IWL) loss for imbalanced multi-channel ECG classification.
//!
//! The crate is organised the way the processing flows:
//!
//! * [`data`]: records, datasets, CSV ingestion, synthetic generation,
//!   windowing and stratified splitting.
//! * [`equalizer`]: per-channel magnitude diagnostics, CME factors,
//!   Hadamard scaling and image encoding.
//! * [`imbalance`]: exponential long-tail resampling.
//! * [`losses`]: IWL, cross-entropy and the baseline imbalance losses, all
//!   with analytical gradients, plus a finite-difference oracle.
//! * [`nn`], [`metrics`], [`train`]: a small deterministic MLP trainer.
//! * [`experiment`]: the seeded grid runner producing results tables.

pub mod data;
pub mod equalizer;
pub mod error;
pub mod experiment;
pub mod imbalance;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod train;

pub use error::{Error, Result};

/// `floor`, except that values within 1e-9 (relative) of an integer snap to
/// that integer. Products such as `640 * 0.05` or `10 * 0.9` are exact
/// integers in decimal but can land a hair below in binary.
pub(crate) fn floor_snapped(x: f64) -> f64 {
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest
    } else {
        x.floor()
    }
}
