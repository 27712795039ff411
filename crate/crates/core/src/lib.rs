//! Weakly supervised classification of slice stacks (e.g. CT volumes) from
//! patient-level labels.
//!
//! The pipeline is:
//!
//! * [`model`]: a convolutional backbone, a bias-free 1×1 classifier head whose
//!   per-class maps double as class activation maps, and a pooled embedding.
//! * [`sam`]: sections of consecutive slices, k-max pooling per section and a
//!   noisy-OR over sections giving the patient probability.
//! * [`sncm`]: per-slice label-noise transition matrices and the noisy loss.
//! * [`trainer`]: end-to-end optimisation of all of the above.
//! * [`data`] and [`eval`]: synthetic multi-domain volumes, manifests,
//!   augmentation, metrics and CAM box extraction.

pub mod archive;
pub mod benchmark;
pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod sam;
pub mod sncm;
pub mod trainer;

pub use error::{Error, Result};

/// Number of classes handled by the head (negative, positive).
pub const NUM_CLASSES: usize = 2;

/// Index of the positive ("infected") class.
pub const POSITIVE: usize = 1;

/// Index of the negative class.
pub const NEGATIVE: usize = 0;

/// One-hot encoding of a binary patient label, `[1 - y, y]`.
pub fn one_hot(label: u8) -> [f64; NUM_CLASSES] {
    if label == 0 {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mixes a master seed with stream/index words (splitmix64), so that every
/// consumer of randomness gets an independent, order-free stream.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
