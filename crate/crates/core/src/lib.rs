//! Defect detection with normalizing flows on multi-scale CNN features.
//!
//! The pipeline: images are transformed ([`imageops`]), mapped to pooled
//! multi-scale features by a frozen convolutional extractor ([`extractor`]),
//! and scored by the negative log-likelihood under a Real-NVP style flow
//! ([`flow`], trained by [`training`]). Scores are averaged over transforms
//! and thresholded ([`detect`]); [`metrics`] computes ROC/AUROC and
//! [`store`] holds the binary file formats.

pub mod autodiff;
pub mod detect;
pub mod error;
pub mod extractor;
pub mod flow;
pub mod imageops;
pub mod metrics;
pub mod store;
pub mod training;

pub use error::{Error, Result};

/// Seeded generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Generator for `seed`; all randomness in a run flows from such seeds.
pub fn rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Fixed offsets that derive per-purpose seeds from one run seed.
pub mod seeds {
    pub const FLOW_INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const TRAIN_TRANSFORMS: u64 = 2;
    pub const TEST_TRANSFORMS: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const EXTRACTOR: u64 = 5;
    pub const SYNTH: u64 = 6;
}

/// Seed for purpose `offset` (see [`seeds`]) of a run seeded with `seed`.
pub fn derive_seed(seed: u64, offset: u64) -> u64 {
    seed.wrapping_add(offset.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
