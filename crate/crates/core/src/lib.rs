//! Meta-curriculum adaptation of small neural sequence models.
//!
//! The crate covers the full experimental loop: corpus handling, a pair of
//! from-scratch transformer architectures with exact gradients, cross-entropy
//! divergence scoring, curriculum task scheduling, first-order meta-training,
//! and BLEU-based evaluation. All numeric code is generic over [`Scalar`]
//! (`f32` or `f64`); the aliases below fix the default precision used by the
//! command-line pipeline and by checkpoints.

pub mod corpus;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod metatrain;
pub mod model;
pub mod scalar;
pub mod scoring;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default precision for end-to-end runs and checkpoints.
pub type Real = f64;
/// Parameter vector at default precision.
pub type Params = model::ParamVector<Real>;
