//! Missing-modality volumetric segmentation toolkit.
//!
//! The crate trains and evaluates a single-modality parallel segmentation
//! network that stays usable when input modalities are missing. Per-modality
//! stems feed a shared 3D residual U-Net backbone; a dynamic-combination step
//! fuses whichever branches are present. Training combines a Dice term, a
//! Hölder-divergence term between the fused prediction and the label field,
//! and a variational feature-transfer term that pulls missing-modality
//! bottleneck features toward the full-modality ones.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); concrete
//! aliases for the common instantiations live at the crate root.

pub mod divergence;
pub mod net;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use divergence::{DiscreteDistribution, DivergenceKind, HolderExponent};
pub use field::{batched_divergence, LabelField, ProbabilityField};

/// `f32` instantiations used by the training engine and CLI.
pub type ProbabilityField32 = field::ProbabilityField<f32>;
pub type LatentFeature32 = loss::LatentFeature<f32>;

/// `f64` instantiations used by gradient checks and oracles.
pub type ProbabilityField64 = field::ProbabilityField<f64>;
pub type LatentFeature64 = loss::LatentFeature<f64>;
