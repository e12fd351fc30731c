//! Domain-guided conditional diffusion for unsupervised domain adaptation.
//!
//! A label-conditioned denoiser is trained on a labeled source domain plus a
//! pseudo-labeled target domain, target-like samples are generated with a
//! noisy domain classifier steering a second-order ODE solver, and a UDA task
//! model is retrained on the source domain augmented with those samples.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod uda;

pub use checkpoint::Checkpoint;
pub use data::{Domain, DomainDataset, LabeledPoint};
pub use diffusion::{Condition, ConditionedDenoiser, DenoiserConfig, Labeler, NoisePredictor, TrainConfig};
pub use error::{Error, Result};
pub use guidance::{DomainClassifier, GuidanceConfig, GuidanceRule, GuidanceSource, NoisyClassifier};
pub use schedule::NoiseSchedule;
