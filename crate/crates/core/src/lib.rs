//! Zero-shot anomaly detection lab.
//!
//! The crate covers the full pipeline at desk scale: procedural synthesis
//! of (normal image, anomalous image, mask) triplets with feature-distance
//! filtering, a small vision-transformer backbone with low-rank adapters,
//! an anomaly decoder with a confidence head, the confidence-weighted
//! training objective, AUROC/F1-max evaluation, and checkpointing.

pub mod backbone;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod extract;
pub mod gradcheck;
pub mod heads;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod pngio;
pub mod trainer;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{GradTape, Tensor};
