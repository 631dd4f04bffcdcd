//! Sketch colorization GANs with an adversarial segmentation loss.
//!
//! A frozen segmentation network maps real and generated color images to
//! per-pixel class probabilities; auxiliary patch discriminators judge those
//! maps (all classes, and a foreground/background collapse) alongside the
//! baseline paired or unpaired translation GAN.

pub mod advsegloss;
pub mod config;
pub mod data;
pub mod edges;
pub mod error;
pub mod eval;
pub mod gan;
pub mod image_io;
pub mod nn;
pub mod run;
pub mod segmentation;

pub use config::{
    active_discriminators, total_objective, ColorImage, LossWeights, Scheme, SegDiscriminator,
    SketchImage, TrainConfig, Variant, VariantConfig,
};
pub use error::{Error, Result};

/// Digest of the library sources this binary was built from.
pub const SOURCE_DIGEST: &str = env!("ADVSEG_SOURCE_DIGEST");
