//! Supervision signals beyond the triplet target: a perceptual feature loss,
//! a discriminator, and the real-image source it is trained against.

pub mod discriminator;
pub mod perceptual;
pub mod source;

pub use discriminator::{
    discriminator_loss, generator_adversarial_loss, Discriminator, DiscriminatorConfig, DiscriminatorVars,
};
pub use perceptual::{extractor_from_id, lpips_proxy, perceptual_loss, FeatureExtractor, IdentityFeatures, RandomConvFeatures};
pub use source::{sample_real_batch, BlobParams, RealImageSource, SourceSpec};
