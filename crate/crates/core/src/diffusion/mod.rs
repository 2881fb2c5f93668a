//! Conditional denoising diffusion at desk scale: noise schedule, forward
//! noising, a small conv noise predictor and a deterministic sampler.

pub mod denoiser;
pub mod pretrain;
pub mod sample;
pub mod sampler;
pub mod schedule;

pub use denoiser::{ConstantDenoiser, CondId, ConvDenoiser, DenoiserConfig, NoisePredictor, Vocabulary};
pub use pretrain::{pretrain_denoiser, PretrainConfig};
pub use sample::{add_noise, diffusion_loss, Sample};
pub use sampler::{sample_image, sample_images};
pub use schedule::{make_noise_schedule, NoiseSchedule, ScheduleKind};
