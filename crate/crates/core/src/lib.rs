//! Low-rank concept sliders for a small conditional diffusion model, trained
//! against a composed guidance target with optional perceptual and
//! adversarial supervision.

pub mod autodiff;
pub mod base;
pub mod config;
pub mod diffusion;
pub mod engine;
pub mod eval;
pub mod error;
pub mod guidance;
pub mod image_io;
pub mod lora;
pub mod nn;
pub mod optim;
pub mod service;
pub mod supervision;
pub mod trainer;

pub use error::{Error, Result};
