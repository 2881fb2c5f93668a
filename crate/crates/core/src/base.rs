//! The frozen base model: initialized and pretrained deterministically from
//! the config's model section, then memoized per process.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::config::AppConfig;
use crate::diffusion::{pretrain_denoiser, ConvDenoiser, PretrainConfig};
use crate::error::Result;
use crate::supervision::BlobParams;

/// Builds the base model from scratch. Weights are rounded to `f32` so the
/// result is stable under any later serialization.
pub fn build_base_model(cfg: &AppConfig) -> Result<ConvDenoiser> {
    let m = &cfg.model;
    let mut model = ConvDenoiser::new(cfg.denoiser_config(), m.seed)?;
    let data: Vec<BlobParams> = m.condition_means.iter().map(|&mean| BlobParams::with_mean(mean)).collect();
    let pre = PretrainConfig { steps: m.pretrain_steps, batch: m.pretrain_batch, lr: m.pretrain_lr, seed: m.seed.wrapping_add(1) };
    pretrain_denoiser(&mut model, &cfg.noise_schedule()?, &data, &pre)?;
    model.round_to_f32();
    Ok(model)
}

/// [`build_base_model`], cached by model-section hash.
pub fn base_model(cfg: &AppConfig) -> Result<Arc<ConvDenoiser>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<ConvDenoiser>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = cfg.model_hash();
    // Held across the build so concurrent callers wait instead of duplicating work.
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(m) = guard.get(&key) {
        return Ok(m.clone());
    }
    let model = Arc::new(build_base_model(cfg)?);
    guard.insert(key, model.clone());
    Ok(model)
}
