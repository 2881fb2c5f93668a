//! Base-model training on the synthetic conditional blob dataset.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::diffusion::denoiser::{CondId, ConvDenoiser, NoisePredictor};
use crate::diffusion::sample::{add_noise, stack_batch, Sample};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Adam};
use crate::supervision::BlobParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Trains `model` to predict noise on blob images whose background level is
/// set by the condition (`data[c]` describes condition `c`). Returns the
/// per-step loss.
pub fn pretrain_denoiser(
    model: &mut ConvDenoiser,
    schedule: &NoiseSchedule,
    data: &[BlobParams],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if data.len() != model.vocabulary().len() {
        return Err(Error::invalid("condition_means", "need one entry per vocabulary condition"));
    }
    let shape = model.sample_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut noisy = Vec::with_capacity(cfg.batch);
        let mut eps_all = Vec::with_capacity(cfg.batch);
        let mut conds = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let c = rng.random_range(0..data.len());
            let x0 = data[c].draw(&mut rng, shape);
            let t = rng.random_range(0..schedule.num_steps());
            let eps = Sample::gaussian(shape, rng.random());
            noisy.push(add_noise(&x0, t, &eps, schedule)?);
            eps_all.push(eps);
            conds.push(CondId(c));
            ts.push(t);
        }
        let mut g = Graph::new();
        let w = model.bind(&mut g, true);
        let x = g.constant(stack_batch(&noisy)?);
        let target = g.constant(stack_batch(&eps_all)?);
        let pred = model.forward(&mut g, &w, x, &conds, &ts);
        let loss = g.mse(pred, target);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step: step as u64, what: "diffusion loss".into() });
        }
        losses.push(value);
        let grads = g.backward(loss);
        let mut named: BTreeMap<String, Tensor> = w
            .iter()
            .filter_map(|(name, _)| grads.get(w.var(name)).map(|t| (name.clone(), t.clone())))
            .collect();
        clip_grad_norm(&mut named, 1.0);
        opt.step(model.weights_mut(), &named);
    }
    Ok(losses)
}
