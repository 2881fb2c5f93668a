//! Deterministic sampler: one Gaussian draw at the top of the schedule, then
//! no injected noise. Each step estimates `x0` from the predicted noise,
//! clamps it to `[-1, 1]`, and re-noises it to the next (lower) level with the
//! same predicted noise.

use crate::autodiff::{Graph, Tensor, Var};
use crate::diffusion::denoiser::{CondId, NoisePredictor};
use crate::diffusion::sample::{stack_batch, unstack_batch, Sample};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;

/// `[B, C, H, W]` starting noise, sample `i` drawn from `seeds[i]`.
pub fn initial_noise(shape: [usize; 3], seeds: &[u64]) -> Result<Tensor> {
    let samples: Vec<Sample> = seeds.iter().map(|&s| Sample::gaussian(shape, s)).collect();
    stack_batch(&samples)
}

/// Runs the sampler inside `g` so gradients can flow through `predict`.
pub fn sample_in_graph<F>(g: &mut Graph, schedule: &NoiseSchedule, steps: usize, x_init: Var, mut predict: F) -> Result<Var>
where
    F: FnMut(&mut Graph, Var, usize) -> Result<Var>,
{
    let ts = schedule.sampling_timesteps(steps)?;
    let mut x = x_init;
    for (i, &t) in ts.iter().enumerate() {
        let level = schedule.level(t)?;
        let eps = predict(g, x, t)?;
        let noise_part = g.scale(eps, level.sqrt());
        let signal = g.sub(x, noise_part);
        let x0 = g.scale(signal, 1.0 / (1.0 - level).sqrt());
        let x0 = g.clamp(x0, -1.0, 1.0);
        x = match ts.get(i + 1) {
            Some(&next) => {
                let next_level = schedule.level(next)?;
                let a = g.scale(x0, (1.0 - next_level).sqrt());
                let b = g.scale(eps, next_level.sqrt());
                g.add(a, b)
            }
            None => x0,
        };
    }
    Ok(x)
}

/// Generates one sample per `(cond, seed)` pair.
pub fn sample_images<M>(model: &M, schedule: &NoiseSchedule, conds: &[CondId], seeds: &[u64], steps: usize) -> Result<Vec<Sample>>
where
    M: NoisePredictor + ?Sized,
{
    for c in conds {
        model.vocabulary().check(*c)?;
    }
    let mut g = Graph::new();
    let x = g.constant(initial_noise(model.sample_shape(), seeds)?);
    let out = sample_in_graph(&mut g, schedule, steps, x, |g, x, t| {
        let xs = unstack_batch(g.value(x))?;
        let ts = vec![t; xs.len()];
        let eps = model.predict_noise_batch(&xs, conds, &ts)?;
        Ok(g.constant(stack_batch(&eps)?))
    })?;
    unstack_batch(g.value(out))
}

pub fn sample_image<M>(model: &M, schedule: &NoiseSchedule, cond: CondId, seed: u64, steps: usize) -> Result<Sample>
where
    M: NoisePredictor + ?Sized,
{
    Ok(sample_images(model, schedule, &[cond], &[seed], steps)?.remove(0))
}
