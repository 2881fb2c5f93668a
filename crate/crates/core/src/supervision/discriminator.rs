use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, Tensor, Var};
use crate::diffusion::sample::stack_batch;
use crate::diffusion::Sample;
use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry};
use crate::optim::{clip_grad_norm, Adam};

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
    pub spectral_norm: bool,
}

/// Three conv blocks (stride 2, 2, 1) with leaky activations, global mean
/// pooling and a linear head producing one real/fake logit per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    weights: BTreeMap<String, Tensor>,
    /// Left singular vector estimates for spectral normalization.
    power_vectors: BTreeMap<String, Tensor>,
}

struct Block {
    name: &'static str,
    stride: usize,
}

const BLOCKS: [Block; 3] = [
    Block { name: "d0", stride: 2 },
    Block { name: "d1", stride: 2 },
    Block { name: "d2", stride: 1 },
];

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.base_width == 0 || config.channels == 0 || config.height == 0 || config.width == 0 {
            return Err(Error::config("supervision.disc_width", "discriminator dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.base_width;
        let widths = [(config.channels, w), (w, 2 * w), (2 * w, 2 * w)];
        let mut weights = BTreeMap::new();
        for (block, (cin, cout)) in BLOCKS.iter().zip(widths) {
            let fan_in = cin * 9;
            weights.insert(format!("{}.conv", block.name), nn::gaussian_matrix(&mut rng, cout, fan_in, (2.0 / fan_in as f64).sqrt()));
            weights.insert(format!("{}.bias", block.name), Tensor::zeros(vec![1, cout]));
        }
        weights.insert("head.weight".into(), nn::gaussian_matrix(&mut rng, 1, 2 * w, (1.0 / (2 * w) as f64).sqrt()));
        weights.insert("head.bias".into(), Tensor::zeros(vec![1, 1]));
        let mut power_vectors = BTreeMap::new();
        if config.spectral_norm {
            for (name, t) in &weights {
                if name.ends_with(".conv") || name == "head.weight" {
                    let u = nn::gaussian_matrix(&mut rng, t.rows(), 1, 1.0);
                    power_vectors.insert(name.clone(), normalized(&u));
                }
            }
        }
        Ok(Self { config, weights, power_vectors })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.weights
    }

    /// Graph handles for all weights; spectrally normalized weights are
    /// divided by `uᵀ W v` with `u`, `v` held constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DiscriminatorVars {
        let mut raw = BTreeMap::new();
        let mut effective = BTreeMap::new();
        for (name, w) in &self.weights {
            let v = if trainable { g.param(w.clone()) } else { g.constant(w.clone()) };
            raw.insert(name.clone(), v);
            let eff = match self.power_vectors.get(name) {
                Some(u) => {
                    let right = normalized(&w.transpose().matmul(u));
                    let right = g.constant(right);
                    let u = g.constant(u.clone());
                    let wv = g.matmul(v, right);
                    let uwv = g.mul(u, wv);
                    let sigma = g.sum(uwv);
                    let inv = g.recip(sigma);
                    g.mul_scalar(v, inv)
                }
                None => v,
            };
            effective.insert(name.clone(), eff);
        }
        DiscriminatorVars { raw, effective }
    }

    /// `[B, 1]` logits for a `[B, C, H, W]` batch.
    pub fn forward(&self, g: &mut Graph, vars: &DiscriminatorVars, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        let (b, c, mut h, mut w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut rows = g.gather(x, nn::chw_to_rows_index(b, c, h, w), vec![b * h * w, c]);
        let mut channels = c;
        for block in &BLOCKS {
            let geom = ConvGeometry { batch: b, channels, height: h, width: w, kernel: 3, stride: block.stride, padding: 1 };
            let kernel = vars.effective[&format!("{}.conv", block.name)];
            let y = nn::conv2d(g, rows, &geom, kernel);
            let y = nn::add_row_bias(g, y, vars.effective[&format!("{}.bias", block.name)]);
            rows = g.leaky_relu(y, LEAK);
            channels = g.value(kernel).rows();
            h = geom.out_height();
            w = geom.out_width();
        }
        let pool = g.constant(nn::mean_pool_matrix(b, h * w));
        let pooled = g.matmul(pool, rows);
        let logits = g.matmul_t(pooled, vars.effective["head.weight"]);
        nn::add_row_bias(g, logits, vars.effective["head.bias"])
    }

    pub fn logits(&self, batch: &[Sample]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(stack_batch(batch)?);
        let out = self.forward(&mut g, &vars, x);
        Ok(g.value(out).data().to_vec())
    }

    /// One power-iteration refinement of each spectral-norm vector.
    pub fn refresh_power_vectors(&mut self) {
        for (name, u) in self.power_vectors.iter_mut() {
            let w = &self.weights[name];
            let v = normalized(&w.transpose().matmul(u));
            *u = normalized(&w.matmul(&v));
        }
    }

    /// One optimizer step on the real-vs-fake loss. Returns the loss before
    /// the update.
    pub fn train_step(&mut self, opt: &mut Adam, real: &[Sample], fake: &[Sample], clip_norm: f64) -> Result<f64> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.refresh_power_vectors();
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let r = g.constant(stack_batch(real)?);
        let f = g.constant(stack_batch(fake)?);
        let loss = discriminator_loss_graph(&mut g, self, &vars, r, f);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("discriminator loss".into()));
        }
        let grads = g.backward(loss);
        let mut named = vars.collect_grads(&grads);
        clip_grad_norm(&mut named, clip_norm);
        opt.step(&mut self.weights, &named);
        Ok(value)
    }

    /// Fraction of `real` scored positive plus `fake` scored negative.
    pub fn accuracy(&self, real: &[Sample], fake: &[Sample]) -> Result<f64> {
        let r = self.logits(real)?;
        let f = self.logits(fake)?;
        let correct = r.iter().filter(|z| **z > 0.0).count() + f.iter().filter(|z| **z < 0.0).count();
        Ok(correct as f64 / (r.len() + f.len()) as f64)
    }
}

fn normalized(t: &Tensor) -> Tensor {
    let n = t.sq_norm().sqrt().max(1e-12);
    t.map(|x| x / n)
}

pub struct DiscriminatorVars {
    raw: BTreeMap<String, Var>,
    effective: BTreeMap<String, Var>,
}

impl DiscriminatorVars {
    pub fn raw(&self) -> &BTreeMap<String, Var> {
        &self.raw
    }

    pub fn collect_grads(&self, grads: &crate::autodiff::Gradients) -> BTreeMap<String, Tensor> {
        self.raw
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|t| (n.clone(), t.clone())))
            .collect()
    }
}

/// `½·(mean softplus(−z_real) + mean softplus(z_fake))`: binary cross-entropy
/// with labels real → 1, fake → 0.
pub fn discriminator_loss_graph(g: &mut Graph, d: &Discriminator, vars: &DiscriminatorVars, real: Var, fake: Var) -> Var {
    let zr = d.forward(g, vars, real);
    let zf = d.forward(g, vars, fake);
    let neg = g.scale(zr, -1.0);
    let lr = g.softplus(neg);
    let lr = g.mean(lr);
    let lf = g.softplus(zf);
    let lf = g.mean(lf);
    let sum = g.add(lr, lf);
    g.scale(sum, 0.5)
}

/// Non-saturating generator loss `mean softplus(−z_fake)` = `−mean log σ(D(fake))`.
pub fn generator_adversarial_loss_graph(g: &mut Graph, d: &Discriminator, vars: &DiscriminatorVars, fake: Var) -> Var {
    let z = d.forward(g, vars, fake);
    let neg = g.scale(z, -1.0);
    let l = g.softplus(neg);
    g.mean(l)
}

pub fn bce_from_logits(real_logits: &[f64], fake_logits: &[f64]) -> Result<f64> {
    if real_logits.is_empty() || fake_logits.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let lr = real_logits.iter().map(|z| softplus(-z)).sum::<f64>() / real_logits.len() as f64;
    let lf = fake_logits.iter().map(|z| softplus(*z)).sum::<f64>() / fake_logits.len() as f64;
    Ok(0.5 * (lr + lf))
}

pub fn non_saturating_from_logits(fake_logits: &[f64]) -> Result<f64> {
    if fake_logits.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(fake_logits.iter().map(|z| softplus(-z)).sum::<f64>() / fake_logits.len() as f64)
}

pub fn discriminator_loss(d: &Discriminator, real: &[Sample], fake: &[Sample]) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    bce_from_logits(&d.logits(real)?, &d.logits(fake)?)
}

pub fn generator_adversarial_loss(d: &Discriminator, fake: &[Sample]) -> Result<f64> {
    if fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    non_saturating_from_logits(&d.logits(fake)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supervision::RealImageSource;
    use std::f64::consts::LN_2;

    fn config(spectral_norm: bool) -> DiscriminatorConfig {
        DiscriminatorConfig { channels: 1, height: 8, width: 8, base_width: 4, spectral_norm }
    }

    fn zeroed(spectral_norm: bool) -> Discriminator {
        let mut d = Discriminator::new(config(spectral_norm), 1).unwrap();
        for v in d.weights_mut().get_mut("head.weight").unwrap().data_mut() {
            *v = 0.0;
        }
        d
    }

    #[test]
    fn chance_level_losses() {
        let d = zeroed(false);
        let batch = vec![Sample::gaussian([1, 8, 8], 1), Sample::gaussian([1, 8, 8], 2)];
        assert!((discriminator_loss(&d, &batch, &batch).unwrap() - LN_2).abs() < 1e-12);
        assert!((generator_adversarial_loss(&d, &batch).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_limits() {
        assert!(bce_from_logits(&[40.0, 50.0], &[-40.0, -60.0]).unwrap() < 1e-15);
        assert!(bce_from_logits(&[-40.0, -50.0], &[40.0, 60.0]).unwrap() >= 10.0);
        assert!(non_saturating_from_logits(&[40.0]).unwrap() < 1e-15);
        assert!(non_saturating_from_logits(&[-40.0]).unwrap() >= 10.0);
        assert!(bce_from_logits(&[], &[1.0]).is_err());
        assert!(non_saturating_from_logits(&[]).is_err());
    }

    #[test]
    fn head_bias_drives_confident_scores() {
        let mut d = zeroed(false);
        let batch = vec![Sample::gaussian([1, 8, 8], 1)];
        d.weights_mut().get_mut("head.bias").unwrap().data_mut()[0] = 30.0;
        assert!(generator_adversarial_loss(&d, &batch).unwrap() < 1e-12);
        d.weights_mut().get_mut("head.bias").unwrap().data_mut()[0] = -30.0;
        assert!(generator_adversarial_loss(&d, &batch).unwrap() > 10.0);
    }

    #[test]
    fn generator_loss_decreases_with_logit() {
        let sweep: Vec<f64> = (-20..=20).map(|i| non_saturating_from_logits(&[i as f64 * 0.5]).unwrap()).collect();
        assert!(sweep.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn empty_batches_rejected() {
        let d = zeroed(false);
        let batch = vec![Sample::gaussian([1, 8, 8], 1)];
        assert!(matches!(discriminator_loss(&d, &[], &batch), Err(Error::EmptyBatch)));
        assert!(matches!(generator_adversarial_loss(&d, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn learns_separable_sources_with_and_without_spectral_norm() {
        for sn in [false, true] {
            let mut d = Discriminator::new(config(sn), 3).unwrap();
            let mut opt = Adam::new(1e-2);
            let real = RealImageSource::gaussian(0.5, 0.5, [1, 8, 8]);
            let fake = RealImageSource::gaussian(-0.5, 0.5, [1, 8, 8]);
            for step in 0..60 {
                let r = real.sample_batch(8, 2 * step).unwrap();
                let f = fake.sample_batch(8, 2 * step + 1).unwrap();
                d.train_step(&mut opt, &r, &f, 1.0).unwrap();
            }
            let acc = d.accuracy(&real.sample_batch(50, 10_000).unwrap(), &fake.sample_batch(50, 10_001).unwrap()).unwrap();
            assert!(acc >= 0.9, "spectral_norm={sn}: accuracy {acc}");
        }
    }
}
