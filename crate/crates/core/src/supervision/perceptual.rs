use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::diffusion::sample::stack_batch;
use crate::diffusion::Sample;
use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry};

/// A fixed mapping from a `[B, C, H, W]` batch to feature maps. Each returned
/// feature is a matrix whose rows are grouped by sample.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;

    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var>;
}

/// Pixels as the only feature level.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityFeatures;

impl FeatureExtractor for IdentityFeatures {
    fn id(&self) -> &str {
        "identity"
    }

    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let shape = g.value(x).shape().to_vec();
        let b = shape[0];
        let rest = g.value(x).len() / b;
        vec![g.reshape(x, vec![b, rest])]
    }
}

/// Two frozen, randomly initialized conv levels with leaky activations:
/// 3×3 stride 1, then 3×3 stride 2.
#[derive(Clone, Debug)]
pub struct RandomConvFeatures {
    in_channels: usize,
    widths: [usize; 2],
    kernels: [Tensor; 2],
}

impl RandomConvFeatures {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let widths = [4, 8];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k0 = nn::gaussian_matrix(&mut rng, widths[0], in_channels * 9, (2.0 / (in_channels * 9) as f64).sqrt());
        let k1 = nn::gaussian_matrix(&mut rng, widths[1], widths[0] * 9, (2.0 / (widths[0] * 9) as f64).sqrt());
        Self { in_channels, widths, kernels: [k0, k1] }
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn id(&self) -> &str {
        "fixed-random-conv"
    }

    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let shape = g.value(x).shape().to_vec();
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let rows = g.gather(x, nn::chw_to_rows_index(b, self.in_channels, h, w), vec![b * h * w, self.in_channels]);
        let g0 = ConvGeometry::same(b, self.in_channels, h, w);
        let k0 = g.constant(self.kernels[0].clone());
        let f0 = nn::conv2d(g, rows, &g0, k0);
        let f0 = g.leaky_relu(f0, 0.2);
        let g1 = ConvGeometry { batch: b, channels: self.widths[0], height: h, width: w, kernel: 3, stride: 2, padding: 1 };
        let k1 = g.constant(self.kernels[1].clone());
        let f1 = nn::conv2d(g, f0, &g1, k1);
        let f1 = g.leaky_relu(f1, 0.2);
        vec![f0, f1]
    }
}

/// Resolves an extractor id from the config.
pub fn extractor_from_id(id: &str, in_channels: usize, seed: u64) -> Result<Arc<dyn FeatureExtractor>> {
    match id {
        "identity" => Ok(Arc::new(IdentityFeatures)),
        "fixed-random-conv" => Ok(Arc::new(RandomConvFeatures::new(in_channels, seed))),
        "external-pretrained" => Err(Error::config(
            "supervision.extractor",
            "no pretrained extractor is bundled; implement FeatureExtractor and pass it in directly",
        )),
        other => Err(Error::config("supervision.extractor", format!("unknown extractor `{other}`"))),
    }
}

fn check_batches(generated: &[Sample], real: &[Sample]) -> Result<()> {
    if generated.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if generated.len() != real.len() {
        return Err(Error::ShapeMismatch { expected: vec![generated.len()], actual: vec![real.len()] });
    }
    generated.iter().zip(real).try_for_each(|(a, b)| a.check_same_shape(b))
}

/// `(1/N) Σ_i Σ_levels ‖φ(generated_i) − φ(real_i)‖²` in the graph.
pub fn perceptual_loss_graph(g: &mut Graph, phi: &dyn FeatureExtractor, generated: Var, real: Var) -> Var {
    let n = g.value(generated).shape()[0] as f64;
    let fa = phi.features(g, generated);
    let fb = phi.features(g, real);
    let mut total: Option<Var> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let d = g.sub(a, b);
        let sq = g.mul(d, d);
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    let total = total.expect("extractor returned no features");
    g.scale(total, 1.0 / n)
}

pub fn perceptual_loss(phi: &dyn FeatureExtractor, generated: &[Sample], real: &[Sample]) -> Result<f64> {
    check_batches(generated, real)?;
    let mut g = Graph::new();
    let a = g.constant(stack_batch(generated)?);
    let b = g.constant(stack_batch(real)?);
    let loss = perceptual_loss_graph(&mut g, phi, a, b);
    Ok(g.value(loss).item())
}

/// Mean over feature levels of the squared feature distance divided by the
/// level's element count.
pub fn lpips_proxy(phi: &dyn FeatureExtractor, a: &Sample, b: &Sample) -> Result<f64> {
    a.check_same_shape(b)?;
    let mut g = Graph::new();
    let va = g.constant(stack_batch(std::slice::from_ref(a))?);
    let vb = g.constant(stack_batch(std::slice::from_ref(b))?);
    let fa = phi.features(&mut g, va);
    let fb = phi.features(&mut g, vb);
    let levels = fa.len();
    let total: f64 = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            let (x, y) = (g.value(*x), g.value(*y));
            x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64
        })
        .sum();
    Ok(total / levels as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_hand_values() {
        let phi = IdentityFeatures;
        let g1 = Sample::vector(vec![1.0, 2.0]);
        let r1 = Sample::vector(vec![1.0, 0.0]);
        assert_eq!(perceptual_loss(&phi, &[g1.clone()], &[r1.clone()]).unwrap(), 4.0);
        assert_eq!(perceptual_loss(&phi, &[g1.clone(), r1.clone()], &[r1.clone(), r1.clone()]).unwrap(), 2.0);
        assert_eq!(perceptual_loss(&phi, &[g1.clone()], &[g1.clone()]).unwrap(), 0.0);
        let z = Sample::vector(vec![0.0, 0.0]);
        let o = Sample::vector(vec![1.0, 1.0]);
        assert_eq!(lpips_proxy(&phi, &z, &o).unwrap(), 1.0);
    }

    #[test]
    fn batch_errors() {
        let phi = IdentityFeatures;
        let a = Sample::vector(vec![1.0, 2.0]);
        assert!(perceptual_loss(&phi, &[], &[]).is_err());
        assert!(perceptual_loss(&phi, &[a.clone()], &[]).is_err());
        assert!(perceptual_loss(&phi, &[a.clone()], &[Sample::vector(vec![1.0])]).is_err());
        assert!(lpips_proxy(&phi, &a, &Sample::vector(vec![1.0])).is_err());
    }

    #[test]
    fn random_conv_is_deterministic_and_symmetric() {
        let phi = RandomConvFeatures::new(1, 3);
        let a = Sample::gaussian([1, 6, 6], 1).clamped(-1.0, 1.0);
        let b = Sample::gaussian([1, 6, 6], 2).clamped(-1.0, 1.0);
        let l1 = perceptual_loss(&phi, &[a.clone()], &[b.clone()]).unwrap();
        let l2 = perceptual_loss(&phi, &[b.clone()], &[a.clone()]).unwrap();
        assert!((l1 - l2).abs() < 1e-10);
        assert_eq!(lpips_proxy(&phi, &a, &a).unwrap(), 0.0);
        assert_eq!(lpips_proxy(&phi, &a, &b).unwrap(), lpips_proxy(&phi, &b, &a).unwrap());
        assert!(lpips_proxy(&phi, &a, &b).unwrap() > 0.0);
    }

    #[test]
    fn extractor_ids() {
        assert_eq!(extractor_from_id("identity", 1, 0).unwrap().id(), "identity");
        assert_eq!(extractor_from_id("fixed-random-conv", 1, 0).unwrap().id(), "fixed-random-conv");
        assert!(extractor_from_id("external-pretrained", 1, 0).is_err());
        assert!(extractor_from_id("vgg", 1, 0).is_err());
    }
}
