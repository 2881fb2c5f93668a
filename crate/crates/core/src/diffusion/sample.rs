use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

/// One image (or toy field) in `[channels, height, width]` layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Sample {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let [channels, height, width] = shape;
        if channels * height * width != data.len() {
            return Err(Error::ShapeMismatch { expected: shape.to_vec(), actual: vec![data.len()] });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample entry".into()));
        }
        Ok(Self { channels, height, width, data })
    }

    /// A flat 1×1×n sample, handy for small hand-worked cases.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new([1, 1, n], data).expect("finite vector")
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Self {
        Self::new(shape, vec![value; shape.iter().product()]).expect("finite fill")
    }

    /// Unit Gaussian noise drawn from a seeded ChaCha stream.
    pub fn gaussian(shape: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { channels: shape[0], height: shape[1], width: shape[2], data }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn check_same_shape(&self, other: &Sample) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch { expected: self.shape().to_vec(), actual: other.shape().to_vec() })
        }
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Self {
        Self { data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(), ..self.clone() }
    }
}

/// Stacks samples of identical shape into a `[B, C, H, W]` tensor.
pub fn stack_batch(samples: &[Sample]) -> Result<Tensor> {
    let first = samples.first().ok_or(Error::EmptyBatch)?;
    let mut data = Vec::with_capacity(first.len() * samples.len());
    for s in samples {
        first.check_same_shape(s)?;
        data.extend_from_slice(s.data());
    }
    let [c, h, w] = first.shape();
    Ok(Tensor::new(vec![samples.len(), c, h, w], data))
}

/// Splits a `[B, C, H, W]` tensor back into samples.
pub fn unstack_batch(batch: &Tensor) -> Result<Vec<Sample>> {
    let shape = batch.shape();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::ShapeMismatch { expected: vec![0, 0, 0, 0], actual: shape.to_vec() });
    };
    let n = c * h * w;
    (0..b).map(|i| Sample::new([c, h, w], batch.data()[i * n..(i + 1) * n].to_vec())).collect()
}

/// Forward noising: `sqrt(1 - level_t) * x0 + sqrt(level_t) * eps`.
pub fn add_noise(x0: &Sample, t: usize, eps: &Sample, schedule: &NoiseSchedule) -> Result<Sample> {
    x0.check_same_shape(eps)?;
    let level = schedule.level(t)?;
    let (a, b) = ((1.0 - level).sqrt(), level.sqrt());
    let data = x0.data.iter().zip(&eps.data).map(|(x, e)| a * x + b * e).collect();
    Sample::new(x0.shape(), data)
}

/// Mean squared error between true and predicted noise.
pub fn diffusion_loss(eps_true: &Sample, eps_pred: &Sample) -> Result<f64> {
    eps_true.check_same_shape(eps_pred)?;
    Ok(mean_squared_difference(eps_true.data(), eps_pred.data()))
}

pub(crate) fn mean_squared_difference(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}
