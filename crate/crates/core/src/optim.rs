use std::collections::BTreeMap;

use crate::autodiff::Tensor;

/// Adaptive-moment optimizer over a named parameter set.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(param) = params.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(grad.shape().to_vec()), Tensor::zeros(grad.shape().to_vec())));
            for (((p, g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = BTreeMap::from([("x".to_owned(), Tensor::scalar(3.0))]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = params["x"].item();
            let grads = BTreeMap::from([("x".to_owned(), Tensor::scalar(2.0 * (x - 1.0)))]);
            opt.step(&mut params, &grads);
        }
        assert!((params["x"].item() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut grads = BTreeMap::from([
            ("a".to_owned(), Tensor::scalar(3.0)),
            ("b".to_owned(), Tensor::scalar(4.0)),
        ]);
        assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
        assert!((grads["a"].item() - 0.6).abs() < 1e-12);
        assert!((grads["b"].item() - 0.8).abs() < 1e-12);
    }
}
