//! Triplet guidance target: push the `c_target` prediction toward `c_plus`
//! and away from `c_minus`, and the regression loss an adapter trains on.
//!
//! Scores are proportional to negated noise predictions, so the composed
//! target is `ε(c_t) + η·(ε(c₊) − ε(c₋))` evaluated on the frozen base model.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::diffusion::sample::mean_squared_difference;
use crate::diffusion::{CondId, NoisePredictor, Sample, Vocabulary};
use crate::error::{Error, Result};

/// The three prompt strings of a slider, e.g. `bright` / `dark` / `neutral`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptPrompts {
    pub positive: String,
    pub negative: String,
    pub target: String,
}

impl ConceptPrompts {
    pub fn new(positive: &str, negative: &str, target: &str) -> Self {
        Self { positive: positive.into(), negative: negative.into(), target: target.into() }
    }

    pub fn resolve(&self, vocab: &Vocabulary) -> Result<ConceptTriplet> {
        ConceptTriplet::new(vocab.id(&self.positive)?, vocab.id(&self.negative)?, vocab.id(&self.target)?, vocab)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConceptTriplet {
    pub c_plus: CondId,
    pub c_minus: CondId,
    pub c_target: CondId,
}

impl ConceptTriplet {
    /// Equal positive and negative conditions are allowed (the guidance delta
    /// is then identically zero) but logged.
    pub fn new(c_plus: CondId, c_minus: CondId, c_target: CondId, vocab: &Vocabulary) -> Result<Self> {
        for c in [c_plus, c_minus, c_target] {
            vocab.check(c)?;
        }
        if c_plus == c_minus {
            log::warn!("concept triplet has identical positive and negative condition `{}`", vocab.name(c_plus)?);
        }
        Ok(Self { c_plus, c_minus, c_target })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub eta: f64,
}

impl GuidanceConfig {
    pub fn new(eta: f64) -> Result<Self> {
        if !eta.is_finite() || eta < 0.0 {
            return Err(Error::invalid("eta", "must be finite and non-negative"));
        }
        Ok(Self { eta })
    }
}

/// `ε(x_t, c_t) + η·(ε(x_t, c₊) − ε(x_t, c₋))` on the frozen model.
pub fn guided_target<M>(frozen: &M, x_t: &Sample, triplet: &ConceptTriplet, t: usize, eta: f64) -> Result<Sample>
where
    M: NoisePredictor + ?Sized,
{
    Ok(guided_targets(frozen, std::slice::from_ref(x_t), triplet, &[t], eta)?.remove(0))
}

/// Batched [`guided_target`], one timestep per sample.
pub fn guided_targets<M>(frozen: &M, x_t: &[Sample], triplet: &ConceptTriplet, ts: &[usize], eta: f64) -> Result<Vec<Sample>>
where
    M: NoisePredictor + ?Sized,
{
    let n = x_t.len();
    let mut xs = Vec::with_capacity(3 * n);
    let mut conds = Vec::with_capacity(3 * n);
    let mut all_ts = Vec::with_capacity(3 * n);
    for c in [triplet.c_target, triplet.c_plus, triplet.c_minus] {
        xs.extend_from_slice(x_t);
        conds.extend(std::iter::repeat_n(c, n));
        all_ts.extend_from_slice(ts);
    }
    let preds = frozen.predict_noise_batch(&xs, &conds, &all_ts)?;
    let (base, rest) = preds.split_at(n);
    let (plus, minus) = rest.split_at(n);
    base.iter()
        .zip(plus)
        .zip(minus)
        .map(|((b, p), m)| {
            let data = b
                .data()
                .iter()
                .zip(p.data())
                .zip(m.data())
                .map(|((b, p), m)| b + eta * (p - m))
                .collect();
            Sample::new(b.shape(), data)
        })
        .collect()
}

/// Mean squared error between the adapted prediction and the guided target.
pub fn triplet_loss(eps_pred: &Sample, eps_target: &Sample) -> Result<f64> {
    eps_pred.check_same_shape(eps_target)?;
    Ok(mean_squared_difference(eps_pred.data(), eps_target.data()))
}

/// Graph form of [`triplet_loss`]; the target enters as a constant.
pub fn triplet_loss_graph(g: &mut Graph, eps_pred: Var, eps_target: &Tensor) -> Result<Var> {
    if g.value(eps_pred).shape() != eps_target.shape() {
        return Err(Error::ShapeMismatch {
            expected: eps_target.shape().to_vec(),
            actual: g.value(eps_pred).shape().to_vec(),
        });
    }
    let target = g.constant(eps_target.clone());
    Ok(g.mse(eps_pred, target))
}

/// Diagnostic adjustment `ε + η_step · ∂L/∂ε`. Note the sign: this moves
/// along the loss gradient, not against it. Training never calls this.
pub fn denoising_update_step(eps_pred: &Sample, grad: &Sample, eta_step: f64) -> Result<Sample> {
    eps_pred.check_same_shape(grad)?;
    let data = eps_pred.data().iter().zip(grad.data()).map(|(e, g)| e + eta_step * g).collect();
    Sample::new(eps_pred.shape(), data)
}
