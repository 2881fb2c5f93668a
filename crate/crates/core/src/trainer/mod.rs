//! Slider training: dynamic loss weights, the combined objective, and the
//! alternating discriminator/adapter updates.

mod checkpoint;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::base::base_model;
use crate::config::AppConfig;
use crate::diffusion::sample::{stack_batch, unstack_batch};
use crate::diffusion::sampler::{initial_noise, sample_in_graph};
use crate::diffusion::{add_noise, sample_images, ConvDenoiser, NoisePredictor, NoiseSchedule, Sample};
use crate::error::{Error, Result};
use crate::guidance::{guided_targets, triplet_loss_graph, ConceptTriplet};
use crate::lora::{apply_stack, bind_adapted, init_adapter, AdapterStack, AdapterVars, LoraAdapter};
use crate::optim::{clip_grad_norm, Adam};
use crate::supervision::discriminator::generator_adversarial_loss_graph;
use crate::supervision::perceptual::perceptual_loss_graph;
use crate::supervision::{extractor_from_id, Discriminator, DiscriminatorConfig, FeatureExtractor, RealImageSource};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta, SliderCheckpoint, FORMAT_VERSION};

/// Sigmoid hand-off from perceptual to triplet supervision plus a constant
/// adversarial weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeightSchedule {
    pub t0: u64,
    pub steepness: f64,
    pub lambda_adv: f64,
}

impl LossWeightSchedule {
    pub fn new(t0: u64, steepness: f64, lambda_adv: f64) -> Result<Self> {
        if t0 < 1 {
            return Err(Error::config("schedule.t0", "must be at least 1"));
        }
        if !(steepness.is_finite() && steepness > 0.0) {
            return Err(Error::config("schedule.steepness", "must be a finite positive number"));
        }
        if !(lambda_adv.is_finite() && lambda_adv >= 0.0) {
            return Err(Error::config("schedule.lambda_adv", "must be finite and non-negative"));
        }
        Ok(Self { t0, steepness, lambda_adv })
    }

    pub fn from_config(cfg: &AppConfig) -> Result<Self> {
        Self::new(cfg.schedule.t0, cfg.schedule.steepness, cfg.schedule.lambda_adv)
    }
}

/// `(λ_perp, λ_triplet)` at step `t`: `λ_perp = 1 / (1 + e^{k(t - t0)})`.
pub fn loss_weights(t: u64, schedule: &LossWeightSchedule) -> (f64, f64) {
    let perp = 1.0 / (1.0 + (schedule.steepness * (t as f64 - schedule.t0 as f64)).exp());
    (perp, 1.0 - perp)
}

/// `λ_triplet·L_triplet + λ_perp·L_perp + λ_adv·L_adv`.
pub fn total_loss(l_triplet: f64, l_perp: f64, l_adv: f64, t: u64, schedule: &LossWeightSchedule) -> Result<f64> {
    for (name, v) in [("triplet loss", l_triplet), ("perceptual loss", l_perp), ("adversarial loss", l_adv)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let (perp, triplet) = loss_weights(t, schedule);
    Ok(triplet * l_triplet + perp * l_perp + schedule.lambda_adv * l_adv)
}

/// One completed training step. Disabled loss terms are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub triplet: f64,
    pub perceptual: Option<f64>,
    pub adversarial: Option<f64>,
    pub discriminator: Option<f64>,
    pub lambda_triplet: f64,
    pub lambda_perp: f64,
    pub lambda_adv: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Triplet loss on the fixed probe set, on evaluation steps.
    pub probe_triplet: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::invalid("step", "history steps must increase"));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// `(step, probe triplet loss)` for every evaluation step.
    pub fn probe_curve(&self) -> Vec<(u64, f64)> {
        self.records.iter().filter_map(|r| r.probe_triplet.map(|p| (r.step, p))).collect()
    }

    /// Comma-separated table with a header row; absent values are empty.
    pub fn to_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut out = String::from(
            "step,triplet,perceptual,adversarial,discriminator,lambda_triplet,lambda_perp,lambda_adv,total,grad_norm,probe_triplet\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.step,
                r.triplet,
                opt(r.perceptual),
                opt(r.adversarial),
                opt(r.discriminator),
                r.lambda_triplet,
                r.lambda_perp,
                r.lambda_adv,
                r.total,
                r.grad_norm,
                opt(r.probe_triplet)
            ));
        }
        out
    }
}

/// Everything one step consumes, derived from the run seed and step index.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInputs {
    pub gen_seeds: Vec<u64>,
    pub timesteps: Vec<usize>,
    pub noise_seeds: Vec<u64>,
    pub real_seed: u64,
}

/// Frozen per-step tensors shared by the discriminator and adapter updates.
#[derive(Clone, Debug)]
pub struct PreparedStep {
    pub step: u64,
    pub inputs: StepInputs,
    /// Base-model generations for `gen_seeds`.
    pub base_gen: Vec<Sample>,
    pub x_t: Vec<Sample>,
    pub target: Tensor,
    pub real: Vec<Sample>,
}

struct ProbeSet {
    x_t: Vec<Sample>,
    timesteps: Vec<usize>,
    target: Vec<Sample>,
}

const PROBE_SIZE: usize = 8;

/// Loss handles built in one graph for the adapter update.
pub struct GeneratorGraph {
    pub triplet: Var,
    pub perceptual: Option<Var>,
    pub adversarial: Option<Var>,
    pub total: Var,
}

pub struct TrainerState {
    cfg: AppConfig,
    base: Arc<ConvDenoiser>,
    schedule: NoiseSchedule,
    triplet: ConceptTriplet,
    weights: LossWeightSchedule,
    phi: Arc<dyn FeatureExtractor>,
    real: RealImageSource,
    adapter: LoraAdapter,
    discriminator: Discriminator,
    opt_adapter: Adam,
    opt_disc: Adam,
    probe: ProbeSet,
    step: u64,
    history: TrainHistory,
}

impl TrainerState {
    pub fn new(cfg: &AppConfig) -> Result<Self> {
        cfg.validate()?;
        Self::with_base(cfg, base_model(cfg)?)
    }

    /// Uses a caller-provided frozen base model instead of the pretrained one.
    pub fn with_base(cfg: &AppConfig, base: Arc<ConvDenoiser>) -> Result<Self> {
        let schedule = cfg.noise_schedule()?;
        let triplet = cfg.concept.prompts().resolve(base.vocabulary())?;
        let weights = LossWeightSchedule::from_config(cfg)?;
        let shape = base.sample_shape();
        let phi = extractor_from_id(&cfg.supervision.extractor, shape[0], cfg.supervision.extractor_seed)?;
        let real = RealImageSource::from_spec(&cfg.supervision.real_source, shape)?;
        if real.shape() != shape {
            return Err(Error::ShapeMismatch { expected: shape.to_vec(), actual: real.shape().to_vec() });
        }
        let t = &cfg.training;
        let mut adapter = init_adapter(&cfg.concept.name, &base, &cfg.lora.selector, cfg.lora.rank, t.seed)?;
        adapter.default_scale = cfg.lora.alpha_default;
        adapter.concept = cfg.concept.prompts();
        let discriminator = Discriminator::new(
            DiscriminatorConfig {
                channels: shape[0],
                height: shape[1],
                width: shape[2],
                base_width: cfg.supervision.disc_width,
                spectral_norm: cfg.supervision.spectral_norm,
            },
            t.seed.wrapping_add(0x5eed),
        )?;
        let probe = build_probe(&base, &schedule, &triplet, cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            base,
            schedule,
            triplet,
            weights,
            phi,
            real,
            adapter,
            discriminator,
            opt_adapter: Adam::new(t.lr_adapter),
            opt_disc: Adam::new(t.lr_disc),
            probe,
            step: 0,
            history: TrainHistory::default(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut LoraAdapter {
        &mut self.adapter
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn base(&self) -> &Arc<ConvDenoiser> {
        &self.base
    }

    pub fn noise_schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &AppConfig {
        &self.cfg
    }

    /// Seeds for step `step` from an independent ChaCha stream.
    pub fn draw_step_inputs(&self, step: u64) -> StepInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.training.seed);
        rng.set_stream(step + 1);
        let n = self.cfg.training.batch;
        StepInputs {
            gen_seeds: (0..n).map(|_| rng.random()).collect(),
            timesteps: (0..n).map(|_| rng.random_range(0..self.schedule.num_steps())).collect(),
            noise_seeds: (0..n).map(|_| rng.random()).collect(),
            real_seed: rng.random(),
        }
    }

    pub fn prepare(&self, step: u64, inputs: StepInputs) -> Result<PreparedStep> {
        let n = inputs.gen_seeds.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let shape = self.base.sample_shape();
        let conds = vec![self.triplet.c_target; n];
        let base_gen = sample_images(&*self.base, &self.schedule, &conds, &inputs.gen_seeds, self.cfg.model.sample_steps)?;
        let x_t = base_gen
            .iter()
            .zip(&inputs.timesteps)
            .zip(&inputs.noise_seeds)
            .map(|((x0, &t), &s)| add_noise(x0, t, &Sample::gaussian(shape, s), &self.schedule))
            .collect::<Result<Vec<_>>>()?;
        let target = guided_targets(&*self.base, &x_t, &self.triplet, &inputs.timesteps, self.cfg.training.eta)?;
        let real = if self.cfg.supervision.adv { self.real.sample_batch(n, inputs.real_seed)? } else { Vec::new() };
        Ok(PreparedStep { step, inputs, base_gen, x_t, target: stack_batch(&target)?, real })
    }

    /// Adapter generations at scale 1 for `prep`'s seeds, inside `g`.
    fn adapted_generation(&self, g: &mut Graph, vars: &AdapterVars, prep: &PreparedStep) -> Result<Var> {
        let n = prep.inputs.gen_seeds.len();
        let conds = vec![self.triplet.c_target; n];
        let bound = bind_adapted(&self.base, g, &[(vars, 1.0)], true);
        let x_init = g.constant(initial_noise(self.base.sample_shape(), &prep.inputs.gen_seeds)?);
        sample_in_graph(g, &self.schedule, self.cfg.model.sample_steps, x_init, |g, x, t| {
            Ok(self.base.forward(g, &bound, x, &conds, &vec![t; n]))
        })
    }

    /// Builds the weighted objective for `prep` against the current
    /// discriminator. `generation` reuses an already built adapted sample.
    pub fn generator_graph(
        &self,
        g: &mut Graph,
        vars: &AdapterVars,
        prep: &PreparedStep,
        generation: Option<Var>,
    ) -> Result<GeneratorGraph> {
        let sup = &self.cfg.supervision;
        let n = prep.x_t.len();
        let bound = bind_adapted(&self.base, g, &[(vars, 1.0)], true);
        let x_t = g.constant(stack_batch(&prep.x_t)?);
        let pred = self.base.forward(g, &bound, x_t, &vec![self.triplet.c_target; n], &prep.inputs.timesteps);
        let triplet = triplet_loss_graph(g, pred, &prep.target)?;

        let (lambda_perp, lambda_triplet) = loss_weights(prep.step, &self.weights);
        let generation = match generation {
            Some(v) => Some(v),
            None if sup.adv || sup.perp => Some(self.adapted_generation(g, vars, prep)?),
            None => None,
        };
        let perceptual = match (sup.perp, generation) {
            (true, Some(gen)) => {
                let reference = g.constant(stack_batch(&prep.base_gen)?);
                Some(perceptual_loss_graph(g, &*self.phi, gen, reference))
            }
            _ => None,
        };
        let adversarial = match (sup.adv, generation) {
            (true, Some(gen)) => {
                let dvars = self.discriminator.bind(g, false);
                Some(generator_adversarial_loss_graph(g, &self.discriminator, &dvars, gen))
            }
            _ => None,
        };

        let mut total = g.scale(triplet, lambda_triplet);
        if let Some(p) = perceptual {
            let term = g.scale(p, lambda_perp);
            total = g.add(total, term);
        }
        if let Some(a) = adversarial {
            let term = g.scale(a, self.weights.lambda_adv);
            total = g.add(total, term);
        }
        Ok(GeneratorGraph { triplet, perceptual, adversarial, total })
    }

    /// Value of the weighted objective for an arbitrary adapter; the
    /// discriminator and step inputs are held fixed.
    pub fn generator_loss(&self, adapter: &LoraAdapter, prep: &PreparedStep) -> Result<f64> {
        let mut g = Graph::new();
        let vars = adapter.bind(&mut g, false);
        let parts = self.generator_graph(&mut g, &vars, prep, None)?;
        Ok(g.value(parts.total).item())
    }

    /// Analytic gradient of [`Self::generator_loss`] keyed like
    /// [`LoraAdapter::named_factors`].
    pub fn generator_gradient(&self, adapter: &LoraAdapter, prep: &PreparedStep) -> Result<BTreeMap<String, Tensor>> {
        let mut g = Graph::new();
        let vars = adapter.bind(&mut g, true);
        let parts = self.generator_graph(&mut g, &vars, prep, None)?;
        let grads = g.backward(parts.total);
        Ok(vars.collect_grads(&grads))
    }

    /// Discriminator update (if enabled), then one adapter update.
    pub fn train_step(&mut self, inputs: StepInputs) -> Result<&StepRecord> {
        let step = self.step;
        let guard = |what: &str, v: f64| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Diverged { step: step + 1, what: what.to_owned() })
            }
        };
        let prep = self.prepare(step, inputs)?;
        let sup = self.cfg.supervision.clone();
        let mut g = Graph::new();
        let vars = self.adapter.bind(&mut g, true);
        let generation = if sup.adv || sup.perp { Some(self.adapted_generation(&mut g, &vars, &prep)?) } else { None };

        let mut d_loss = None;
        if let (true, Some(gen)) = (sup.adv, generation) {
            let fake = unstack_batch(g.value(gen))?;
            let loss = self
                .discriminator
                .train_step(&mut self.opt_disc, &prep.real, &fake, self.cfg.training.clip_norm)
                .map_err(|_| Error::Diverged { step: step + 1, what: "discriminator loss".into() })?;
            d_loss = Some(guard("discriminator loss", loss)?);
        }

        let parts = self.generator_graph(&mut g, &vars, &prep, generation)?;
        let triplet = guard("triplet loss", g.value(parts.triplet).item())?;
        let perceptual = parts.perceptual.map(|v| guard("perceptual loss", g.value(v).item())).transpose()?;
        let adversarial = parts.adversarial.map(|v| guard("adversarial loss", g.value(v).item())).transpose()?;
        let total = guard("total loss", g.value(parts.total).item())?;

        let grads = g.backward(parts.total);
        let mut named = vars.collect_grads(&grads);
        let grad_norm = guard("gradient norm", clip_grad_norm(&mut named, self.cfg.training.clip_norm))?;
        let mut params = self.adapter.named_factors();
        self.opt_adapter.step(&mut params, &named);
        self.adapter.set_named_factors(params);

        self.step += 1;
        let every = self.cfg.training.eval_every;
        let probe_triplet = if every > 0 && self.step % every == 0 { Some(self.probe_loss()?) } else { None };
        let (lambda_perp, lambda_triplet) = loss_weights(step, &self.weights);
        self.history.push(StepRecord {
            step: self.step,
            triplet,
            perceptual,
            adversarial,
            discriminator: d_loss,
            lambda_triplet,
            lambda_perp,
            lambda_adv: self.weights.lambda_adv,
            total,
            grad_norm,
            probe_triplet,
        })?;
        Ok(self.history.last().expect("just pushed"))
    }

    /// Triplet loss of the current adapter (scale 1) on the fixed probe set.
    pub fn probe_loss(&self) -> Result<f64> {
        let model = apply_stack(&self.base, &AdapterStack::new(vec![(Arc::new(self.adapter.clone()), 1.0)])?)?;
        let n = self.probe.x_t.len();
        let pred = model.predict_noise_batch(&self.probe.x_t, &vec![self.triplet.c_target; n], &self.probe.timesteps)?;
        let mut sum = 0.0;
        for (p, t) in pred.iter().zip(&self.probe.target) {
            sum += crate::guidance::triplet_loss(p, t)?;
        }
        Ok(sum / n as f64)
    }

    pub fn into_checkpoint(mut self) -> SliderCheckpoint {
        self.adapter.round_to_f32();
        SliderCheckpoint::new(self.adapter, &self.cfg, self.history)
    }
}

fn build_probe(base: &ConvDenoiser, schedule: &NoiseSchedule, triplet: &ConceptTriplet, cfg: &AppConfig) -> Result<ProbeSet> {
    let seeds: Vec<u64> = (0..PROBE_SIZE as u64).map(|i| 0x9e37_79b9 ^ (cfg.training.seed.wrapping_mul(31) + i)).collect();
    let base_gen = sample_images(base, schedule, &vec![triplet.c_target; PROBE_SIZE], &seeds, cfg.model.sample_steps)?;
    let n = schedule.num_steps();
    let timesteps: Vec<usize> = (0..PROBE_SIZE).map(|i| (2 * i + 1) * n / (2 * PROBE_SIZE)).collect();
    let shape = base.sample_shape();
    let x_t = base_gen
        .iter()
        .zip(&timesteps)
        .zip(&seeds)
        .map(|((x0, &t), &s)| add_noise(x0, t, &Sample::gaussian(shape, s.wrapping_add(1)), schedule))
        .collect::<Result<Vec<_>>>()?;
    let target = guided_targets(base, &x_t, triplet, &timesteps, cfg.training.eta)?;
    Ok(ProbeSet { x_t, timesteps, target })
}

/// Trains a slider per `cfg` and returns the end-of-run checkpoint.
pub fn train_slider(cfg: &AppConfig) -> Result<SliderCheckpoint> {
    train_slider_with(cfg, |_| {})
}

/// [`train_slider`] with a callback after every step.
pub fn train_slider_with(cfg: &AppConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<SliderCheckpoint> {
    let mut state = TrainerState::new(cfg)?;
    for step in 0..cfg.training.steps {
        let inputs = state.draw_step_inputs(step);
        let record = state.train_step(inputs)?;
        on_step(record);
    }
    Ok(state.into_checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched(t0: u64, k: f64) -> LossWeightSchedule {
        LossWeightSchedule::new(t0, k, 0.0).unwrap()
    }

    #[test]
    fn weight_examples() {
        assert_eq!(loss_weights(100, &sched(100, 0.1)), (0.5, 0.5));
        let (p, _) = loss_weights(77, &sched(100, 0.1));
        assert!((p - 0.908877).abs() < 1e-6, "{p}");
        let (p, t) = loss_weights(1100, &sched(100, 0.1));
        assert!(p < 1e-10 && (t - 1.0).abs() < 1e-10);
    }

    #[test]
    fn total_loss_examples() {
        let s = sched(10, 0.3);
        assert_eq!(total_loss(2.0, 4.0, 0.0, 10, &s).unwrap(), 3.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 3, &s).unwrap(), 0.0);
        let with_adv = LossWeightSchedule::new(10, 0.3, 0.25).unwrap();
        assert_eq!(total_loss(2.0, 4.0, 2.0, 10, &with_adv).unwrap(), 3.5);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0, &s).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(LossWeightSchedule::new(0, 0.1, 0.0).is_err());
        assert!(LossWeightSchedule::new(10, 0.0, 0.0).is_err());
        assert!(LossWeightSchedule::new(10, -0.1, 0.0).is_err());
        assert!(LossWeightSchedule::new(10, 0.1, -1.0).is_err());
    }

    #[test]
    fn history_csv_and_ordering() {
        let rec = |step| StepRecord {
            step,
            triplet: 0.5,
            perceptual: None,
            adversarial: Some(0.25),
            discriminator: None,
            lambda_triplet: 0.75,
            lambda_perp: 0.25,
            lambda_adv: 0.1,
            total: 1.0,
            grad_norm: 2.0,
            probe_triplet: None,
        };
        let mut h = TrainHistory::default();
        h.push(rec(1)).unwrap();
        h.push(rec(2)).unwrap();
        assert!(h.push(rec(2)).is_err());
        let csv = h.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "1,0.5,,0.25,,0.75,0.25,0.1,1,2,");
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_decrease(t0 in 1u64..500, k in 0.001f64..2.0, t in 0u64..5000) {
            let s = sched(t0, k);
            let (p, q) = loss_weights(t, &s);
            prop_assert!((p + q - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&p));
            let (p2, _) = loss_weights(t + 1, &s);
            prop_assert!(p2 <= p);
        }
    }
}
