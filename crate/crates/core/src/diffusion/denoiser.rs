use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::diffusion::sample::{stack_batch, unstack_batch, Sample};
use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry};

/// Index of a condition in a model's vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CondId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("vocab", "must contain at least one condition"));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::invalid("vocab", format!("duplicate condition `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn id(&self, name: &str) -> Result<CondId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(CondId)
            .ok_or_else(|| Error::UnknownCondition(name.to_owned()))
    }

    pub fn name(&self, id: CondId) -> Result<&str> {
        self.names.get(id.0).map(String::as_str).ok_or_else(|| Error::UnknownCondition(format!("#{}", id.0)))
    }

    pub fn check(&self, id: CondId) -> Result<()> {
        self.name(id).map(|_| ())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Anything that predicts the noise in `x_t` under condition `c` at step `t`.
pub trait NoisePredictor {
    fn sample_shape(&self) -> [usize; 3];

    fn vocabulary(&self) -> &Vocabulary;

    fn predict_noise(&self, x_t: &Sample, cond: CondId, t: usize) -> Result<Sample>;

    /// Batched prediction, one condition and timestep per sample.
    fn predict_noise_batch(&self, x_t: &[Sample], conds: &[CondId], ts: &[usize]) -> Result<Vec<Sample>> {
        x_t.iter()
            .zip(conds)
            .zip(ts)
            .map(|((x, &c), &t)| self.predict_noise(x, c, t))
            .collect()
    }
}

/// Test double: ignores its input and returns the condition's scalar
/// embedding broadcast over the sample.
#[derive(Clone, Debug)]
pub struct ConstantDenoiser {
    pub shape: [usize; 3],
    pub vocab: Vocabulary,
    pub embedding: Vec<f64>,
}

impl NoisePredictor for ConstantDenoiser {
    fn sample_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn predict_noise(&self, x_t: &Sample, cond: CondId, _t: usize) -> Result<Sample> {
        self.vocab.check(cond)?;
        Ok(Sample::filled(x_t.shape(), self.embedding[cond.0]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub blocks: usize,
    pub vocab: Vec<String>,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{key}"), "must be positive"));
            }
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::config("model.time_dim", "must be a positive even number"));
        }
        Vocabulary::new(self.vocab.clone()).map_err(|e| Error::config("model.vocab", e.to_string()))?;
        Ok(())
    }
}

/// One rank-r term `scale * down · up` added to a base weight.
#[derive(Clone, Copy, Debug)]
pub struct LowRankTerm {
    pub down: Var,
    pub up: Var,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub enum WeightBinding {
    Direct(Var),
    /// `merged` forms `W0 + Σ scale·down·up` before the product; otherwise the
    /// low-rank terms run as a separate path `x·upᵀ·downᵀ`.
    Adapted { base: Var, terms: Vec<LowRankTerm>, merged: bool },
}

/// Graph handles for every weight of a model in one forward pass.
#[derive(Clone, Debug, Default)]
pub struct BoundWeights {
    layers: BTreeMap<String, WeightBinding>,
}

impl BoundWeights {
    pub fn insert(&mut self, name: impl Into<String>, binding: WeightBinding) {
        self.layers.insert(name.into(), binding);
    }

    pub fn get(&self, name: &str) -> Option<&WeightBinding> {
        self.layers.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut WeightBinding> {
        self.layers.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &WeightBinding)> {
        self.layers.iter()
    }

    /// The raw variable of an un-adapted weight (biases, embedding tables).
    pub fn var(&self, name: &str) -> Var {
        match &self.layers[name] {
            WeightBinding::Direct(v) => *v,
            WeightBinding::Adapted { base, .. } => *base,
        }
    }

    /// `x · Wᵀ` for the named `d × k` weight.
    pub fn linear(&self, g: &mut Graph, name: &str, x: Var) -> Var {
        match &self.layers[name] {
            WeightBinding::Direct(w) => g.matmul_t(x, *w),
            WeightBinding::Adapted { base, terms, merged: true } => {
                let mut w = *base;
                for term in terms {
                    let delta = g.matmul(term.down, term.up);
                    let delta = g.scale(delta, term.scale);
                    w = g.add(w, delta);
                }
                g.matmul_t(x, w)
            }
            WeightBinding::Adapted { base, terms, merged: false } => {
                let mut y = g.matmul_t(x, *base);
                for term in terms {
                    let low = g.matmul_t(x, term.up);
                    let side = g.matmul_t(low, term.down);
                    let side = g.scale(side, term.scale);
                    y = g.add(y, side);
                }
                y
            }
        }
    }
}

pub const COND_EMBED: &str = "cond_embed";
pub const OUT_CONV: &str = "out.conv";
pub const OUT_BIAS: &str = "out.bias";

pub fn block_layer(block: usize, part: &str) -> String {
    format!("block{block}.{part}")
}

/// Small convolutional noise predictor. Each block is a 3×3 convolution plus
/// per-sample condition and timestep projections added to every pixel, then
/// SiLU; blocks after the first are residual.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvDenoiser {
    config: DenoiserConfig,
    vocab: Vocabulary,
    weights: BTreeMap<String, Tensor>,
}

impl ConvDenoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::new(config.vocab.clone())?;
        let (c, e, h) = (config.channels, config.embed_dim, config.hidden);
        let mut weights = BTreeMap::new();
        weights.insert(COND_EMBED.to_owned(), nn::gaussian_matrix(&mut rng, vocab.len(), e, 1.0));
        for b in 0..config.blocks {
            let fan_in = if b == 0 { c * 9 } else { h * 9 };
            weights.insert(block_layer(b, "conv"), nn::gaussian_matrix(&mut rng, h, fan_in, (1.0 / fan_in as f64).sqrt()));
            weights.insert(block_layer(b, "bias"), Tensor::zeros(vec![1, h]));
            weights.insert(block_layer(b, "cond_proj"), nn::gaussian_matrix(&mut rng, h, e, (1.0 / e as f64).sqrt()));
            weights.insert(
                block_layer(b, "time_proj"),
                nn::gaussian_matrix(&mut rng, h, config.time_dim, (1.0 / config.time_dim as f64).sqrt()),
            );
        }
        weights.insert(OUT_CONV.to_owned(), nn::gaussian_matrix(&mut rng, c, h * 9, 0.1 * (1.0 / (h * 9) as f64).sqrt()));
        weights.insert(OUT_BIAS.to_owned(), Tensor::zeros(vec![1, c]));
        Ok(Self { config, vocab, weights })
    }

    pub fn from_weights(config: DenoiserConfig, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        for (name, w) in &reference.weights {
            let got = weights.get(name).ok_or_else(|| Error::CorruptCheckpoint(format!("missing weight `{name}`")))?;
            if got.shape() != w.shape() {
                return Err(Error::ShapeMismatch { expected: w.shape().to_vec(), actual: got.shape().to_vec() });
            }
        }
        if weights.len() != reference.weights.len() {
            return Err(Error::CorruptCheckpoint("unexpected extra weights".into()));
        }
        Ok(Self { vocab: reference.vocab, config, weights })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.get(name)
    }

    pub(crate) fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.weights
    }

    /// Names of the 2-D weight matrices a low-rank adapter may target.
    pub fn matrix_layers(&self) -> Vec<&str> {
        self.weights
            .keys()
            .filter(|n| n.ends_with(".conv") || n.ends_with("_proj"))
            .map(String::as_str)
            .collect()
    }

    /// Rounds every weight to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for w in self.weights.values_mut() {
            for v in w.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundWeights {
        let mut bound = BoundWeights::default();
        for (name, w) in &self.weights {
            let v = if trainable { g.param(w.clone()) } else { g.constant(w.clone()) };
            bound.insert(name.clone(), WeightBinding::Direct(v));
        }
        bound
    }

    fn time_embedding(&self, ts: &[usize]) -> Tensor {
        let half = self.config.time_dim / 2;
        let mut data = Vec::with_capacity(ts.len() * self.config.time_dim);
        for &t in ts {
            let t = t as f64;
            for j in 0..half {
                let freq = (-(1000f64.ln()) * j as f64 / half as f64).exp();
                data.push((t * freq).sin());
            }
            for j in 0..half {
                let freq = (-(1000f64.ln()) * j as f64 / half as f64).exp();
                data.push((t * freq).cos());
            }
        }
        Tensor::matrix(ts.len(), self.config.time_dim, data)
    }

    /// Batched forward on `x` of shape `[B, C, H, W]`; returns the same shape.
    pub fn forward(&self, g: &mut Graph, w: &BoundWeights, x: Var, conds: &[CondId], ts: &[usize]) -> Var {
        let cfg = &self.config;
        let batch = conds.len();
        let (c, hgt, wid, hid) = (cfg.channels, cfg.height, cfg.width, cfg.hidden);
        let pixels = hgt * wid;
        let cond_index: Rc<[isize]> = conds
            .iter()
            .flat_map(|id| (0..cfg.embed_dim).map(move |j| (id.0 * cfg.embed_dim + j) as isize))
            .collect();
        let emb = g.gather(w.var(COND_EMBED), cond_index, vec![batch, cfg.embed_dim]);
        let temb = g.constant(self.time_embedding(ts));

        let mut h = g.gather(x, nn::chw_to_rows_index(batch, c, hgt, wid), vec![batch * pixels, c]);
        for b in 0..cfg.blocks {
            let in_ch = if b == 0 { c } else { hid };
            let geom = ConvGeometry::same(batch, in_ch, hgt, wid);
            let patches = g.gather(h, geom.im2col_index(), vec![geom.out_rows(), geom.patch_len()]);
            let mut y = w.linear(g, &block_layer(b, "conv"), patches);
            y = nn::add_row_bias(g, y, w.var(&block_layer(b, "bias")));
            let cond = w.linear(g, &block_layer(b, "cond_proj"), emb);
            let time = w.linear(g, &block_layer(b, "time_proj"), temb);
            let inject = g.add(cond, time);
            y = nn::add_sample_bias(g, y, inject, pixels);
            y = g.silu(y);
            h = if b == 0 { y } else { g.add(h, y) };
        }
        let geom = ConvGeometry::same(batch, hid, hgt, wid);
        let patches = g.gather(h, geom.im2col_index(), vec![geom.out_rows(), geom.patch_len()]);
        let out = w.linear(g, OUT_CONV, patches);
        let out = nn::add_row_bias(g, out, w.var(OUT_BIAS));
        g.gather(out, nn::rows_to_chw_index(batch, c, hgt, wid), vec![batch, c, hgt, wid])
    }

    fn check_inputs(&self, x_t: &[Sample], conds: &[CondId], ts: &[usize]) -> Result<()> {
        if x_t.len() != conds.len() || x_t.len() != ts.len() {
            return Err(Error::invalid("batch", "samples, conditions and timesteps differ in length"));
        }
        for s in x_t {
            if s.shape() != self.sample_shape() {
                return Err(Error::ShapeMismatch { expected: self.sample_shape().to_vec(), actual: s.shape().to_vec() });
            }
        }
        conds.iter().try_for_each(|c| self.vocab.check(*c))
    }
}

impl NoisePredictor for ConvDenoiser {
    fn sample_shape(&self) -> [usize; 3] {
        [self.config.channels, self.config.height, self.config.width]
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn predict_noise(&self, x_t: &Sample, cond: CondId, t: usize) -> Result<Sample> {
        Ok(self.predict_noise_batch(std::slice::from_ref(x_t), &[cond], &[t])?.remove(0))
    }

    fn predict_noise_batch(&self, x_t: &[Sample], conds: &[CondId], ts: &[usize]) -> Result<Vec<Sample>> {
        self.check_inputs(x_t, conds, ts)?;
        if x_t.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let w = self.bind(&mut g, false);
        let x = g.constant(stack_batch(x_t)?);
        let out = self.forward(&mut g, &w, x, conds, ts);
        unstack_batch(g.value(out))
    }
}
