//! Low-rank adapters ("sliders"): per-layer factor pairs whose product is
//! added to frozen base weights at a user-chosen scale.
//!
//! For a base weight of shape `d × k` an adapter of rank `r` stores
//! `down` (`d × r`) and `up` (`r × k`); the weight delta is `down · up`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::diffusion::denoiser::{BoundWeights, LowRankTerm, WeightBinding};
use crate::diffusion::{sample_image, CondId, ConvDenoiser, NoiseSchedule, Sample};
use crate::error::{Error, Result};
use crate::guidance::ConceptPrompts;
use crate::nn;

/// Default selector: the condition-injection projections.
pub const DEFAULT_SELECTOR: &str = "*.cond_proj";

/// Comma-separated glob patterns over layer names; `*` matches any run of
/// characters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSelector {
    patterns: Vec<String>,
}

impl LayerSelector {
    pub fn parse(spec: &str) -> Self {
        let patterns = spec.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::to_owned).collect();
        Self { patterns }
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| glob_match(p.as_bytes(), name.as_bytes()))
    }

    pub fn as_string(&self) -> String {
        self.patterns.join(",")
    }
}

fn glob_match(pattern: &[u8], text: &[u8]) -> bool {
    match pattern.split_first() {
        None => text.is_empty(),
        Some((b'*', rest)) => (0..=text.len()).any(|i| glob_match(rest, &text[i..])),
        Some((c, rest)) => text.first() == Some(c) && glob_match(rest, &text[1..]),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactors {
    pub down: Tensor,
    pub up: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub rank: usize,
    pub default_scale: f64,
    pub concept: ConceptPrompts,
    pub selector: String,
    layers: BTreeMap<String, LowRankFactors>,
}

/// Creates a zero-delta adapter over every base layer `selector` matches:
/// `up` starts at zero, `down` is Gaussian with standard deviation `1/rank`.
pub fn init_adapter(name: &str, base: &ConvDenoiser, selector: &str, rank: usize, seed: u64) -> Result<LoraAdapter> {
    let sel = LayerSelector::parse(selector);
    let targets: Vec<&str> = base.matrix_layers().into_iter().filter(|n| sel.matches(n)).collect();
    if targets.is_empty() {
        return Err(Error::EmptySelector(selector.to_owned()));
    }
    if rank == 0 {
        return Err(Error::invalid("rank", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = BTreeMap::new();
    for layer in targets {
        let w = &base.weights()[layer];
        let (d, k) = (w.rows(), w.cols());
        if rank > d.min(k) {
            return Err(Error::RankTooLarge { layer: layer.to_owned(), rank, limit: d.min(k) });
        }
        let down = nn::gaussian_matrix(&mut rng, d, rank, 1.0 / rank as f64);
        let up = Tensor::zeros(vec![rank, k]);
        layers.insert(layer.to_owned(), LowRankFactors { down, up });
    }
    Ok(LoraAdapter {
        name: name.to_owned(),
        rank,
        default_scale: 1.0,
        concept: ConceptPrompts::default(),
        selector: sel.as_string(),
        layers,
    })
}

impl LoraAdapter {
    /// Assembles an adapter from stored factors, checking shapes against `rank`.
    pub fn from_parts(
        name: String,
        rank: usize,
        default_scale: f64,
        concept: ConceptPrompts,
        selector: String,
        layers: BTreeMap<String, LowRankFactors>,
    ) -> Result<Self> {
        for f in layers.values() {
            if f.down.cols() != rank || f.up.rows() != rank {
                return Err(Error::ShapeMismatch {
                    expected: vec![f.down.rows(), rank, f.up.cols()],
                    actual: vec![f.down.rows(), f.down.cols(), f.up.rows(), f.up.cols()],
                });
            }
        }
        Ok(Self { name, rank, default_scale, concept, selector, layers })
    }

    pub fn layers(&self) -> &BTreeMap<String, LowRankFactors> {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut BTreeMap<String, LowRankFactors> {
        &mut self.layers
    }

    pub fn targets(&self, layer: &str) -> bool {
        self.layers.contains_key(layer)
    }

    pub fn factors(&self, layer: &str) -> Result<&LowRankFactors> {
        self.layers.get(layer).ok_or_else(|| Error::UntargetedLayer(layer.to_owned()))
    }

    /// `down · up`, a `d × k` matrix of rank at most `self.rank`.
    pub fn delta_weight(&self, layer: &str) -> Result<Tensor> {
        let f = self.factors(layer)?;
        Ok(f.down.matmul(&f.up))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.values().map(|f| f.down.len() + f.up.len()).sum()
    }

    /// Rounds every factor entry to the nearest `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for f in self.layers.values_mut() {
            for v in f.down.data_mut().iter_mut().chain(f.up.data_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Flat name → tensor view of the factors, keyed `<layer>.down` / `<layer>.up`.
    pub fn named_factors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (layer, f) in &self.layers {
            out.insert(format!("{layer}.down"), f.down.clone());
            out.insert(format!("{layer}.up"), f.up.clone());
        }
        out
    }

    pub fn set_named_factors(&mut self, named: BTreeMap<String, Tensor>) {
        for (layer, f) in self.layers.iter_mut() {
            if let Some(d) = named.get(&format!("{layer}.down")) {
                f.down = d.clone();
            }
            if let Some(u) = named.get(&format!("{layer}.up")) {
                f.up = u.clone();
            }
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AdapterVars {
        let mut map = BTreeMap::new();
        for (layer, f) in &self.layers {
            let (down, up) = if trainable {
                (g.param(f.down.clone()), g.param(f.up.clone()))
            } else {
                (g.constant(f.down.clone()), g.constant(f.up.clone()))
            };
            map.insert(layer.clone(), (down, up));
        }
        AdapterVars { map }
    }
}

/// `base_weight + scale · down · up`. A zero scale returns `base_weight` bit for bit.
pub fn merge(base_weight: &Tensor, adapter: &LoraAdapter, layer: &str, scale: f64) -> Result<Tensor> {
    let delta = adapter.delta_weight(layer)?;
    if delta.shape() != base_weight.shape() {
        return Err(Error::ShapeMismatch { expected: base_weight.shape().to_vec(), actual: delta.shape().to_vec() });
    }
    let mut out = base_weight.clone();
    if scale != 0.0 {
        out.add_scaled(&delta, scale);
    }
    Ok(out)
}

/// Graph variables for an adapter's factors.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    map: BTreeMap<String, (Var, Var)>,
}

impl AdapterVars {
    pub fn iter(&self) -> impl Iterator<Item = (&String, &(Var, Var))> {
        self.map.iter()
    }

    /// Gradient of each factor keyed like [`LoraAdapter::named_factors`].
    pub fn collect_grads(&self, grads: &crate::autodiff::Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (layer, (down, up)) in &self.map {
            let gd = grads.get(*down).cloned();
            let gu = grads.get(*up).cloned();
            if let Some(gd) = gd {
                out.insert(format!("{layer}.down"), gd);
            }
            if let Some(gu) = gu {
                out.insert(format!("{layer}.up"), gu);
            }
        }
        out
    }
}

/// Binds `base` as constants with each adapter injected at its scale.
/// `merged` selects the merged-weight path over the two-path form.
pub fn bind_adapted(base: &ConvDenoiser, g: &mut Graph, adapters: &[(&AdapterVars, f64)], merged: bool) -> BoundWeights {
    let mut bound = base.bind(g, false);
    for (vars, scale) in adapters {
        for (layer, &(down, up)) in vars.iter() {
            let term = LowRankTerm { down, up, scale: *scale };
            let Some(binding) = bound.get_mut(layer) else { continue };
            match binding {
                WeightBinding::Direct(w) => {
                    *binding = WeightBinding::Adapted { base: *w, terms: vec![term], merged };
                }
                WeightBinding::Adapted { terms, .. } => terms.push(term),
            }
        }
    }
    bound
}

/// Ordered adapters with their scales.
#[derive(Clone, Debug, Default)]
pub struct AdapterStack {
    entries: Vec<(Arc<LoraAdapter>, f64)>,
}

impl AdapterStack {
    pub fn new(entries: Vec<(Arc<LoraAdapter>, f64)>) -> Result<Self> {
        for (i, (a, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(b, _)| b.name == a.name) {
                return Err(Error::DuplicateSlider(a.name.clone()));
            }
        }
        Ok(Self { entries })
    }

    /// Skips the duplicate-name check; the same adapter may appear twice.
    pub fn new_unchecked(entries: Vec<(Arc<LoraAdapter>, f64)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(Arc<LoraAdapter>, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, base: &ConvDenoiser) -> Result<()> {
        for (adapter, scale) in &self.entries {
            if !scale.is_finite() {
                return Err(Error::NonFinite(format!("scale of slider `{}`", adapter.name)));
            }
            for (layer, f) in adapter.layers() {
                let w = base.weight(layer).ok_or_else(|| Error::UntargetedLayer(layer.clone()))?;
                if w.rows() != f.down.rows() || w.cols() != f.up.cols() {
                    return Err(Error::ShapeMismatch {
                        expected: w.shape().to_vec(),
                        actual: vec![f.down.rows(), f.up.cols()],
                    });
                }
            }
        }
        Ok(())
    }
}

/// A new model whose targeted weights are `W0 + Σ scale_i · ΔW_i`. Terms are
/// summed in (name, scale) order so the result does not depend on stack order.
pub fn apply_stack(base: &ConvDenoiser, stack: &AdapterStack) -> Result<ConvDenoiser> {
    stack.validate(base)?;
    let mut entries: Vec<&(Arc<LoraAdapter>, f64)> = stack.entries.iter().collect();
    entries.sort_by(|a, b| a.0.name.cmp(&b.0.name).then(a.1.total_cmp(&b.1)));
    let mut model = base.clone();
    for (adapter, scale) in entries {
        if *scale == 0.0 {
            continue;
        }
        for layer in adapter.layers().keys() {
            let delta = adapter.delta_weight(layer)?;
            model.weights_mut().get_mut(layer).expect("validated layer").add_scaled(&delta, *scale);
        }
    }
    Ok(model)
}

/// One sample per scale, all from the same seed and prompt.
pub fn scale_sweep(
    base: &ConvDenoiser,
    adapter: &Arc<LoraAdapter>,
    scales: &[f64],
    prompt: CondId,
    seed: u64,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Vec<Sample>> {
    if scales.is_empty() {
        return Err(Error::invalid("scales", "must not be empty"));
    }
    scales
        .iter()
        .map(|&s| {
            let model = apply_stack(base, &AdapterStack::new(vec![(adapter.clone(), s)])?)?;
            sample_image(&model, schedule, prompt, seed, steps)
        })
        .collect()
}
