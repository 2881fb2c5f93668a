//! Read-only inference state shared by the CLI, the HTTP service and the C
//! interface: the base model plus a catalog of loaded sliders.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::base::base_model;
use crate::config::AppConfig;
use crate::diffusion::{sample_image, ConvDenoiser, NoisePredictor, NoiseSchedule, Sample};
use crate::error::{Error, Result};
use crate::guidance::ConceptPrompts;
use crate::lora::{apply_stack, AdapterStack, LoraAdapter};
use crate::trainer::{load_checkpoint, SliderCheckpoint};

/// Catalog entry advertised to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliderInfo {
    pub name: String,
    pub concept: ConceptPrompts,
    pub rank: usize,
    pub default_alpha: f64,
    pub alpha_range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliderSetting {
    pub name: String,
    pub scale: f64,
}

/// Output of one generation. `base` is filled when requested or free.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub edited: Sample,
    pub base: Option<Sample>,
    /// True when no slider contributes (empty stack or all scales zero).
    pub is_base: bool,
    pub applied: Vec<SliderSetting>,
}

pub struct SliderEngine {
    cfg: AppConfig,
    base: Arc<ConvDenoiser>,
    schedule: NoiseSchedule,
    sliders: BTreeMap<String, Arc<LoraAdapter>>,
}

impl SliderEngine {
    pub fn new(cfg: &AppConfig) -> Result<Self> {
        cfg.validate()?;
        Self::with_base(cfg, base_model(cfg)?)
    }

    pub fn with_base(cfg: &AppConfig, base: Arc<ConvDenoiser>) -> Result<Self> {
        Ok(Self { cfg: cfg.clone(), schedule: cfg.noise_schedule()?, base, sliders: BTreeMap::new() })
    }

    pub fn config(&self) -> &AppConfig {
        &self.cfg
    }

    pub fn base(&self) -> &Arc<ConvDenoiser> {
        &self.base
    }

    pub fn noise_schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn add_checkpoint(&mut self, checkpoint: SliderCheckpoint) -> Result<String> {
        checkpoint.check_compatible(&self.cfg)?;
        let name = checkpoint.name().to_owned();
        if self.sliders.contains_key(&name) {
            return Err(Error::DuplicateSlider(name));
        }
        AdapterStack::new(vec![(Arc::new(checkpoint.adapter.clone()), 0.0)])?.validate(&self.base)?;
        self.sliders.insert(name.clone(), Arc::new(checkpoint.adapter));
        Ok(name)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<String> {
        self.add_checkpoint(load_checkpoint(path)?)
    }

    /// Loads every `*.sfck` file in `dir` in file-name order. Unreadable or
    /// incompatible files are skipped and returned with their errors.
    pub fn load_dir(&mut self, dir: &Path) -> Result<Vec<(PathBuf, Error)>> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "sfck"))
            .collect();
        paths.sort();
        let mut skipped = Vec::new();
        for p in paths {
            if let Err(e) = self.load_checkpoint(&p) {
                log::warn!("skipping checkpoint {}: {e}", p.display());
                skipped.push((p, e));
            }
        }
        Ok(skipped)
    }

    pub fn slider_names(&self) -> Vec<String> {
        self.sliders.keys().cloned().collect()
    }

    pub fn catalog(&self) -> Vec<SliderInfo> {
        self.sliders
            .values()
            .map(|a| SliderInfo {
                name: a.name.clone(),
                concept: a.concept.clone(),
                rank: a.rank,
                default_alpha: a.default_scale,
                alpha_range: self.cfg.serve.alpha_range,
            })
            .collect()
    }

    /// Generates `prompt` from `seed` with the given sliders applied. The
    /// result does not depend on slider order.
    pub fn generate(
        &self,
        prompt: &str,
        seed: u64,
        steps: Option<usize>,
        sliders: &[SliderSetting],
        include_base: bool,
    ) -> Result<Generation> {
        let cond = self.base.vocabulary().id(prompt)?;
        let steps = steps.unwrap_or(self.cfg.model.sample_steps);
        let cap = self.cfg.serve.max_steps.min(self.schedule.num_steps());
        if steps == 0 || steps > cap {
            return Err(Error::invalid("steps", format!("must be in 1..={cap}, got {steps}")));
        }
        let mut entries = Vec::with_capacity(sliders.len());
        for (i, s) in sliders.iter().enumerate() {
            if !s.scale.is_finite() {
                return Err(Error::invalid(format!("sliders[{i}].scale"), "must be finite"));
            }
            let adapter = self.sliders.get(&s.name).ok_or_else(|| Error::UnknownSlider(s.name.clone()))?;
            entries.push((adapter.clone(), s.scale));
        }
        let stack = AdapterStack::new(entries)?;
        let is_base = stack.entries().iter().all(|(_, s)| *s == 0.0);
        let base_image = if include_base || is_base { Some(sample_image(&*self.base, &self.schedule, cond, seed, steps)?) } else { None };
        let edited = if is_base {
            base_image.clone().expect("base generated")
        } else {
            sample_image(&apply_stack(&self.base, &stack)?, &self.schedule, cond, seed, steps)?
        };
        Ok(Generation {
            edited,
            base: if include_base { base_image } else { None },
            is_base,
            applied: sliders.to_vec(),
        })
    }
}

/// Parses a `NAME:SCALE` command-line slider argument.
pub fn parse_slider_arg(arg: &str) -> Result<SliderSetting> {
    let (name, scale) = arg
        .rsplit_once(':')
        .ok_or_else(|| Error::invalid("slider", format!("`{arg}` is not NAME:SCALE")))?;
    let scale: f64 = scale.trim().parse().map_err(|_| Error::invalid("slider", format!("unparsable scale in `{arg}`")))?;
    if name.is_empty() || !scale.is_finite() {
        return Err(Error::invalid("slider", format!("`{arg}` needs a name and a finite scale")));
    }
    Ok(SliderSetting { name: name.to_owned(), scale })
}
