//! The single TOML configuration file shared by every command.
//!
//! Every section and key has a default, so an empty file is the built-in toy
//! brightness task. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DenoiserConfig, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::guidance::{ConceptPrompts, GuidanceConfig};
use crate::lora::{LayerSelector, DEFAULT_SELECTOR};
use crate::supervision::SourceSpec;

pub const HOME_ENV: &str = "SLIDER_FORGE_HOME";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub model: ModelSection,
    pub lora: LoraSection,
    pub concept: ConceptSection,
    pub schedule: ScheduleSection,
    pub supervision: SupervisionSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

/// Base model architecture, noise schedule, and the synthetic pretraining
/// task that produces the frozen base weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub blocks: usize,
    pub vocab: Vec<String>,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    /// Sampler steps used for generation everywhere unless overridden.
    pub sample_steps: usize,
    pub seed: u64,
    /// Background brightness of the pretraining images for each vocab entry.
    pub condition_means: Vec<f64>,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 8,
            width: 8,
            hidden: 8,
            embed_dim: 8,
            time_dim: 8,
            blocks: 2,
            vocab: vec!["neutral".into(), "bright".into(), "dark".into()],
            timesteps: 50,
            schedule: ScheduleKind::Linear,
            sample_steps: 5,
            seed: 7,
            condition_means: vec![0.0, 0.45, -0.45],
            pretrain_steps: 1500,
            pretrain_batch: 16,
            pretrain_lr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha_default: f64,
    pub selector: String,
}

impl Default for LoraSection {
    fn default() -> Self {
        Self { rank: 2, alpha_default: 1.0, selector: DEFAULT_SELECTOR.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptSection {
    /// Slider name; also the default checkpoint file stem.
    pub name: String,
    pub positive: String,
    pub negative: String,
    pub target: String,
}

impl Default for ConceptSection {
    fn default() -> Self {
        Self { name: "brightness".into(), positive: "bright".into(), negative: "dark".into(), target: "neutral".into() }
    }
}

impl ConceptSection {
    pub fn prompts(&self) -> ConceptPrompts {
        ConceptPrompts::new(&self.positive, &self.negative, &self.target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub t0: u64,
    pub steepness: f64,
    pub lambda_adv: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { t0: 175, steepness: 0.015, lambda_adv: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisionSection {
    pub adv: bool,
    pub perp: bool,
    pub extractor: String,
    pub extractor_seed: u64,
    pub real_source: SourceSpec,
    pub disc_width: usize,
    pub spectral_norm: bool,
}

impl Default for SupervisionSection {
    fn default() -> Self {
        Self {
            adv: true,
            perp: true,
            extractor: "fixed-random-conv".into(),
            extractor_seed: 17,
            real_source: SourceSpec::BlobMixture { means: vec![0.0, 0.45, -0.45] },
            disc_width: 4,
            spectral_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub steps: u64,
    pub batch: usize,
    pub lr_adapter: f64,
    pub lr_disc: f64,
    pub seed: u64,
    /// Guidance strength applied to the positive/negative prediction gap.
    pub eta: f64,
    pub clip_norm: f64,
    /// Probe-set triplet loss is recorded every this many steps (0 = never).
    pub eval_every: u64,
    /// Checkpoint path; defaults to `<checkpoint_dir>/<concept.name>.sfck`.
    pub output: Option<PathBuf>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 4,
            lr_adapter: 1e-2,
            lr_disc: 1e-3,
            seed: 1,
            eta: 0.5,
            clip_norm: 1.0,
            eval_every: 10,
            output: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub prompts: Vec<String>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub category: String,
    pub include_timestamp: bool,
    /// Discriminator steps for the adversarial probe used by ablations.
    pub probe_steps: usize,
    pub probe_repeats: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            prompts: vec!["neutral".into()],
            alphas: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            seeds: (100..108).collect(),
            category: "toy".into(),
            include_timestamp: false,
            probe_steps: 300,
            probe_repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
    pub checkpoint_dir: Option<PathBuf>,
    pub alpha_range: [f64; 2],
    pub max_steps: usize,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, checkpoint_dir: None, alpha_range: [-3.0, 3.0], max_steps: 50 }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be a finite positive number, got {v}")))
    }
}

fn nonzero(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::config(key, "must be positive"))
    } else {
        Ok(())
    }
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| format!("byte {}..{}", s.start, s.end)).unwrap_or_else(|| "document".into());
            Error::config(key, e.message().trim().to_owned() + &line_hint(text, e.span()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        self.denoiser_config().validate()?;
        nonzero("model.timesteps", m.timesteps)?;
        if m.sample_steps == 0 || m.sample_steps > m.timesteps {
            return Err(Error::config("model.sample_steps", format!("must be in 1..={}", m.timesteps)));
        }
        if m.condition_means.len() != m.vocab.len() {
            return Err(Error::config("model.condition_means", "need exactly one entry per vocab condition"));
        }
        if m.condition_means.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::config("model.condition_means", "entries must lie in [-1, 1]"));
        }
        nonzero("model.pretrain_batch", m.pretrain_batch)?;
        positive("model.pretrain_lr", m.pretrain_lr)?;

        nonzero("lora.rank", self.lora.rank)?;
        if !self.lora.alpha_default.is_finite() {
            return Err(Error::config("lora.alpha_default", "must be finite"));
        }
        if LayerSelector::parse(&self.lora.selector).as_string().is_empty() {
            return Err(Error::config("lora.selector", "must contain at least one pattern"));
        }

        if self.concept.name.is_empty() || self.concept.name.contains(['/', '\\', ':']) {
            return Err(Error::config("concept.name", "must be non-empty without path separators or `:`"));
        }
        for (key, v) in [
            ("concept.positive", &self.concept.positive),
            ("concept.negative", &self.concept.negative),
            ("concept.target", &self.concept.target),
        ] {
            if !m.vocab.contains(v) {
                return Err(Error::config(key, format!("`{v}` is not in model.vocab")));
            }
        }

        if self.schedule.t0 < 1 {
            return Err(Error::config("schedule.t0", "must be at least 1"));
        }
        positive("schedule.steepness", self.schedule.steepness)?;
        if !self.schedule.lambda_adv.is_finite() || self.schedule.lambda_adv < 0.0 {
            return Err(Error::config("schedule.lambda_adv", "must be finite and non-negative"));
        }

        nonzero("supervision.disc_width", self.supervision.disc_width)?;
        if !["identity", "fixed-random-conv", "external-pretrained"].contains(&self.supervision.extractor.as_str()) {
            return Err(Error::config("supervision.extractor", format!("unknown extractor `{}`", self.supervision.extractor)));
        }

        let t = &self.training;
        nonzero("training.steps", t.steps as usize)?;
        nonzero("training.eval_every", t.eval_every as usize)?;
        nonzero("training.batch", t.batch)?;
        positive("training.lr_adapter", t.lr_adapter)?;
        positive("training.lr_disc", t.lr_disc)?;
        positive("training.clip_norm", t.clip_norm)?;
        GuidanceConfig::new(t.eta).map_err(|_| Error::config("training.eta", "must be finite and non-negative"))?;

        let e = &self.eval;
        if e.prompts.is_empty() || e.alphas.is_empty() || e.seeds.is_empty() {
            return Err(Error::config("eval", "prompts, alphas and seeds must all be non-empty"));
        }
        if let Some(p) = e.prompts.iter().find(|p| !m.vocab.contains(p)) {
            return Err(Error::config("eval.prompts", format!("`{p}` is not in model.vocab")));
        }
        if e.alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("eval.alphas", "must be finite"));
        }
        nonzero("eval.probe_steps", e.probe_steps)?;
        nonzero("eval.probe_repeats", e.probe_repeats)?;

        let [lo, hi] = self.serve.alpha_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config("serve.alpha_range", "must be finite with low < high"));
        }
        nonzero("serve.max_steps", self.serve.max_steps)?;
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let m = &self.model;
        DenoiserConfig {
            channels: m.channels,
            height: m.height,
            width: m.width,
            hidden: m.hidden,
            embed_dim: m.embed_dim,
            time_dim: m.time_dim,
            blocks: m.blocks,
            vocab: m.vocab.clone(),
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.model.timesteps, self.model.schedule)
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.model.channels, self.model.height, self.model.width]
    }

    /// SHA-256 of the canonical JSON encoding of the whole config.
    pub fn config_hash(&self) -> String {
        hash_json(self)
    }

    /// Hash of the model section alone; checkpoints are compatible with any
    /// config whose model hash matches.
    pub fn model_hash(&self) -> String {
        hash_json(&self.model)
    }

    /// `serve.checkpoint_dir`, else `$SLIDER_FORGE_HOME/checkpoints`, else
    /// `./checkpoints`.
    pub fn checkpoint_dir(&self) -> PathBuf {
        if let Some(dir) = &self.serve.checkpoint_dir {
            return dir.clone();
        }
        match std::env::var_os(HOME_ENV) {
            Some(home) if !home.is_empty() => PathBuf::from(home).join("checkpoints"),
            _ => PathBuf::from("checkpoints"),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match &self.training.output {
            Some(p) => p.clone(),
            None => self.checkpoint_dir().join(format!("{}.sfck", self.concept.name)),
        }
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn line_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(s) => {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_task() {
        let cfg = AppConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, AppConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = AppConfig::default();
        cfg.training.output = Some("out/x.sfck".into());
        cfg.supervision.real_source = SourceSpec::Gaussian { mean: 0.2, std: 0.3 };
        cfg.eval.alphas = vec![0.0, 0.5];
        let text = cfg.to_toml_string();
        let back = AppConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = AppConfig::from_toml_str("[training]\nstepz = 3\n").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(AppConfig::from_toml_str("[nope]\n").is_err());
    }

    #[test]
    fn steepness_must_be_positive() {
        for v in ["0.0", "-0.1"] {
            let err = AppConfig::from_toml_str(&format!("[schedule]\nsteepness = {v}\n")).unwrap_err();
            assert!(matches!(&err, Error::Config { key, .. } if key == "schedule.steepness"), "{err}");
        }
        let err = AppConfig::from_toml_str("[schedule]\nt0 = 0\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "schedule.t0"));
    }

    #[test]
    fn concept_must_be_in_vocab() {
        let err = AppConfig::from_toml_str("[concept]\npositive = \"shiny\"\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "concept.positive"));
    }

    #[test]
    fn model_hash_ignores_other_sections() {
        let a = AppConfig::default();
        let mut b = a.clone();
        b.training.steps += 1;
        assert_eq!(a.model_hash(), b.model_hash());
        assert_ne!(a.config_hash(), b.config_hash());
        b.model.hidden += 1;
        assert_ne!(a.model_hash(), b.model_hash());
    }

    #[test]
    fn checkpoint_path_prefers_explicit_settings() {
        let mut cfg = AppConfig::default();
        cfg.serve.checkpoint_dir = Some("/tmp/cks".into());
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("/tmp/cks/brightness.sfck"));
        cfg.training.output = Some("/tmp/else.sfck".into());
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("/tmp/else.sfck"));
    }
}
