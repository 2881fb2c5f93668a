//! Desk-scale evaluation: an alignment score in the style of CLIP, a
//! perceptual distance in the style of LPIPS, report tables, and the loss
//! ablation grid.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::base::base_model;
use crate::config::AppConfig;
use crate::diffusion::{sample_images, CondId, ConvDenoiser, NoisePredictor, NoiseSchedule, Sample, Vocabulary};
use crate::error::{Error, Result};
use crate::lora::{apply_stack, AdapterStack, LoraAdapter};
use crate::supervision::{
    extractor_from_id, generator_adversarial_loss, lpips_proxy, Discriminator, DiscriminatorConfig, FeatureExtractor,
    RealImageSource,
};
use crate::trainer::{train_slider, SliderCheckpoint};
use crate::optim::Adam;

/// Maps images and conditions into a shared space for alignment scoring.
pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;

    fn embed_image(&self, image: &Sample) -> Vec<f64>;

    fn embed_text(&self, text: CondId) -> Result<Vec<f64>>;
}

/// Two-dimensional toy embedder for the brightness task. Images map to
/// `(mean pixel, 0.5)`; a condition maps to `(±1, 0)` by the sign of its
/// configured brightness, or `(0, 1)` when that brightness is zero.
#[derive(Clone, Debug)]
pub struct BrightnessEmbedder {
    vocab: Vocabulary,
    levels: Vec<f64>,
}

impl BrightnessEmbedder {
    pub fn new(vocab: Vocabulary, levels: Vec<f64>) -> Result<Self> {
        if levels.len() != vocab.len() {
            return Err(Error::invalid("levels", "need one brightness level per condition"));
        }
        Ok(Self { vocab, levels })
    }

    pub fn from_config(cfg: &AppConfig) -> Result<Self> {
        Self::new(Vocabulary::new(cfg.model.vocab.clone())?, cfg.model.condition_means.clone())
    }
}

impl Embedder for BrightnessEmbedder {
    fn id(&self) -> &str {
        "brightness"
    }

    fn embed_image(&self, image: &Sample) -> Vec<f64> {
        vec![image.mean(), 0.5]
    }

    fn embed_text(&self, text: CondId) -> Result<Vec<f64>> {
        self.vocab.check(text)?;
        let level = self.levels[text.0];
        Ok(if level == 0.0 { vec![0.0, 1.0] } else { vec![level.signum(), 0.0] })
    }
}

/// `100 · cos(a, b)`.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: vec![a.len()], actual: vec![b.len()] });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((100.0 * dot / (na * nb)).clamp(-100.0, 100.0))
}

pub fn clip_proxy_score(embedder: &dyn Embedder, image: &Sample, text: CondId) -> Result<f64> {
    cosine_score(&embedder.embed_image(image), &embedder.embed_text(text)?)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// What to evaluate: every prompt × seed at every scale.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub category: String,
    pub prompts: Vec<CondId>,
    /// Condition the edited image is scored against.
    pub text: CondId,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps: usize,
}

impl EvalSpec {
    pub fn from_config(cfg: &AppConfig, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self {
            category: cfg.eval.category.clone(),
            prompts: cfg.eval.prompts.iter().map(|p| vocab.id(p)).collect::<Result<_>>()?,
            text: vocab.id(&cfg.concept.positive)?,
            alphas: cfg.eval.alphas.clone(),
            seeds: cfg.eval.seeds.clone(),
            steps: cfg.model.sample_steps,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub category: String,
    pub weight: String,
    pub model: String,
    pub clip: f64,
    pub lpips: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub rows: Vec<EvalRow>,
    pub meta: ReportMeta,
}

const COLUMNS: [&str; 5] = ["Category", "Weight", "Model", "CLIP", "LPIPS"];

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if !(r.clip.is_finite() && (-100.0..=100.0).contains(&r.clip)) {
                return Err(Error::invalid("clip", format!("{} outside [-100, 100]", r.clip)));
            }
            if !(r.lpips.is_finite() && r.lpips >= 0.0) {
                return Err(Error::invalid("lpips", format!("{} is not a non-negative number", r.lpips)));
            }
        }
        Ok(())
    }

    /// Rows with scores rounded as the text table prints them.
    pub fn rounded(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.rows {
            r.clip = format!("{:.2}", r.clip).parse().expect("formatted float");
            r.lpips = format!("{:.3}", r.lpips).parse().expect("formatted float");
        }
        out
    }

    /// Pipe-delimited table: `#` metadata lines, a header row, one line per
    /// row (CLIP to 2 decimals, LPIPS to 3), then `#` footnotes.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# {}", self.title).unwrap();
        writeln!(out, "# config_hash: {}", self.meta.config_hash).unwrap();
        let seeds: Vec<String> = self.meta.seeds.iter().map(u64::to_string).collect();
        writeln!(out, "# seeds: {}", seeds.join(",")).unwrap();
        if let Some(ts) = &self.meta.timestamp {
            writeln!(out, "# timestamp: {ts}").unwrap();
        }
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| [r.category.clone(), r.weight.clone(), r.model.clone(), format!("{:.2}", r.clip), format!("{:.3}", r.lpips)])
            .collect();
        let mut widths = COLUMNS.map(str::len);
        for c in &cells {
            for (w, s) in widths.iter_mut().zip(c) {
                *w = (*w).max(s.len());
            }
        }
        let line = |c: [&str; 5]| {
            let padded: Vec<String> = c.iter().zip(widths).map(|(s, w)| format!("{s:<w$}")).collect();
            padded.join(" | ").trim_end().to_owned()
        };
        writeln!(out, "{}", line(COLUMNS)).unwrap();
        for c in &cells {
            writeln!(out, "{}", line([&c[0], &c[1], &c[2], &c[3], &c[4]])).unwrap();
        }
        for note in &self.meta.notes {
            writeln!(out, "# note: {note}").unwrap();
        }
        out
    }

    /// Inverse of [`Self::to_table`] (scores come back rounded).
    pub fn parse_table(text: &str) -> Result<Self> {
        let bad = |m: String| Error::invalid("report", m);
        let mut report = EvalReport::default();
        let mut header_seen = false;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some(v) = rest.strip_prefix("config_hash: ") {
                    report.meta.config_hash = v.to_owned();
                } else if let Some(v) = rest.strip_prefix("seeds: ") {
                    report.meta.seeds = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|_| bad(format!("bad seed `{s}`"))))
                        .collect::<Result<_>>()?;
                } else if let Some(v) = rest.strip_prefix("timestamp: ") {
                    report.meta.timestamp = Some(v.to_owned());
                } else if let Some(v) = rest.strip_prefix("note: ") {
                    report.meta.notes.push(v.to_owned());
                } else if !header_seen && report.title.is_empty() {
                    report.title = rest.to_owned();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split('|').map(str::trim).collect();
            if cells.len() != 5 {
                return Err(bad(format!("expected 5 columns, got {}", cells.len())));
            }
            if !header_seen {
                if cells != COLUMNS {
                    return Err(bad("missing header row".into()));
                }
                header_seen = true;
                continue;
            }
            report.rows.push(EvalRow {
                category: cells[0].to_owned(),
                weight: cells[1].to_owned(),
                model: cells[2].to_owned(),
                clip: cells[3].parse().map_err(|_| bad(format!("bad CLIP `{}`", cells[3])))?,
                lpips: cells[4].parse().map_err(|_| bad(format!("bad LPIPS `{}`", cells[4])))?,
            });
        }
        if !header_seen {
            return Err(bad("missing header row".into()));
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid("report", e.to_string()))
    }
}

/// Model label for a scale, e.g. `alpha=-2` or `alpha=0.5`.
pub fn alpha_label(alpha: f64) -> String {
    format!("alpha={alpha}")
}

/// Mean CLIP-proxy and LPIPS-proxy of one adapter at one scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredScale {
    pub alpha: f64,
    pub clip: f64,
    pub lpips: f64,
    pub mean_brightness: f64,
}

pub struct Scorer<'a> {
    pub base: &'a ConvDenoiser,
    pub schedule: &'a NoiseSchedule,
    pub embedder: &'a dyn Embedder,
    pub phi: &'a dyn FeatureExtractor,
}

impl Scorer<'_> {
    /// Scores `adapter` at every scale in `spec`, in spec order.
    pub fn score(&self, adapter: &Arc<LoraAdapter>, spec: &EvalSpec) -> Result<Vec<ScoredScale>> {
        if spec.prompts.is_empty() || spec.alphas.is_empty() || spec.seeds.is_empty() {
            return Err(Error::invalid("eval", "spec has no prompts, scales or seeds"));
        }
        let mut conds = Vec::new();
        let mut seeds = Vec::new();
        for &p in &spec.prompts {
            for &s in &spec.seeds {
                conds.push(p);
                seeds.push(s);
            }
        }
        let base_images = sample_images(self.base, self.schedule, &conds, &seeds, spec.steps)?;
        let n = conds.len() as f64;
        spec.alphas
            .iter()
            .map(|&alpha| {
                let model = apply_stack(self.base, &AdapterStack::new(vec![(adapter.clone(), alpha)])?)?;
                let edited = sample_images(&model, self.schedule, &conds, &seeds, spec.steps)?;
                let (mut clip, mut lpips, mut bright) = (0.0, 0.0, 0.0);
                for (b, e) in base_images.iter().zip(&edited) {
                    clip += clip_proxy_score(self.embedder, e, spec.text)?;
                    lpips += lpips_proxy(self.phi, b, e)?;
                    bright += e.mean();
                }
                Ok(ScoredScale { alpha, clip: clip / n, lpips: lpips / n, mean_brightness: bright / n })
            })
            .collect()
    }
}

/// Per-slider report: one row per scale.
pub fn evaluate_slider(
    base: &ConvDenoiser,
    schedule: &NoiseSchedule,
    checkpoint: &SliderCheckpoint,
    spec: &EvalSpec,
    embedder: &dyn Embedder,
    phi: &dyn FeatureExtractor,
) -> Result<EvalReport> {
    let adapter = Arc::new(checkpoint.adapter.clone());
    let scored = Scorer { base, schedule, embedder, phi }.score(&adapter, spec)?;
    let rows = scored
        .iter()
        .map(|s| EvalRow {
            category: spec.category.clone(),
            weight: checkpoint.name().to_owned(),
            model: alpha_label(s.alpha),
            clip: s.clip,
            lpips: s.lpips,
        })
        .collect();
    let report = EvalReport {
        title: format!("slider {} ({} embedder, {} features)", checkpoint.name(), embedder.id(), phi.id()),
        rows,
        meta: ReportMeta { config_hash: checkpoint.meta.config_hash.clone(), seeds: spec.seeds.clone(), ..Default::default() },
    };
    report.validate()?;
    Ok(report)
}

/// Evaluates `checkpoint` with the embedder, extractor and grid named by
/// `cfg`, after checking it was trained against the same model section.
pub fn evaluate_checkpoint(cfg: &AppConfig, checkpoint: &SliderCheckpoint) -> Result<EvalReport> {
    cfg.validate()?;
    checkpoint.check_compatible(cfg)?;
    let base = base_model(cfg)?;
    let schedule = cfg.noise_schedule()?;
    let embedder = BrightnessEmbedder::from_config(cfg)?;
    let phi = extractor_from_id(&cfg.supervision.extractor, cfg.model.channels, cfg.supervision.extractor_seed)?;
    let spec = EvalSpec::from_config(cfg, base.vocabulary())?;
    evaluate_slider(&base, &schedule, checkpoint, &spec, &embedder, &*phi)
}

/// Published per-attribute scores (category, weight, model, CLIP, LPIPS).
/// They need full-scale models and data and are not reproducible here.
pub const REFERENCE_ATTRIBUTES: [(&str, &str, &str, f64, f64); 10] = [
    ("Text Guided", "long_hair", "Concept Sliders", 29.03, 0.041),
    ("Text Guided", "long_hair", "Our Method", 29.06, 0.026),
    ("Text Guided", "muscular", "Concept Sliders", 28.58, 0.091),
    ("Text Guided", "muscular", "Our Method", 28.61, 0.063),
    ("Text Guided", "age", "Concept Sliders", 25.90, 0.038),
    ("Text Guided", "age", "Our Method", 25.84, 0.027),
    ("In the Wild Texting", "age", "Concept Sliders", 21.92, 0.051),
    ("In the Wild Texting", "age", "Our Method", 22.15, 0.047),
    ("In the Wild Texting", "chubby", "Concept Sliders", 26.80, 0.078),
    ("In the Wild Texting", "chubby", "Our Method", 26.77, 0.037),
];

/// Published ablation scores (arm, CLIP, LPIPS); reference only.
pub const REFERENCE_ABLATION: [(&str, f64, f64); 4] =
    [("full", 34.89, 0.557), ("w/o adv", 32.19, 0.586), ("w/o perp", 34.43, 0.644), ("w/o adv & perp", 33.17, 0.629)];

/// The published scores laid out as a report, for side-by-side formatting.
pub fn reference_attribute_table() -> EvalReport {
    EvalReport {
        title: "published reference scores (full-scale models; not reproducible at desk scale)".into(),
        rows: REFERENCE_ATTRIBUTES
            .iter()
            .map(|&(c, w, m, clip, lpips)| EvalRow { category: c.into(), weight: w.into(), model: m.into(), clip, lpips })
            .collect(),
        meta: ReportMeta::default(),
    }
}

/// One of the four loss-configuration arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationArm {
    pub adv: bool,
    pub perp: bool,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm { adv: true, perp: true },
        AblationArm { adv: false, perp: true },
        AblationArm { adv: true, perp: false },
        AblationArm { adv: false, perp: false },
    ];

    pub fn label(&self) -> &'static str {
        match (self.adv, self.perp) {
            (true, true) => "full",
            (false, true) => "w/o adv",
            (true, false) => "w/o perp",
            (false, false) => "w/o adv & perp",
        }
    }
}

/// Result of one trained-and-evaluated arm.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub arm: AblationArm,
    pub checkpoint: SliderCheckpoint,
    pub report: EvalReport,
    /// Scores at the slider's default scale, averaged over prompts and seeds.
    pub clip: f64,
    pub lpips: f64,
    /// Generator adversarial loss of this arm's edits against a discriminator
    /// trained from scratch on real vs. this arm's edits.
    pub adversarial_probe: f64,
}

/// Trains fresh discriminators on real images vs. `fake_pool` and returns
/// the non-saturating generator loss on `held_out`, averaged over
/// `eval.probe_repeats` independently seeded discriminators.
pub fn adversarial_probe(
    cfg: &AppConfig,
    real: &RealImageSource,
    fake_pool: &[Sample],
    held_out: &[Sample],
) -> Result<f64> {
    if fake_pool.is_empty() || held_out.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let [c, h, w] = real.shape();
    let batch = cfg.training.batch.max(4).min(fake_pool.len());
    let repeats = cfg.eval.probe_repeats;
    let mut total = 0.0;
    for rep in 0..repeats as u64 {
        let mut d = Discriminator::new(
            DiscriminatorConfig {
                channels: c,
                height: h,
                width: w,
                base_width: cfg.supervision.disc_width,
                spectral_norm: cfg.supervision.spectral_norm,
            },
            0x00de_7ec7 + rep,
        )?;
        let mut opt = Adam::new(cfg.training.lr_disc);
        for step in 0..cfg.eval.probe_steps as u64 {
            let r = real.sample_batch(batch, (rep << 32) | step)?;
            let start = (step as usize * batch) % fake_pool.len();
            let f: Vec<Sample> = (0..batch).map(|i| fake_pool[(start + i) % fake_pool.len()].clone()).collect();
            d.train_step(&mut opt, &r, &f, cfg.training.clip_norm)?;
        }
        total += generator_adversarial_loss(&d, held_out)?;
    }
    Ok(total / repeats as f64)
}

const PROBE_POOL: u64 = 32;
const PROBE_HELD_OUT: u64 = 16;

/// Trains and evaluates one slider per arm, all from the same seeds.
pub fn run_ablation(cfg: &AppConfig, arms: &[AblationArm]) -> Result<Vec<AblationResult>> {
    cfg.validate()?;
    if arms.is_empty() {
        return Err(Error::invalid("arms", "no ablation arms requested"));
    }
    let base = base_model(cfg)?;
    let schedule = cfg.noise_schedule()?;
    let embedder = BrightnessEmbedder::from_config(cfg)?;
    let phi = extractor_from_id(&cfg.supervision.extractor, cfg.model.channels, cfg.supervision.extractor_seed)?;
    let spec = EvalSpec::from_config(cfg, base.vocabulary())?;
    let real = RealImageSource::from_spec(&cfg.supervision.real_source, base.sample_shape())?;
    let target = base.vocabulary().id(&cfg.concept.target)?;
    let alpha = cfg.lora.alpha_default;

    let mut results = Vec::with_capacity(arms.len());
    for arm in arms {
        let label = arm.label();
        let mut arm_cfg = cfg.clone();
        arm_cfg.supervision.adv = arm.adv;
        arm_cfg.supervision.perp = arm.perp;
        let wrap = |e: Error| Error::invalid(format!("ablation arm `{label}`"), e.to_string());
        let checkpoint = train_slider(&arm_cfg).map_err(wrap)?;
        let adapter = Arc::new(checkpoint.adapter.clone());
        let mut report =
            evaluate_slider(&base, &schedule, &checkpoint, &spec, &embedder, &*phi).map_err(wrap)?;
        report.title = format!("ablation arm {label}");
        for row in &mut report.rows {
            row.model = format!("{label}, {}", row.model);
        }
        let at_default = Scorer { base: &base, schedule: &schedule, embedder: &embedder, phi: &*phi }
            .score(&adapter, &EvalSpec { alphas: vec![alpha], ..spec.clone() })
            .map_err(wrap)?[0];

        let edited = apply_stack(&base, &AdapterStack::new(vec![(adapter.clone(), alpha)])?)?;
        let pool_seeds: Vec<u64> = (0..PROBE_POOL).map(|i| 0x70_0000 + i).collect();
        let held_seeds: Vec<u64> = (0..PROBE_HELD_OUT).map(|i| 0x71_0000 + i).collect();
        let pool = sample_images(&edited, &schedule, &vec![target; pool_seeds.len()], &pool_seeds, spec.steps)?;
        let held = sample_images(&edited, &schedule, &vec![target; held_seeds.len()], &held_seeds, spec.steps)?;
        let adversarial_probe = adversarial_probe(cfg, &real, &pool, &held).map_err(wrap)?;
        results.push(AblationResult {
            arm: *arm,
            checkpoint,
            report,
            clip: at_default.clip,
            lpips: at_default.lpips,
            adversarial_probe,
        });
    }
    Ok(results)
}

/// Ablation summary: one row per arm at the default scale, with the
/// published numbers as footnotes.
pub fn ablation_summary(cfg: &AppConfig, results: &[AblationResult]) -> EvalReport {
    let rows = results
        .iter()
        .map(|r| EvalRow {
            category: "ablation".into(),
            weight: cfg.concept.name.clone(),
            model: r.arm.label().into(),
            clip: r.clip,
            lpips: r.lpips,
        })
        .collect();
    let mut notes: Vec<String> = results
        .iter()
        .map(|r| format!("adversarial probe loss {}: {:.4}", r.arm.label(), r.adversarial_probe))
        .collect();
    notes.extend(REFERENCE_ABLATION.iter().map(|(arm, clip, lpips)| {
        format!("published reference {arm}: CLIP {clip:.2} / LPIPS {lpips:.3} (full-scale models; not reproducible here)")
    }));
    EvalReport {
        title: format!("loss ablation at alpha={}", cfg.lora.alpha_default),
        rows,
        meta: ReportMeta { config_hash: cfg.config_hash(), seeds: cfg.eval.seeds.clone(), timestamp: None, notes },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_score(&[2.0, 0.0], &[1.0, 0.0]).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_score(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 70.7107).abs() < 1e-4);
        assert!(matches!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn brightness_embedder_orders_images() {
        let vocab = Vocabulary::new(vec!["neutral".into(), "bright".into(), "dark".into()]).unwrap();
        let e = BrightnessEmbedder::new(vocab, vec![0.0, 0.5, -0.5]).unwrap();
        let dim = Sample::filled([1, 2, 2], -0.3);
        let lit = Sample::filled([1, 2, 2], 0.6);
        assert!(clip_proxy_score(&e, &lit, CondId(1)).unwrap() > clip_proxy_score(&e, &dim, CondId(1)).unwrap());
        assert!(clip_proxy_score(&e, &lit, CondId(2)).unwrap() < clip_proxy_score(&e, &dim, CondId(2)).unwrap());
        assert!(clip_proxy_score(&e, &lit, CondId(7)).is_err());
    }

    #[test]
    fn spearman_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 2.0]) < 1.0);
    }

    fn report() -> EvalReport {
        EvalReport {
            title: "t".into(),
            rows: vec![
                EvalRow { category: "toy".into(), weight: "brightness".into(), model: "alpha=-2".into(), clip: -87.123456, lpips: 0.123456 },
                EvalRow { category: "toy".into(), weight: "brightness".into(), model: "alpha=0.5".into(), clip: 45.0, lpips: 0.0 },
            ],
            meta: ReportMeta { config_hash: "abc".into(), seeds: vec![1, 2], timestamp: None, notes: vec!["n1".into()] },
        }
    }

    #[test]
    fn table_round_trip() {
        let r = report();
        let text = r.to_table();
        assert!(text.contains("Category | Weight"));
        assert!(text.contains("-87.12") && text.contains("0.123"));
        let back = EvalReport::parse_table(&text).unwrap();
        assert_eq!(back, r.rounded());
        assert_eq!(back.to_table(), text);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = report();
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert!(!r.to_json().contains("timestamp"));
    }

    #[test]
    fn reference_table_keeps_published_formatting() {
        let text = reference_attribute_table().to_table();
        assert!(text.contains("long_hair | Our Method      | 29.06 | 0.026"), "{text}");
    }

    #[test]
    fn arm_labels() {
        let labels: Vec<&str> = AblationArm::ALL.iter().map(AblationArm::label).collect();
        assert_eq!(labels, ["full", "w/o adv", "w/o perp", "w/o adv & perp"]);
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(a in prop::collection::vec(0.1f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 3), s in 0.01f64..100.0, t in 0.01f64..100.0) {
            prop_assume!(b.iter().any(|v| v.abs() > 1e-3));
            let base = cosine_score(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * t).collect();
            prop_assert!((cosine_score(&sa, &sb).unwrap() - base).abs() < 1e-9);
        }
    }
}
