//! Single-file slider archive.
//!
//! Layout: `b"SFCK"`, `u32` format version, `u64` header length (both
//! little-endian), the UTF-8 JSON header, then the factor blob. The header
//! carries the metadata and a manifest of `{name, shape, offset, len}` entries
//! pointing into the blob, where each factor is stored as little-endian `f32`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainHistory;
use crate::autodiff::Tensor;
use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::guidance::ConceptPrompts;
use crate::lora::{LoraAdapter, LowRankFactors};

const MAGIC: &[u8; 4] = b"SFCK";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub name: String,
    pub concept: ConceptPrompts,
    pub rank: usize,
    pub alpha_default: f64,
    pub selector: String,
    pub config_hash: String,
    pub model_hash: String,
    pub config: AppConfig,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    manifest: Vec<ManifestEntry>,
}

/// A trained adapter with the config that produced it and its history.
#[derive(Clone, Debug, PartialEq)]
pub struct SliderCheckpoint {
    pub adapter: LoraAdapter,
    pub meta: CheckpointMeta,
}

impl SliderCheckpoint {
    pub fn new(adapter: LoraAdapter, cfg: &AppConfig, history: TrainHistory) -> Self {
        let meta = CheckpointMeta {
            name: adapter.name.clone(),
            concept: adapter.concept.clone(),
            rank: adapter.rank,
            alpha_default: adapter.default_scale,
            selector: adapter.selector.clone(),
            config_hash: cfg.config_hash(),
            model_hash: cfg.model_hash(),
            config: cfg.clone(),
            history,
        };
        Self { adapter, meta }
    }

    pub fn name(&self) -> &str {
        &self.meta.name
    }

    pub fn history(&self) -> &TrainHistory {
        &self.meta.history
    }

    /// Fails unless the checkpoint was trained with the same model section.
    pub fn check_compatible(&self, cfg: &AppConfig) -> Result<()> {
        let current = cfg.model_hash();
        if current != self.meta.model_hash {
            return Err(Error::Incompatible { config: current, checkpoint: self.meta.model_hash.clone() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        let mut manifest = Vec::new();
        for (name, t) in self.adapter.named_factors() {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            manifest.push(ManifestEntry { name, shape: [t.rows(), t.cols()], offset, len: blob.len() - offset });
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), manifest }).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_owned());
        if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
            return Err(corrupt("missing archive preamble"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| PREAMBLE.checked_add(l))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("manifest extends past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| Error::CorruptCheckpoint(format!("unreadable manifest: {e}")))?;
        let blob = &bytes[header_end..];

        let mut named = BTreeMap::new();
        for entry in &header.manifest {
            let count = entry.shape[0] * entry.shape[1];
            let end = entry.offset.checked_add(entry.len).filter(|&e| e <= blob.len());
            let Some(end) = end else {
                return Err(Error::CorruptCheckpoint(format!("factor `{}` extends past end of file", entry.name)));
            };
            if entry.len != count * 4 {
                return Err(Error::CorruptCheckpoint(format!("factor `{}` length disagrees with its shape", entry.name)));
            }
            let data = blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            named.insert(entry.name.clone(), Tensor::matrix(entry.shape[0], entry.shape[1], data));
        }

        let mut layers = BTreeMap::new();
        for (key, t) in named {
            let (layer, part) = key.rsplit_once('.').ok_or_else(|| corrupt("factor name without part suffix"))?;
            let slot: &mut (Option<Tensor>, Option<Tensor>) = layers.entry(layer.to_owned()).or_default();
            match part {
                "down" => slot.0 = Some(t),
                "up" => slot.1 = Some(t),
                _ => return Err(Error::CorruptCheckpoint(format!("unknown factor `{key}`"))),
            }
        }
        let layers = layers
            .into_iter()
            .map(|(layer, slot)| match slot {
                (Some(down), Some(up)) => Ok((layer, LowRankFactors { down, up })),
                _ => Err(Error::CorruptCheckpoint(format!("layer `{layer}` is missing a factor"))),
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let m = &header.meta;
        let adapter = LoraAdapter::from_parts(m.name.clone(), m.rank, m.alpha_default, m.concept.clone(), m.selector.clone(), layers)?;
        Ok(Self { adapter, meta: header.meta })
    }
}

pub fn save_checkpoint(checkpoint: &SliderCheckpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SliderCheckpoint> {
    SliderCheckpoint::from_bytes(&std::fs::read(path)?)
}

/// Loads and checks that every factor has the `expected_rank`.
pub fn load_checkpoint_expecting(path: &Path, expected_rank: usize) -> Result<SliderCheckpoint> {
    let ck = load_checkpoint(path)?;
    for f in ck.adapter.layers().values() {
        if f.down.cols() != expected_rank || f.up.rows() != expected_rank {
            return Err(Error::ShapeMismatch {
                expected: vec![f.down.rows(), expected_rank],
                actual: vec![f.down.rows(), f.down.cols()],
            });
        }
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::tests::tiny_config;
    use crate::diffusion::ConvDenoiser;
    use crate::lora::{init_adapter, DEFAULT_SELECTOR};
    use crate::trainer::StepRecord;

    fn checkpoint(rank: usize) -> SliderCheckpoint {
        let base = ConvDenoiser::new(tiny_config(), 3).unwrap();
        let mut a = init_adapter("bright", &base, DEFAULT_SELECTOR, rank, 5).unwrap();
        for (i, f) in a.layers_mut().values_mut().enumerate() {
            for (j, v) in f.up.data_mut().iter_mut().enumerate() {
                *v = ((i * 7 + j) as f64 * 0.37).sin();
            }
        }
        a.round_to_f32();
        a.concept = ConceptPrompts::new("bright", "dark", "neutral");
        let mut history = TrainHistory::default();
        history
            .push(StepRecord {
                step: 1,
                triplet: 0.1234567891234,
                perceptual: None,
                adversarial: Some(0.7),
                discriminator: Some(0.69),
                lambda_triplet: 0.3,
                lambda_perp: 0.7,
                lambda_adv: 0.1,
                total: 0.5,
                grad_norm: 1.0 / 3.0,
                probe_triplet: Some(0.01),
            })
            .unwrap();
        SliderCheckpoint::new(a, &AppConfig::default(), history)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/s.sfck");
        let ck = checkpoint(2);
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for (name, t) in ck.adapter.named_factors() {
            let other = &back.adapter.named_factors()[&name];
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&t), bits(other));
        }
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn truncation_is_a_corrupt_manifest() {
        let bytes = checkpoint(2).to_bytes();
        for cut in [3, 10, 40, bytes.len() - 1] {
            let err = SliderCheckpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = checkpoint(2).to_bytes();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(SliderCheckpoint::from_bytes(&bytes), Err(Error::VersionMismatch { found: 2, expected: 1 })));
    }

    #[test]
    fn rank_expectation_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.sfck");
        save_checkpoint(&checkpoint(2), &path).unwrap();
        assert!(load_checkpoint_expecting(&path, 2).is_ok());
        assert!(matches!(load_checkpoint_expecting(&path, 3), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn incompatible_model_section_is_named() {
        let ck = checkpoint(1);
        let mut cfg = AppConfig::default();
        assert!(ck.check_compatible(&cfg).is_ok());
        cfg.model.hidden += 1;
        let err = ck.check_compatible(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&cfg.model_hash()) && msg.contains(&ck.meta.model_hash));
    }
}
