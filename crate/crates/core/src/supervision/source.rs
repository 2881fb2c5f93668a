use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::Sample;
use crate::error::{Error, Result};
use crate::image_io;

/// Parameters of the synthetic "blob" image family: a flat background at
/// `mean` plus one Gaussian bump of random position and height, plus pixel
/// noise, clamped to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobParams {
    pub mean: f64,
    pub amplitude: f64,
    pub width: f64,
    pub noise: f64,
}

impl BlobParams {
    pub const BRIGHT: BlobParams = BlobParams { mean: 0.4, amplitude: 0.4, width: 1.5, noise: 0.05 };

    pub fn with_mean(mean: f64) -> Self {
        Self { mean, amplitude: 0.3, width: 1.5, noise: 0.05 }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, shape: [usize; 3]) -> Sample {
        let [c, h, w] = shape;
        let cy = rng.random::<f64>() * h as f64;
        let cx = rng.random::<f64>() * w as f64;
        let height = self.amplitude * (0.5 + rng.random::<f64>());
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    let bump = height * (-d2 / (2.0 * self.width * self.width)).exp();
                    let n: f64 = rng.sample(StandardNormal);
                    data.push((self.mean + bump + self.noise * n).clamp(-1.0, 1.0));
                }
            }
        }
        Sample::new(shape, data).expect("finite synthetic sample")
    }
}

/// How the real-image source is configured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    BrightBlobs,
    /// Equal mixture of blob families, one per background level.
    BlobMixture { means: Vec<f64> },
    Blobs { mean: f64, amplitude: f64, width: f64, noise: f64 },
    Gaussian { mean: f64, std: f64 },
    Directory { path: PathBuf },
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self::BrightBlobs
    }
}

#[derive(Clone, Debug)]
enum Provider {
    Blobs(BlobParams),
    Mixture(Vec<BlobParams>),
    Gaussian { mean: f64, std: f64 },
    Images(Vec<Sample>),
}

/// Provider of "real" sample batches for the discriminator.
#[derive(Clone, Debug)]
pub struct RealImageSource {
    id: String,
    shape: [usize; 3],
    provider: Provider,
}

impl RealImageSource {
    pub fn from_spec(spec: &SourceSpec, shape: [usize; 3]) -> Result<Self> {
        match spec {
            SourceSpec::BrightBlobs => Ok(Self::blobs("bright_blobs", BlobParams::BRIGHT, shape)),
            SourceSpec::BlobMixture { means } => {
                if means.is_empty() {
                    return Err(Error::invalid("real_source.means", "must not be empty"));
                }
                let parts = means.iter().map(|&m| BlobParams::with_mean(m)).collect();
                Ok(Self { id: "blob_mixture".into(), shape, provider: Provider::Mixture(parts) })
            }
            SourceSpec::Blobs { mean, amplitude, width, noise } => Ok(Self::blobs(
                "blobs",
                BlobParams { mean: *mean, amplitude: *amplitude, width: *width, noise: *noise },
                shape,
            )),
            SourceSpec::Gaussian { mean, std } => Ok(Self::gaussian(*mean, *std, shape)),
            SourceSpec::Directory { path } => Self::from_directory(path, shape),
        }
    }

    pub fn blobs(id: &str, params: BlobParams, shape: [usize; 3]) -> Self {
        Self { id: id.to_owned(), shape, provider: Provider::Blobs(params) }
    }

    pub fn gaussian(mean: f64, std: f64, shape: [usize; 3]) -> Self {
        Self { id: "gaussian".into(), shape, provider: Provider::Gaussian { mean, std } }
    }

    pub fn from_samples(id: &str, samples: Vec<Sample>) -> Result<Self> {
        let shape = samples.first().ok_or_else(|| Error::invalid("source", "no images"))?.shape();
        Ok(Self { id: id.to_owned(), shape, provider: Provider::Images(samples) })
    }

    /// Every decodable file in `dir`, sorted by file name.
    pub fn from_directory(dir: &Path, shape: [usize; 3]) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let samples = paths.iter().map(|p| image_io::load_sample(p, shape)).collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::invalid("source", format!("no images in {}", dir.display())));
        }
        Ok(Self { id: format!("directory:{}", dir.display()), shape, provider: Provider::Images(samples) })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn sample_batch(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = match &self.provider {
            Provider::Blobs(p) => (0..n).map(|_| p.draw(&mut rng, self.shape)).collect(),
            Provider::Mixture(parts) => (0..n)
                .map(|_| {
                    let p = parts[rng.random_range(0..parts.len())];
                    p.draw(&mut rng, self.shape)
                })
                .collect(),
            Provider::Gaussian { mean, std } => (0..n)
                .map(|_| {
                    let len = self.shape.iter().product();
                    let data = (0..len).map(|_| mean + std * rng.sample::<f64, _>(StandardNormal)).collect();
                    Sample::new(self.shape, data).expect("finite gaussian sample")
                })
                .collect(),
            Provider::Images(images) => (0..n).map(|_| images[rng.random_range(0..images.len())].clone()).collect(),
        };
        Ok(batch)
    }
}

pub fn sample_real_batch(source: &RealImageSource, n: usize, seed: u64) -> Result<Vec<Sample>> {
    source.sample_batch(n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_per_seed() {
        let src = RealImageSource::from_spec(&SourceSpec::BrightBlobs, [1, 8, 8]).unwrap();
        assert_eq!(sample_real_batch(&src, 3, 5).unwrap(), sample_real_batch(&src, 3, 5).unwrap());
        assert_ne!(sample_real_batch(&src, 3, 5).unwrap(), sample_real_batch(&src, 3, 6).unwrap());
        assert_eq!(sample_real_batch(&src, 3, 5).unwrap().len(), 3);
    }

    #[test]
    fn bright_blobs_have_positive_mean() {
        let src = RealImageSource::from_spec(&SourceSpec::BrightBlobs, [1, 8, 8]).unwrap();
        let batch = sample_real_batch(&src, 16, 0).unwrap();
        let mean = batch.iter().map(Sample::mean).sum::<f64>() / 16.0;
        assert!(mean > 0.0);
    }

    #[test]
    fn mixture_covers_every_level() {
        let spec = SourceSpec::BlobMixture { means: vec![-0.5, 0.5] };
        let src = RealImageSource::from_spec(&spec, [1, 6, 6]).unwrap();
        let batch = src.sample_batch(40, 3).unwrap();
        assert!(batch.iter().any(|s| s.mean() > 0.3));
        assert!(batch.iter().any(|s| s.mean() < -0.3));
        assert!(RealImageSource::from_spec(&SourceSpec::BlobMixture { means: vec![] }, [1, 6, 6]).is_err());
    }

    #[test]
    fn empty_requests_and_sources_fail() {
        let src = RealImageSource::gaussian(0.0, 1.0, [1, 2, 2]);
        assert!(matches!(src.sample_batch(0, 1), Err(Error::EmptyBatch)));
        assert!(RealImageSource::from_samples("x", vec![]).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(RealImageSource::from_directory(dir.path(), [1, 2, 2]).is_err());
    }

    #[test]
    fn directory_source_is_filename_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let dark = Sample::filled([1, 4, 4], -1.0);
        let light = Sample::filled([1, 4, 4], 1.0);
        image_io::write_png(&dir.path().join("b.png"), &dark).unwrap();
        image_io::write_png(&dir.path().join("a.png"), &light).unwrap();
        let src = RealImageSource::from_directory(dir.path(), [1, 4, 4]).unwrap();
        let Provider::Images(images) = &src.provider else { panic!("expected images") };
        assert_eq!(images[0], light);
        assert_eq!(images[1], dark);
    }

    #[test]
    fn spec_parses_from_toml() {
        let spec: SourceSpec = toml::from_str("kind = \"gaussian\"\nmean = 0.5\nstd = 0.1").unwrap();
        assert_eq!(spec, SourceSpec::Gaussian { mean: 0.5, std: 0.1 });
        assert!(toml::from_str::<SourceSpec>("kind = \"gaussian\"\nmean = 0.5\nstd = 0.1\nextra = 1").is_err());
    }
}
