//! PNG encoding of samples and image-file decoding for real-image folders.

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::diffusion::Sample;
use crate::error::{Error, Result};

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Maps `[-1, 1]` to 8-bit and encodes 1-channel samples as grayscale and
/// 3-channel samples as RGB.
pub fn encode_png(sample: &Sample) -> Result<Vec<u8>> {
    let [c, h, w] = sample.shape();
    let (w32, h32) = (w as u32, h as u32);
    let plane = h * w;
    let image = match c {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w32, h32, sample.data().iter().map(|&v| to_byte(v)).collect())
                .ok_or_else(|| Error::Image("buffer size".into()))?,
        ),
        3 => {
            let mut buf = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for ch in 0..3 {
                    buf.push(to_byte(sample.data()[ch * plane + p]));
                }
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w32, h32, buf).ok_or_else(|| Error::Image("buffer size".into()))?)
        }
        other => return Err(Error::Image(format!("cannot encode {other}-channel sample as PNG"))),
    };
    let mut out = Cursor::new(Vec::new());
    image.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn write_png(path: &Path, sample: &Sample) -> Result<()> {
    std::fs::write(path, encode_png(sample)?)?;
    Ok(())
}

/// Decodes an image file, resizes it to `shape` and maps pixels to `[-1, 1]`.
pub fn load_sample(path: &Path, shape: [usize; 3]) -> Result<Sample> {
    let [c, h, w] = shape;
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let img = img.resize_exact(w as u32, h as u32, FilterType::Triangle);
    let data = match c {
        1 => img.to_luma8().into_raw().into_iter().map(from_byte).collect(),
        3 => {
            let raw = img.to_rgb8().into_raw();
            let plane = h * w;
            let mut data = vec![0.0; 3 * plane];
            for p in 0..plane {
                for ch in 0..3 {
                    data[ch * plane + p] = from_byte(raw[3 * p + ch]);
                }
            }
            data
        }
        other => return Err(Error::Image(format!("cannot decode into {other} channels"))),
    };
    Sample::new(shape, data)
}

pub fn decode_png(bytes: &[u8]) -> Result<Sample> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Sample::new([1, h as usize, w as usize], gray.into_raw().into_iter().map(from_byte).collect())
}
