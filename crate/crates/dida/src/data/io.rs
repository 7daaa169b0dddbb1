//! PNG encoding of images and label maps plus atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ColorType, ExtendedColorType, ImageEncoder, ImageFormat};
use sha2::{Digest, Sha256};

use super::sample::LabelMap;
use crate::error::{Error, Result};
use crate::image::Image;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// 8-bit quantization of an image in `[-1, 1]`.
pub fn quantize(image: &Image) -> Vec<u8> {
    let (c, h, w) = image.shape();
    let mut out = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let unit = (image.get(ch, y, x).clamp(-1.0, 1.0) + 1.0) * 0.5;
                out.push((unit * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn encode_rgb_png(image: &Image) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {}", image.channels())));
    }
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(&quantize(image), image.width() as u32, image.height() as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::InvalidArgument(format!("png encoding failed: {e}")))?;
    Ok(buf)
}

pub fn encode_label_png(label: &LabelMap) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(label.data(), label.width() as u32, label.height() as u32, ExtendedColorType::L8)
        .map_err(|e| Error::InvalidArgument(format!("png encoding failed: {e}")))?;
    Ok(buf)
}

/// Decodes an 8-bit RGB PNG and normalizes it to `[-1, 1]` via `v / 127.5 - 1`.
pub fn decode_rgb_png(bytes: &[u8], origin: &Path) -> Result<Image> {
    let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::data(origin, format!("not a decodable PNG: {e}")))?;
    if decoded.color() != ColorType::Rgb8 {
        return Err(Error::data(origin, format!("expected 8-bit RGB, found {:?}", decoded.color())));
    }
    let rgb = decoded.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(Image::from_fn(3, h, w, |c, y, x| f64::from(raw[(y * w + x) * 3 + c]) / 127.5 - 1.0))
}

/// Decodes an 8-bit single-channel PNG of class indices.
pub fn decode_label_png(bytes: &[u8], origin: &Path) -> Result<LabelMap> {
    let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::data(origin, format!("not a decodable PNG: {e}")))?;
    if decoded.color() != ColorType::L8 {
        return Err(Error::data(origin, format!("expected 8-bit grayscale labels, found {:?}", decoded.color())));
    }
    let luma = decoded.into_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    LabelMap::new(h, w, luma.into_raw())
}
