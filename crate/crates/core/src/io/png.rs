use std::path::Path;

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Quantizes to 8 bits with round-to-nearest.
pub fn to_rgb8(img: &RgbImage) -> Vec<u8> {
    img.data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<RgbImage> {
    RgbImage::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    let buf = image::RgbImage::from_raw(img.width, img.height, to_rgb8(img))
        .ok_or_else(|| Error::shape("image buffer does not match its size"))?;
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    super::atomic_write(path, &encode_png(img)?)
}

/// Reads any 8- or 16-bit PNG as RGB; alpha is dropped.
pub fn read_png(path: &Path) -> Result<RgbImage> {
    let bytes = super::read_file(path)?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = decoded.to_rgb8();
    from_rgb8(rgb.width(), rgb.height(), rgb.as_raw())
}
