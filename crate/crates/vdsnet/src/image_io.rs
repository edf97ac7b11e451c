//! PNG decoding and resizing into model input planes.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vdsnet_core::data::resize_bilinear;
use vdsnet_core::zoo::INPUT_EXTENT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Gray,
    Rgb,
}

impl Color {
    pub fn channels(self) -> usize {
        match self {
            Color::Gray => 1,
            Color::Rgb => 3,
        }
    }

    pub fn for_channels(channels: usize) -> Self {
        if channels == 1 {
            Color::Gray
        } else {
            Color::Rgb
        }
    }
}

/// Decodes an 8-bit image, resizes it to `extent x extent` and scales
/// pixels into `[0, 1]`. Returns `[C, extent, extent]`.
pub fn preprocess_image(bytes: &[u8], color: Color, extent: usize, image_index: &str) -> Result<Vec<f32>> {
    let img = image::load_from_memory(bytes).with_context(|| format!("cannot decode image {image_index}"))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planar: Vec<f32> = match color {
        Color::Gray => img.to_luma8().into_raw().into_iter().map(f32::from).collect(),
        Color::Rgb => {
            let rgb = img.to_rgb8().into_raw();
            let mut out = vec![0.0f32; 3 * w * h];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    out[c * w * h + i] = f32::from(px[c]);
                }
            }
            out
        }
    };
    let mut resized = resize_bilinear(&planar, color.channels(), h, w, extent, extent);
    for v in &mut resized {
        *v = (*v / 255.0).clamp(0.0, 1.0);
    }
    Ok(resized)
}

pub fn load_image(path: &Path, color: Color, image_index: &str) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading image {image_index} at {}", path.display()))?;
    preprocess_image(&bytes, color, INPUT_EXTENT, image_index)
}

/// Encodes an 8-bit grayscale PNG.
pub fn encode_gray_png(pixels: &[u8], width: u32, height: u32) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let img = image::GrayImage::from_raw(width, height, pixels.to_vec()).context("pixel buffer does not match extents")?;
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}
