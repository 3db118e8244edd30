//! 8-bit RGB images to and from `[0, 255]` float tensors.

use std::path::Path;

use image::{ImageFormat, RgbImage};
use neural_mrf::Tensor;

use crate::UsageError;

pub fn to_tensor(img: &RgbImage) -> Tensor {
    Tensor::from_fn(3, img.height() as usize, img.width() as usize, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f32
    })
}

/// Rounds and clamps to 8 bits.
pub fn to_rgb(t: &Tensor) -> RgbImage {
    let (_, h, w) = t.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| t.get(c, y as usize, x as usize).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Decodes a PNG or JPEG file.
pub fn load(path: &Path) -> Result<Tensor, UsageError> {
    let img = image::ImageReader::open(path)
        .map_err(|e| UsageError(format!("cannot open {}: {e}", path.display())))?
        .with_guessed_format()
        .map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?
        .decode()
        .map_err(|e| UsageError(format!("cannot decode {}: {e}", path.display())))?;
    Ok(to_tensor(&img.to_rgb8()))
}

pub fn save_png(t: &Tensor, path: &Path) -> anyhow::Result<()> {
    to_rgb(t).save_with_format(path, ImageFormat::Png)?;
    Ok(())
}
