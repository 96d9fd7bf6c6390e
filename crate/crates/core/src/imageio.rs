//! 8-bit PNG conversion for `[3, H, W]` images and `[H, W]` masks.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::diffcore::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("expected shape {expected}, got {got:?}")]
    Shape { expected: &'static str, got: Vec<usize> },
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_png(image: &Tensor) -> Result<RgbImage, ImageError> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(ImageError::Shape {
            expected: "[3, H, W]",
            got: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([quantize(d[p]), quantize(d[h * w + p]), quantize(d[2 * h * w + p])])
    }))
}

pub fn mask_to_png(mask: &Tensor) -> Result<GrayImage, ImageError> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(ImageError::Shape {
            expected: "[H, W]",
            got: s.to_vec(),
        });
    }
    let w = s[1];
    Ok(GrayImage::from_fn(w as u32, s[0] as u32, |x, y| {
        image::Luma([quantize(mask.data()[y as usize * w + x as usize])])
    }))
}

pub fn save_rgb(path: impl AsRef<Path>, image: &Tensor) -> Result<(), ImageError> {
    rgb_to_png(image)?.save(path)?;
    Ok(())
}

pub fn save_mask(path: impl AsRef<Path>, mask: &Tensor) -> Result<(), ImageError> {
    mask_to_png(mask)?.save(path)?;
    Ok(())
}

/// Loads any PNG as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor, ImageError> {
    let img = ImageReader::open(path)?.decode()?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data).expect("sized above"))
}

/// Loads a PNG as a binary `[H, W]` mask (gray level ≥ 128 is foreground).
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor, ImageError> {
    let img = ImageReader::open(path)?.decode()?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(&[h, w], data).expect("sized above"))
}
