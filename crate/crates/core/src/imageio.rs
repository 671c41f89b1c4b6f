//! 8-bit PNG I/O and conversion to unit-range tensors.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::WriteFailure {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::WriteFailure {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
    }
    Ok(())
}

/// `(1, 3, H, W)` tensor with values `v / 255`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data).unwrap()
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// First batch item of a 3-channel tensor as an 8-bit image.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (_, c, h, w) = t.check_nchw("tensor_to_rgb")?;
    if c != 3 {
        return Err(Error::ChannelMismatch(format!("expected 3 channels, got {c}")));
    }
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| quantize(t.at(0, ch, y as usize, x as usize));
        Rgb([at(0), at(1), at(2)])
    }))
}

/// First batch item, first channel of a tensor as an 8-bit gray image.
pub fn tensor_to_gray(t: &Tensor) -> Result<GrayImage> {
    let (_, _, h, w) = t.check_nchw("tensor_to_gray")?;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize(t.at(0, 0, y as usize, x as usize))])
    }))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    Ok(rgb_to_tensor(&read_rgb(path)?))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_rgb(path, &tensor_to_rgb(t)?)
}
