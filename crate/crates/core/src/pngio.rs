//! Lossless PNG encoding of image tensors.
//!
//! RGB images are 8-bit, masks 8-bit grayscale (0 or 255), anomaly maps
//! 16-bit grayscale scaled by 65535.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// [3×H×W] in [0,1] → 8-bit RGB PNG.
pub fn save_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::dim("save_rgb", format!("expected 3 channels, got {}", c)));
    }
    let mut buf = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                to_u8(image.data()[y * w + x]),
                to_u8(image.data()[h * w + y * w + x]),
                to_u8(image.data()[2 * h * w + y * w + x]),
            ]);
            buf.put_pixel(x as u32, y as u32, px);
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                data[ch * h * w + y * w + x] = px[ch] as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// [H×W] binary → 8-bit grayscale PNG with values 0 or 255.
pub fn save_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = mask.dims2()?;
    let mut buf = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if mask.data()[y * w + x] > 0.5 { 255 } else { 0 };
            buf.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            if img.get_pixel(x as u32, y as u32)[0] > 127 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(&[h, w], data)
}

/// [H×W] in [0,1] → 16-bit grayscale PNG scaled by 65535.
pub fn save_map16(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = map.dims2()?;
    let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map.data()[y * w + x] * 65535.0).round().clamp(0.0, 65535.0) as u16;
            buf.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Tensor::from_fn(&[3, 4, 5], |i| ((i * 13) % 256) as f64 / 255.0);
        save_rgb(&path, &img).unwrap();
        let back = load_rgb(&path).unwrap();
        assert!(back.bit_equal(&img));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask = Tensor::from_fn(&[4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        save_mask(&path, &mask).unwrap();
        let back = load_mask(&path).unwrap();
        assert!(back.bit_equal(&mask));
    }
}
