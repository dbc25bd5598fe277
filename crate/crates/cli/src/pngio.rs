//! Lossless image IO: 8-bit RGB for images, 8-bit gray for binary masks,
//! 16-bit gray for depth/condition maps.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cnc_core::tensor::Tensor;
use image::{DynamicImage, ImageBuffer, Luma, Rgb};

pub fn save_rgb8(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        bail!("save_rgb8 expects [3,H,W], got {s:?}");
    }
    let (h, w) = (s[1], s[2]);
    let mut img = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| {
                (t.data()[ch * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_rgb8(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = rgb.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                t.data_mut()[ch * h * w + y * w + x] = p.0[ch] as f32 / 255.0;
            }
        }
    }
    Ok(t)
}

pub fn save_gray16(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    if s.len() != 2 {
        bail!("save_gray16 expects [H,W], got {s:?}");
    }
    let (h, w) = (s[0], s[1]);
    let mut img = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (t.data()[y * w + x].clamp(0.0, 1.0) * 65535.0).round() as u16;
            img.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    DynamicImage::ImageLuma16(img)
        .save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_gray16(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut t = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            t.data_mut()[y * w + x] = gray.get_pixel(x as u32, y as u32).0[0] as f32 / 65535.0;
        }
    }
    Ok(t)
}

pub fn save_mask8(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    if s.len() != 2 {
        bail!("save_mask8 expects [H,W], got {s:?}");
    }
    let (h, w) = (s[0], s[1]);
    let mut img = ImageBuffer::<Luma<u8>, Vec<u8>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if t.data()[y * w + x] > 0.5 { 255u8 } else { 0 };
            img.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_mask8(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut t = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            t.data_mut()[y * w + x] =
                if gray.get_pixel(x as u32, y as u32).0[0] > 127 { 1.0 } else { 0.0 };
        }
    }
    Ok(t)
}

/// Tile same-sized [3,H,W] images into a grid, row-major.
pub fn tile_grid(images: &[Tensor<f32>], cols: usize) -> Result<Tensor<f32>> {
    if images.is_empty() {
        bail!("no images to tile");
    }
    let s = images[0].shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let cols = cols.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let pad = 2usize;
    let (gh, gw) = (rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad);
    let mut grid = Tensor::full(&[3, gh, gw], 1.0f32);
    for (i, img) in images.iter().enumerate() {
        if img.shape() != s.as_slice() {
            bail!("grid images must share a shape");
        }
        let (r, c) = (i / cols, i % cols);
        let (oy, ox) = (r * (h + pad), c * (w + pad));
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    grid.data_mut()[ch * gh * gw + (oy + y) * gw + ox + x] =
                        img.data()[ch * h * w + y * w + x];
                }
            }
        }
    }
    Ok(grid)
}
