//! 8-bit PNG frames and masks.
//!
//! Frames are quantised once on export (`round(255·x)`), so a saved
//! quantised frame reloads bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::frame::RgbFrame;
use crate::mask::MaskPlane;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    reader.decode().map_err(|e| Error::format(path, e.to_string()))
}

/// Any colour type is converted to 8-bit RGB; alpha is dropped.
pub fn load_frame(path: &Path) -> Result<RgbFrame> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::format(path, "empty image"));
    }
    Ok(RgbFrame::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0))
}

pub fn save_frame(path: &Path, frame: &RgbFrame) -> Result<()> {
    let q = frame.quantized();
    let (h, w) = q.dims();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (q.get(c, y as usize, x as usize) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

/// Grey level above 127 marks a hole pixel. In strict mode every level
/// must be exactly 0 or 255.
pub fn load_mask_checked(path: &Path, strict: bool) -> Result<MaskPlane> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if strict {
        if let Some(v) = img.pixels().map(|p| p.0[0]).find(|&v| v != 0 && v != 255) {
            return Err(Error::format(path, format!("mask level {v} is neither 0 nor 255")));
        }
    }
    MaskPlane::from_bits(h, w, img.pixels().map(|p| p.0[0] > 127).collect())
}

pub fn load_mask(path: &Path) -> Result<MaskPlane> {
    load_mask_checked(path, false)
}

pub fn save_mask(path: &Path, mask: &MaskPlane) -> Result<()> {
    let (h, w) = mask.dims();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }]));
    img.save(path)?;
    Ok(())
}

/// Mask file for `frame` inside `mask_dir`: same stem, any supported extension.
pub fn matching_mask(frame: &Path, mask_dir: &Path) -> Result<PathBuf> {
    let stem = frame.file_stem().ok_or_else(|| Error::invalid(format!("{}: no file name", frame.display())))?;
    for ext in EXTENSIONS {
        let candidate = mask_dir.join(stem).with_extension(ext);
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no mask for {} in {}", frame.display(), mask_dir.display()),
    )))
}
