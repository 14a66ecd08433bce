//! Binary portable pixmap (P6) and graymap (P5) I/O, scaled to `[0, 1]`.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How raw depth samples are brought into `[0, 1]` after maxval scaling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum DepthNorm {
    /// Divide by the per-image maximum (an all-zero map stays zero).
    #[default]
    Max,
    /// Divide by a fixed scale, clamping to 1.
    Scale(f64),
    /// Keep the maxval-scaled values.
    Raw,
}

fn decode(bytes: &[u8], magic: &[u8; 2], origin: &str) -> Result<DynamicImage> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            origin,
            format!(
                "expected a binary {} file",
                std::str::from_utf8(magic).unwrap_or("?")
            ),
        ));
    }
    image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
        .map_err(|e| Error::format(origin, e.to_string()))
}

/// Decodes an 8-bit binary P6 image into `[H, W, 3]`.
pub fn decode_rgb(bytes: &[u8], origin: &str) -> Result<Tensor<f32>> {
    match decode(bytes, b"P6", origin)? {
        DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
            Tensor::new(vec![h as usize, w as usize, 3], data)
        }
        _ => Err(Error::format(origin, "RGB images must be 8-bit")),
    }
}

/// Decodes an 8- or 16-bit binary P5 image into `[H, W, 1]`, scaled by maxval only.
pub fn decode_depth_raw(bytes: &[u8], origin: &str) -> Result<Tensor<f32>> {
    let (w, h, data): (u32, u32, Vec<f32>) = match decode(bytes, b"P5", origin)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            (w, h, img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect())
        }
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            let raw = img.into_raw();
            (w, h, raw.into_iter().map(|v| f32::from(v) / 65535.0).collect())
        }
        _ => return Err(Error::format(origin, "depth maps must be single-channel")),
    };
    Tensor::new(vec![h as usize, w as usize, 1], data)
}

pub fn normalize_depth(mut depth: Tensor<f32>, norm: DepthNorm) -> Result<Tensor<f32>> {
    match norm {
        DepthNorm::Max => {
            let max = depth.data().iter().fold(0.0f32, |m, &v| m.max(v));
            if max > 0.0 {
                depth.data_mut().iter_mut().for_each(|v| *v /= max);
            }
        }
        DepthNorm::Scale(s) => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Data(format!("depth_scale must be positive, got {s}")));
            }
            let s = s as f32;
            depth.data_mut().iter_mut().for_each(|v| *v = (*v / s).min(1.0));
        }
        DepthNorm::Raw => {}
    }
    Ok(depth)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_image_rgb(path: &Path) -> Result<Tensor<f32>> {
    decode_rgb(&read(path)?, &path.display().to_string())
}

pub fn load_image_depth(path: &Path, norm: DepthNorm) -> Result<Tensor<f32>> {
    let raw = decode_depth_raw(&read(path)?, &path.display().to_string())?;
    normalize_depth(raw, norm)
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

fn hw(t: &Tensor<f32>, channels: usize, op: &'static str) -> Result<(u32, u32)> {
    match t.shape() {
        &[h, w, c] if c == channels => Ok((w as u32, h as u32)),
        s => Err(Error::shape(op, format!("expected [H,W,{channels}], got {s:?}"))),
    }
}

fn header(magic: &str, w: u32, h: u32, maxval: u32) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes()
}

pub fn encode_rgb(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (w, h) = hw(t, 3, "encode_rgb")?;
    let mut out = header("P6", w, h, 255);
    out.extend(t.data().iter().map(|&v| quantize(v, 255.0) as u8));
    Ok(out)
}

/// Encodes `[H, W, 1]` as P5 with 8 or 16 (big-endian) bits per sample.
pub fn encode_depth(t: &Tensor<f32>, sixteen_bit: bool) -> Result<Vec<u8>> {
    let (w, h) = hw(t, 1, "encode_depth")?;
    if sixteen_bit {
        let mut out = header("P5", w, h, 65535);
        out.extend(t.data().iter().flat_map(|&v| (quantize(v, 65535.0) as u16).to_be_bytes()));
        Ok(out)
    } else {
        let mut out = header("P5", w, h, 255);
        out.extend(t.data().iter().map(|&v| quantize(v, 255.0) as u8));
        Ok(out)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_image_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write(path, &encode_rgb(t)?)
}

pub fn write_image_depth(path: &Path, t: &Tensor<f32>, sixteen_bit: bool) -> Result<()> {
    write(path, &encode_depth(t, sixteen_bit)?)
}
