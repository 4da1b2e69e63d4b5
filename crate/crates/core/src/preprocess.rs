//! Image cleaning: orientation correction, grayscale, bilinear resize,
//! quality rejection and flattening.
//!
//! Every rounding step is half-away-from-zero so that the same file yields
//! the same 64x64 image on every platform.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIDE: usize = 64;
pub const PIXELS: usize = SIDE * SIDE;

/// Decoded 8-bit image with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    /// EXIF orientation tag, `None` when absent.
    pub orientation: Option<u16>,
}

impl RawImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<u8>,
        orientation: Option<u16>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(
                "image dimensions must be positive".into(),
            ));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "expected 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {width}x{height}x{channels} image",
                pixels.len()
            )));
        }
        Ok(RawImage {
            width,
            height,
            channels,
            pixels,
            orientation,
        })
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, pixels, None)
    }

    fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let start = (y * self.width + x) * self.channels;
        &self.pixels[start..start + self.channels]
    }
}

/// Single-channel 8-bit image of arbitrary size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Cleaned 64x64 grayscale image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage64 {
    pixels: Vec<u8>,
}

impl GrayImage64 {
    pub fn new(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {SIDE}x{SIDE} image",
                pixels.len()
            )));
        }
        Ok(GrayImage64 { pixels })
    }

    pub fn zeros() -> Self {
        GrayImage64 {
            pixels: vec![0; PIXELS],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * SIDE + col]
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.pixels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectionReason {
    NonFinite,
    UniformIntensity,
    Unreadable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quality {
    Accept,
    Reject(RejectionReason),
}

fn round_half_away(v: f64) -> f64 {
    // f64::round rounds half away from zero.
    v.round()
}

/// Apply the flip/rotation encoded by the EXIF orientation tag. The result
/// always carries tag 1. Absent or out-of-range tags are treated as 1.
pub fn apply_exif_orientation(img: &RawImage) -> RawImage {
    let tag = match img.orientation {
        None => 1,
        Some(t @ 1..=8) => t,
        Some(t) => {
            log::warn!("ignoring out-of-range EXIF orientation tag {t}");
            1
        }
    };
    let (w, h) = (img.width, img.height);
    let swaps = tag >= 5;
    let (ow, oh) = if swaps { (h, w) } else { (w, h) };
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for oy in 0..oh {
        for ox in 0..ow {
            // source coordinate of output pixel (ox, oy)
            let (sx, sy) = match tag {
                1 => (ox, oy),
                2 => (w - 1 - ox, oy),
                3 => (w - 1 - ox, h - 1 - oy),
                4 => (ox, h - 1 - oy),
                5 => (oy, ox),
                6 => (oy, h - 1 - ox),
                7 => (w - 1 - oy, h - 1 - ox),
                8 => (w - 1 - oy, ox),
                _ => unreachable!(),
            };
            pixels.extend_from_slice(img.pixel(sx, sy));
        }
    }
    RawImage {
        width: ow,
        height: oh,
        channels: img.channels,
        pixels,
        orientation: Some(1),
    }
}

/// Luma as `0.2989 R + 0.5870 G + 0.1140 B`, rounded half away from zero.
/// Evaluated exactly in fixed point (weights scaled by 10^4).
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let sum = 2989 * r as u32 + 5870 * g as u32 + 1140 * b as u32;
    ((sum + 5000) / 10_000).min(255) as u8
}

pub fn to_grayscale(img: &RawImage) -> RawImage {
    if img.channels == 1 {
        return img.clone();
    }
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| luma(p[0], p[1], p[2]))
        .collect();
    RawImage {
        width: img.width,
        height: img.height,
        channels: 1,
        pixels,
        orientation: img.orientation,
    }
}

/// Bilinear resize to real-valued samples, half-pixel-center convention with
/// border clamping. No rounding is applied.
pub fn resize_bilinear_real(
    pixels: &[u8],
    width: usize,
    height: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f64> {
    let axis = |out: usize, len_out: usize, len_in: usize| {
        let s = ((out as f64 + 0.5) * len_in as f64 / len_out as f64 - 0.5)
            .clamp(0.0, (len_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, out_w, width)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, out_h, height);
        for &(x0, x1, fx) in &xs {
            let p = |xx: usize, yy: usize| pixels[yy * width + xx] as f64;
            let top = (1.0 - fx) * p(x0, y0) + fx * p(x1, y0);
            let bottom = (1.0 - fx) * p(x0, y1) + fx * p(x1, y1);
            out.push((1.0 - fy) * top + fy * bottom);
        }
    }
    out
}

fn quantize(samples: &[f64]) -> Vec<u8> {
    samples
        .iter()
        .map(|&v| round_half_away(v).clamp(0.0, 255.0) as u8)
        .collect()
}

/// Bilinear resize of a single-channel image to an arbitrary size.
pub fn resize_bilinear(img: &RawImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if img.channels != 1 {
        return Err(Error::InvalidInput(
            "resize expects a single-channel image".into(),
        ));
    }
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidInput("output size must be positive".into()));
    }
    let real = resize_bilinear_real(&img.pixels, img.width, img.height, out_w, out_h);
    Ok(GrayImage {
        width: out_w,
        height: out_h,
        pixels: quantize(&real),
    })
}

pub fn resize_to_64(img: &RawImage) -> Result<GrayImage64> {
    let g = resize_bilinear(img, SIDE, SIDE)?;
    GrayImage64::new(g.pixels)
}

/// Classify real-valued samples of a decoded image.
pub fn quality_check(samples: &[f64]) -> Quality {
    if samples.iter().any(|v| !v.is_finite()) {
        return Quality::Reject(RejectionReason::NonFinite);
    }
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if samples.is_empty() || lo == hi {
        return Quality::Reject(RejectionReason::UniformIntensity);
    }
    Quality::Accept
}

pub fn flatten(img: &GrayImage64) -> Vec<f64> {
    img.pixels.iter().map(|&p| p as f64).collect()
}

/// Inverse of [`flatten`] for vectors holding 8-bit values.
pub fn unflatten(v: &[f64]) -> Result<GrayImage64> {
    if v.iter()
        .any(|&x| !(0.0..=255.0).contains(&x) || x.fract() != 0.0)
    {
        return Err(Error::InvalidInput(
            "values are not 8-bit intensities".into(),
        ));
    }
    GrayImage64::new(v.iter().map(|&x| x as u8).collect())
}

/// Orientation, grayscale, resize and quality check in sequence.
pub fn clean(img: &RawImage) -> std::result::Result<GrayImage64, RejectionReason> {
    let upright = apply_exif_orientation(img);
    let gray = to_grayscale(&upright);
    let real = resize_bilinear_real(&gray.pixels, gray.width, gray.height, SIDE, SIDE);
    let rounded: Vec<f64> = real.iter().map(|&v| round_half_away(v)).collect();
    match quality_check(&rounded) {
        Quality::Reject(reason) => Err(reason),
        Quality::Accept => Ok(GrayImage64::new(quantize(&rounded)).expect("64x64 output")),
    }
}

/// Decode a PNG/JPEG/BMP file, reading the EXIF orientation tag if present.
pub fn load_image(path: &Path) -> std::result::Result<RawImage, RejectionReason> {
    use image::ImageDecoder;

    let decode = || -> image::ImageResult<RawImage> {
        let reader = image::ImageReader::open(path)?.with_guessed_format()?;
        let mut decoder = reader.into_decoder()?;
        let orientation = decoder
            .exif_metadata()
            .ok()
            .flatten()
            .and_then(orientation_from_exif);
        let dynamic = image::DynamicImage::from_decoder(decoder)?;
        let (width, height) = (dynamic.width() as usize, dynamic.height() as usize);
        let (channels, pixels) = if dynamic.color().has_color() {
            (3, dynamic.into_rgb8().into_raw())
        } else {
            (1, dynamic.into_luma8().into_raw())
        };
        Ok(RawImage {
            width,
            height,
            channels,
            pixels,
            orientation,
        })
    };
    decode().map_err(|e| {
        log::debug!("cannot decode {}: {e}", path.display());
        RejectionReason::Unreadable
    })
}

fn orientation_from_exif(raw: Vec<u8>) -> Option<u16> {
    let exif = exif::Reader::new().read_raw(raw).ok()?;
    let field = exif.get_field(exif::Tag::Orientation, exif::In::PRIMARY)?;
    field.value.get_uint(0).map(|v| v as u16)
}

/// Load and clean a file in one step.
pub fn preprocess_file(path: &Path) -> std::result::Result<GrayImage64, RejectionReason> {
    clean(&load_image(path)?)
}
