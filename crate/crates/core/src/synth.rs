//! Synthetic labelled image trees. Class `c` places a Gaussian blob at angle
//! `2πc/K` on a ring around the image centre; odd classes use a wider blob.
//! Positions, widths and amplitudes are jittered and Gaussian noise is added,
//! all from seeds derived per (class, image).

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::ExtendedColorType;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::SIDE;
use crate::seed::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub per_class: Vec<usize>,
    pub seed: u64,
    /// Byte-identical copies of the first image, per class.
    pub duplicates: usize,
    /// Constant-intensity images per class; the cleaner rejects these.
    pub uniform: usize,
    pub noise_sigma: f64,
}

impl SynthOptions {
    pub fn new(per_class: Vec<usize>, seed: u64) -> Self {
        SynthOptions {
            per_class,
            seed,
            duplicates: 0,
            uniform: 0,
            noise_sigma: 8.0,
        }
    }

    /// The default fixture: eight classes, the last one half-sized.
    pub fn fixture(seed: u64) -> Self {
        SynthOptions::new(vec![40, 40, 40, 40, 40, 40, 40, 20], seed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub files: usize,
    pub per_class: Vec<usize>,
}

pub fn class_dir_name(class: usize) -> String {
    format!("class_{class}")
}

/// Pixels of image `index` of `class` out of `classes`.
pub fn render(class: usize, classes: usize, index: usize, opts: &SynthOptions) -> Vec<u8> {
    let mut rng = rng_from(opts.seed, &[class as u64, index as u64]);
    let half = SIDE as f64 / 2.0;
    let angle = 2.0 * PI * class as f64 / classes.max(1) as f64;
    let cx = half + 16.0 * angle.cos() + rng.random_range(-2.0..2.0);
    let cy = half + 16.0 * angle.sin() + rng.random_range(-2.0..2.0);
    let width = if class.is_multiple_of(2) { 4.0 } else { 7.0 } * rng.random_range(0.9..1.1);
    let amplitude = rng.random_range(170.0..210.0);
    let noise = Normal::new(0.0, opts.noise_sigma).expect("finite sigma");
    let mut out = Vec::with_capacity(SIDE * SIDE);
    for r in 0..SIDE {
        for c in 0..SIDE {
            let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
            let v = 30.0 + amplitude * (-d2 / (2.0 * width * width)).exp() + noise.sample(&mut rng);
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn write_png(path: &Path, pixels: &[u8]) -> Result<()> {
    image::save_buffer(
        path,
        pixels,
        SIDE as u32,
        SIDE as u32,
        ExtendedColorType::L8,
    )
    .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Write `root/class_<c>/img_<i>.png` for every class, plus any planted
/// duplicates (`dup_<i>.png`) and uniform images (`flat_<i>.png`).
pub fn generate(root: &Path, opts: &SynthOptions) -> Result<SynthSummary> {
    if opts.per_class.is_empty() {
        return Err(Error::config("per_class", "at least one class is required"));
    }
    if !(opts.noise_sigma.is_finite() && opts.noise_sigma >= 0.0) {
        return Err(Error::config(
            "noise_sigma",
            "must be finite and nonnegative",
        ));
    }
    let classes = opts.per_class.len();
    let mut files = 0;
    let mut per_class = Vec::with_capacity(classes);
    for (class, &count) in opts.per_class.iter().enumerate() {
        let dir: PathBuf = root.join(class_dir_name(class));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut written = 0;
        for i in 0..count {
            write_png(
                &dir.join(format!("img_{i:04}.png")),
                &render(class, classes, i, opts),
            )?;
            written += 1;
        }
        if count > 0 {
            let first = render(class, classes, 0, opts);
            for d in 0..opts.duplicates {
                write_png(&dir.join(format!("dup_{d:04}.png")), &first)?;
                written += 1;
            }
        }
        for u in 0..opts.uniform {
            let level = (40 + 20 * u % 200) as u8;
            write_png(
                &dir.join(format!("flat_{u:04}.png")),
                &vec![level; SIDE * SIDE],
            )?;
            written += 1;
        }
        files += written;
        per_class.push(written);
    }
    Ok(SynthSummary { files, per_class })
}
