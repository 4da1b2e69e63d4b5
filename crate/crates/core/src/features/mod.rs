//! Fused feature extraction: a per-image PARAFAC branch and a spatial
//! filter-bank branch, z-scored with training-fold statistics.

mod matrix;

pub use matrix::{check_embedding_rows, import_embeddings, FeatureMatrix, FMX1_MAGIC};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{GrayImage64, SIDE};
use crate::seed::rng_from;
use crate::tensor::{canonicalize, cp_als, AlsOptions, DenseTensor};

/// 64x64 images are reshaped row-major into this cube before decomposition.
pub const CUBE: [usize; 3] = [16, 16, 16];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParafacFeatureSpec {
    pub rank: usize,
    pub als: AlsOptions,
}

impl ParafacFeatureSpec {
    pub fn new(rank: usize) -> Self {
        ParafacFeatureSpec {
            rank,
            als: AlsOptions::default(),
        }
    }

    /// `R` weights plus three `16 x R` factors.
    pub fn len(&self) -> usize {
        self.rank * (1 + CUBE.iter().sum::<usize>())
    }

    pub fn is_empty(&self) -> bool {
        self.rank == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialFeatureSpec {
    pub filter_count: usize,
    pub seed: u64,
}

impl Default for SpatialFeatureSpec {
    fn default() -> Self {
        SpatialFeatureSpec {
            filter_count: 32,
            seed: 0,
        }
    }
}

impl SpatialFeatureSpec {
    /// Global average and global max per filter.
    pub fn len(&self) -> usize {
        2 * self.filter_count
    }

    pub fn is_empty(&self) -> bool {
        self.filter_count == 0
    }

    /// `filter_count` 3x3 kernels with entries uniform in [-1, 1), drawn
    /// filter by filter in row-major order.
    pub fn filters(&self) -> Vec<[f64; 9]> {
        let mut rng = rng_from(self.seed, &[]);
        (0..self.filter_count)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParafacFeatures {
    pub values: Vec<f64>,
    /// The image decomposed to an all-zero model.
    pub degenerate: bool,
}

fn scaled(img: &GrayImage64) -> Vec<f64> {
    img.as_bytes().iter().map(|&p| p as f64 / 255.0).collect()
}

/// Decompose the [0,1]-scaled image cube and emit
/// `[λ_1..λ_R, vec(A_0), vec(A_1), vec(A_2)]` from the canonical model.
pub fn parafac_features(img: &GrayImage64, spec: &ParafacFeatureSpec) -> Result<ParafacFeatures> {
    if spec.rank == 0 {
        return Err(Error::InvalidInput(
            "PARAFAC rank must be at least 1".into(),
        ));
    }
    let tensor = DenseTensor::new(CUBE.to_vec(), scaled(img))?;
    let model = cp_als(&tensor, spec.rank, &spec.als)?;
    if model.degenerate {
        return Ok(ParafacFeatures {
            values: vec![0.0; spec.len()],
            degenerate: true,
        });
    }
    let canon = canonicalize(&model);
    Ok(ParafacFeatures {
        values: layout(&canon.weights, canon.factors.iter().map(|f| f.as_slice())),
        degenerate: canon.degenerate,
    })
}

fn layout<'a>(weights: &[f64], factors: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    // `+ 0.0` folds negative zero into positive zero
    weights
        .iter()
        .copied()
        .chain(factors.flat_map(|f| f.iter().copied()))
        .map(|v| v + 0.0)
        .collect()
}

/// Zero-padded 3x3 cross-correlation with each filter, rectified, then
/// pooled to (global average, global max) per filter.
pub fn spatial_features(img: &GrayImage64, spec: &SpatialFeatureSpec) -> Vec<f64> {
    spatial_features_with(img, &spec.filters())
}

fn spatial_features_with(img: &GrayImage64, filters: &[[f64; 9]]) -> Vec<f64> {
    let x = scaled(img);
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= SIDE as isize || c >= SIDE as isize {
            0.0
        } else {
            x[r as usize * SIDE + c as usize]
        }
    };
    let mut out = Vec::with_capacity(2 * filters.len());
    for k in filters {
        let mut sum = 0.0;
        let mut max = 0.0_f64;
        for r in 0..SIDE as isize {
            for c in 0..SIDE as isize {
                let mut acc = 0.0;
                for dr in 0..3 {
                    for dc in 0..3 {
                        acc += k[(dr * 3 + dc) as usize] * at(r + dr - 1, c + dc - 1);
                    }
                }
                let v = acc.max(0.0);
                sum += v;
                max = max.max(v);
            }
        }
        out.push(sum / (SIDE * SIDE) as f64);
        out.push(max);
    }
    out
}

/// Per-image blocks for a batch of images.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedFeatures {
    pub parafac: FeatureMatrix,
    pub spatial: FeatureMatrix,
    pub degenerate: Vec<bool>,
}

impl ExtractedFeatures {
    pub fn combined(&self) -> FeatureMatrix {
        FeatureMatrix::hconcat(&self.parafac, &self.spatial).expect("blocks share row count")
    }
}

fn to_f32_row(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Extract both branches for every image. Each image's features depend only
/// on the image and the specs, so the result is independent of how rayon
/// schedules the work.
pub fn extract_features(
    images: &[&GrayImage64],
    parafac: Option<&ParafacFeatureSpec>,
    spatial: Option<&SpatialFeatureSpec>,
) -> Result<ExtractedFeatures> {
    let filters = spatial.map(SpatialFeatureSpec::filters);
    let rows: Vec<(Vec<f32>, Vec<f32>, bool)> = images
        .par_iter()
        .map(|img| -> Result<_> {
            let (p, degenerate) = match parafac {
                Some(spec) => {
                    let f = parafac_features(img, spec)?;
                    (to_f32_row(&f.values), f.degenerate)
                }
                None => (Vec::new(), false),
            };
            let s = filters
                .as_ref()
                .map(|fs| to_f32_row(&spatial_features_with(img, fs)))
                .unwrap_or_default();
            Ok((p, s, degenerate))
        })
        .collect::<Result<_>>()?;
    let n = images.len();
    let p_len = parafac.map_or(0, ParafacFeatureSpec::len);
    let s_len = spatial.map_or(0, SpatialFeatureSpec::len);
    let mut p_data = Vec::with_capacity(n * p_len);
    let mut s_data = Vec::with_capacity(n * s_len);
    let mut degenerate = Vec::with_capacity(n);
    for (p, s, d) in rows {
        p_data.extend(p);
        s_data.extend(s);
        degenerate.push(d);
    }
    Ok(ExtractedFeatures {
        parafac: FeatureMatrix::new(n, p_len, p_data, p_len)?,
        spatial: FeatureMatrix::new(n, s_len, s_data, 0)?,
        degenerate,
    })
}

/// Per-column z-scoring with training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    /// Column means and population standard deviations, floored at
    /// [`STD_FLOOR`].
    pub fn fit(train: &FeatureMatrix) -> Result<Standardizer> {
        if train.rows() < 2 {
            return Err(Error::InvalidInput(
                "standardizer needs at least two training rows".into(),
            ));
        }
        let n = train.rows() as f64;
        let cols = train.cols();
        let mut mean = vec![0.0; cols];
        for i in 0..train.rows() {
            for (m, &v) in mean.iter_mut().zip(train.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cols];
        for i in 0..train.rows() {
            for ((s, &v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn transform(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        if m.cols() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "standardizer fit on {} columns applied to {}",
                self.mean.len(),
                m.cols()
            )));
        }
        let mut data = Vec::with_capacity(m.rows() * m.cols());
        for i in 0..m.rows() {
            for ((&v, mu), sd) in m.row(i).iter().zip(&self.mean).zip(&self.std) {
                data.push(((v as f64 - mu) / sd) as f32);
            }
        }
        FeatureMatrix::new(m.rows(), m.cols(), data, m.parafac_len())
    }
}

/// Raw concatenation of whichever blocks are present.
pub fn concat_blocks(
    parafac: Option<&FeatureMatrix>,
    spatial: Option<&FeatureMatrix>,
) -> Result<FeatureMatrix> {
    match (parafac, spatial) {
        (Some(p), Some(s)) => FeatureMatrix::hconcat(p, s),
        (Some(p), None) => p.clone().with_parafac_len(p.cols()),
        (None, Some(s)) => s.clone().with_parafac_len(0),
        (None, None) => Err(Error::InvalidInput("no feature blocks to fuse".into())),
    }
}

/// Standardized PARAFAC block followed by standardized spatial block. The
/// standardizer must have been fit on training rows of the same layout.
pub fn fuse(
    parafac: Option<&FeatureMatrix>,
    spatial: Option<&FeatureMatrix>,
    standardizer: &Standardizer,
) -> Result<FeatureMatrix> {
    standardizer.transform(&concat_blocks(parafac, spatial)?)
}
