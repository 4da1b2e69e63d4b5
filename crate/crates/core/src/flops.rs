//! Analytic operation counts. One multiply-add is two FLOPs.
//!
//! A CP-ALS sweep updates every mode once. Updating mode `n` of an order-`N`
//! tensor with rank `R` costs
//!
//! * `2·R·I_n·J_n` for the MTTKRP, `J_n = ∏_{m≠n} I_m`,
//! * `Σ_{m≠n} 2·I_m·R²` for the Gram matrices of the other factors,
//! * `R²·(N−2)` for their Hadamard product,
//! * `R³` for the linear solve.
//!
//! The spatial branch costs `2·9·64·64` per filter and image. Forest inference
//! is counted in comparisons, one per visited node, and kept apart from FLOPs.

use serde::{Deserialize, Serialize};

use crate::features::{ParafacFeatureSpec, SpatialFeatureSpec, CUBE};
use crate::forest::ForestOptions;
use crate::preprocess::PIXELS;

pub const KERNEL_TAPS: u64 = 9;

pub fn cost_cp_als(shape: &[usize], rank: usize, sweeps: usize) -> u64 {
    let n = shape.len() as u64;
    let r = rank as u64;
    let dims: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    let total: u64 = dims.iter().product();
    let per_sweep: u64 = dims
        .iter()
        .enumerate()
        .map(|(mode, &i_n)| {
            let j_n = total.checked_div(i_n).unwrap_or(0);
            let grams: u64 = dims
                .iter()
                .enumerate()
                .filter(|&(m, _)| m != mode)
                .map(|(_, &i_m)| 2 * i_m * r * r)
                .sum();
            2 * r * i_n * j_n + grams + r * r * n.saturating_sub(2) + r * r * r
        })
        .sum();
    sweeps as u64 * per_sweep
}

pub fn cost_spatial(filters: usize) -> u64 {
    2 * filters as u64 * KERNEL_TAPS * PIXELS as u64
}

/// Depth assumed for a tree grown on `n_train` samples: `ceil(log2 n)`,
/// capped by the configured maximum depth.
pub fn expected_depth(n_train: usize, forest: &ForestOptions) -> u64 {
    let balanced = if n_train <= 1 {
        0
    } else {
        (usize::BITS - (n_train - 1).leading_zeros()) as u64
    };
    match forest.max_depth {
        Some(d) => balanced.min(d as u64),
        None => balanced,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub model: String,
    pub flops: u64,
    pub note: String,
}

/// Published comparison figures carried as metadata, not recomputed.
pub fn default_references() -> Vec<ReferenceRow> {
    let published = "published figure at native resolution, not recomputed";
    [
        ("This Study (Rank 3)", 1_813_869_832),
        ("This Study (Rank 16)", 1_814_295_816),
        ("Tabular CNN", 37_853_010),
        ("LeNet (standard CNN)", 429_128),
        ("LeNet KAN", 3_298_728),
        ("AlexNet (standard CNN)", 714_197_696),
        ("AlexNet KAN", 1_611_568_352),
    ]
    .into_iter()
    .map(|(model, flops)| ReferenceRow {
        model: model.to_string(),
        flops,
        note: published.to_string(),
    })
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlops {
    pub cp_als: u64,
    pub spatial_conv: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageComparisons {
    pub forest_inference: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub convention: String,
    pub n_images: u64,
    pub parafac_rank: Option<usize>,
    pub als_sweeps: Option<usize>,
    pub spatial_filters: Option<usize>,
    pub tree_count: usize,
    pub expected_depth: u64,
    pub flops: StageFlops,
    pub total_flops: u64,
    pub comparisons: StageComparisons,
    pub references: Vec<ReferenceRow>,
}

/// Counts for extracting features from and classifying `n_images` images.
/// CP-ALS is charged the full sweep budget of `parafac.als.max_sweeps`.
pub fn cost_pipeline(
    n_images: usize,
    parafac: Option<&ParafacFeatureSpec>,
    spatial: Option<&SpatialFeatureSpec>,
    forest: &ForestOptions,
    depth: u64,
    references: Vec<ReferenceRow>,
) -> FlopsReport {
    let n = n_images as u64;
    let cp = parafac.map_or(0, |p| cost_cp_als(&CUBE, p.rank, p.als.max_sweeps));
    let conv = spatial.map_or(0, |s| cost_spatial(s.filter_count));
    let flops = StageFlops {
        cp_als: n * cp,
        spatial_conv: n * conv,
    };
    FlopsReport {
        convention: "one multiply-add = 2 FLOPs; forest inference counted in comparisons".into(),
        n_images: n,
        parafac_rank: parafac.map(|p| p.rank),
        als_sweeps: parafac.map(|p| p.als.max_sweeps),
        spatial_filters: spatial.map(|s| s.filter_count),
        tree_count: forest.tree_count,
        expected_depth: depth,
        total_flops: flops.cp_als + flops.spatial_conv,
        flops,
        comparisons: StageComparisons {
            forest_inference: n * forest.tree_count as u64 * depth,
        },
        references,
    }
}
