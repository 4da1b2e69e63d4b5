//! Per-image CP/PARAFAC tensor features fused with a spatial filter-bank
//! branch, classified by a class-weighted random forest and evaluated under
//! nested stratified cross-validation.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod flops;
pub mod forest;
pub mod preprocess;
pub mod seed;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
