//! Dense tensor algebra and CP/PARAFAC decomposition.

mod cp;
mod dense;
mod matrix;

pub use cp::{
    canonicalize, cp_als, cp_als_traced, fit_score, reconstruct, AlsInit, AlsOptions, AlsTrace,
    CpModel,
};
pub use dense::{fold, khatri_rao, khatri_rao_chain, unfold, DenseTensor};
pub use matrix::{cholesky, cholesky_solve_in_place, Matrix};
