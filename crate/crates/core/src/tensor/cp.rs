//! CP/PARAFAC decomposition by alternating least squares.
//!
//! Each sweep updates the factors in mode order. The update for mode `n`
//! solves the normal equations `A_n (V + ridge·I) = X_(n) · KR(A_m, m ≠ n)`,
//! where `V` is the Hadamard product of the other factors' Gram matrices,
//! and then moves the column norms of `A_n` into the component weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::matrix::{cholesky, cholesky_solve_in_place};
use crate::tensor::{khatri_rao_chain, unfold, DenseTensor, Matrix};

/// Starting factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlsInit {
    /// Entries uniform in [0, 1), drawn mode by mode, column by column.
    Uniform,
    /// Leading eigenvectors of `X_(n) X_(n)ᵀ` per mode; columns beyond the
    /// mode size keep their uniform draw.
    Svd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlsOptions {
    pub max_sweeps: usize,
    pub rel_fit_tolerance: f64,
    pub init: AlsInit,
    pub init_seed: u64,
    pub ridge: f64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        AlsOptions {
            max_sweeps: 100,
            rel_fit_tolerance: 1e-6,
            init: AlsInit::Svd,
            init_seed: 0,
            ridge: 1e-12,
        }
    }
}

impl AlsOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 {
            return Err(Error::InvalidInput("max_sweeps must be at least 1".into()));
        }
        if !(self.rel_fit_tolerance >= 0.0) || !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::InvalidInput(
                "ALS tolerance and ridge must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Weighted sum of rank-one components.
#[derive(Debug, Clone, PartialEq)]
pub struct CpModel {
    pub weights: Vec<f64>,
    /// One `I_n x R` matrix per mode.
    pub factors: Vec<Matrix>,
    /// Set when the model carries no signal (zero input or all weights zero).
    pub degenerate: bool,
}

impl CpModel {
    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }

    fn zero(shape: &[usize], rank: usize) -> Self {
        CpModel {
            weights: vec![0.0; rank],
            factors: shape.iter().map(|&d| Matrix::zeros(d, rank)).collect(),
            degenerate: true,
        }
    }
}

/// Per-sweep history of a decomposition.
#[derive(Debug, Clone, Default)]
pub struct AlsTrace {
    /// Frobenius reconstruction error after each sweep.
    pub errors: Vec<f64>,
    pub fits: Vec<f64>,
    pub converged: bool,
}

impl AlsTrace {
    pub fn sweeps(&self) -> usize {
        self.errors.len()
    }
}

pub fn cp_als(t: &DenseTensor, rank: usize, opts: &AlsOptions) -> Result<CpModel> {
    cp_als_traced(t, rank, opts).map(|(m, _)| m)
}

pub fn cp_als_traced(
    t: &DenseTensor,
    rank: usize,
    opts: &AlsOptions,
) -> Result<(CpModel, AlsTrace)> {
    opts.validate()?;
    if rank == 0 {
        return Err(Error::InvalidInput("CP rank must be at least 1".into()));
    }
    if t.order() < 2 {
        return Err(Error::InvalidInput(
            "CP decomposition needs at least two modes".into(),
        ));
    }
    let mut trace = AlsTrace::default();
    let norm = t.norm();
    if norm == 0.0 {
        return Ok((CpModel::zero(t.shape(), rank), trace));
    }

    let order = t.order();
    let unfoldings = (0..order)
        .map(|n| unfold(t, n))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.init_seed);
    let mut factors: Vec<Matrix> = t
        .shape()
        .iter()
        .map(|&dim| {
            let mut f = Matrix::zeros(dim, rank);
            for r in 0..rank {
                for i in 0..dim {
                    f[(i, r)] = rng.random::<f64>();
                }
            }
            f
        })
        .collect();
    if opts.init == AlsInit::Svd {
        for (f, x) in factors.iter_mut().zip(&unfoldings) {
            leading_eigenvectors(x, f);
        }
    }

    let mut weights = vec![1.0; rank];

    let mut prev_fit = f64::NAN;
    for _ in 0..opts.max_sweeps {
        for n in 0..order {
            let mut v = Matrix::from_vec(rank, rank, vec![1.0; rank * rank])?;
            for (m, f) in factors.iter().enumerate() {
                if m != n {
                    v.hadamard_assign(&f.gram());
                }
            }
            let others: Vec<&Matrix> = factors
                .iter()
                .enumerate()
                .filter(|&(m, _)| m != n)
                .map(|(_, f)| f)
                .collect();
            let kr = khatri_rao_chain(&others)?;
            let mttkrp = unfoldings[n].matmul(&kr)?;
            let mut updated = solve_normal_equations(&v, &mttkrp, opts.ridge);
            for r in 0..rank {
                let nrm = updated.column_norm(r);
                weights[r] = nrm;
                if nrm > 0.0 {
                    updated.scale_column(r, 1.0 / nrm);
                }
            }
            factors[n] = updated;
        }
        let model = CpModel {
            weights: weights.clone(),
            factors: factors.clone(),
            degenerate: false,
        };
        let err = t.distance(&reconstruct(&model))?;
        let fit = 1.0 - err / norm;
        trace.errors.push(err);
        trace.fits.push(fit);
        if (fit - prev_fit).abs() < opts.rel_fit_tolerance {
            trace.converged = true;
            break;
        }
        prev_fit = fit;
    }

    let degenerate = weights.iter().all(|&w| w == 0.0);
    Ok((
        CpModel {
            weights,
            factors,
            degenerate,
        },
        trace,
    ))
}

/// Overwrite the first `min(R, I)` columns of `f` with the eigenvectors of
/// `x xᵀ` in descending eigenvalue order.
fn leading_eigenvectors(x: &Matrix, f: &mut Matrix) {
    let rows = x.rows();
    let g = x.matmul(&x.transpose()).expect("conformable");
    let eig =
        nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_fn(rows, rows, |i, j| g[(i, j)]));
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    for (r, &k) in order.iter().take(f.cols()).enumerate() {
        for i in 0..rows {
            f[(i, r)] = eig.eigenvectors[(i, k)];
        }
    }
}

/// Solve `X (V + ridge·I) = B` for `X`, escalating the ridge if the
/// regularized Gram is numerically not positive definite.
fn solve_normal_equations(v: &Matrix, b: &Matrix, ridge: f64) -> Matrix {
    let r = v.rows();
    let scale = (0..r).map(|i| v[(i, i)]).fold(0.0_f64, f64::max).max(1.0);
    let mut lambda = ridge;
    let l = loop {
        let mut reg = v.clone();
        for i in 0..r {
            reg[(i, i)] += lambda;
        }
        if let Some(l) = cholesky(&reg) {
            break l;
        }
        lambda = if lambda == 0.0 {
            1e-14 * scale
        } else {
            lambda * 10.0
        };
    };
    let mut out = Matrix::zeros(b.rows(), r);
    let mut row = vec![0.0; r];
    for i in 0..b.rows() {
        row.copy_from_slice(b.row(i));
        cholesky_solve_in_place(&l, &mut row);
        for (j, &x) in row.iter().enumerate() {
            out[(i, j)] = x;
        }
    }
    out
}

/// Entry `(i_1..i_N) = Σ_r λ_r ∏_n A_n[i_n, r]`.
pub fn reconstruct(m: &CpModel) -> DenseTensor {
    let shape = m.shape();
    let rank = m.rank();
    let mut first = m.factors[0].clone();
    for r in 0..rank {
        first.scale_column(r, m.weights[r]);
    }
    let data = if m.factors.len() == 1 {
        (0..first.rows())
            .map(|i| first.row(i).iter().sum())
            .collect()
    } else {
        let rest: Vec<&Matrix> = m.factors[1..].iter().collect();
        let kr = khatri_rao_chain(&rest).expect("factors share the model rank");
        first
            .matmul(&kr.transpose())
            .expect("factor shapes agree")
            .into_vec()
    };
    DenseTensor::new(shape, data).expect("finite model yields finite tensor")
}

/// `1 − ‖t − t̂‖_F / ‖t‖_F`.
pub fn fit_score(m: &CpModel, t: &DenseTensor) -> Result<f64> {
    let norm = t.norm();
    if norm == 0.0 {
        return Err(Error::UndefinedFit);
    }
    if m.shape() != t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "model shape {:?} vs tensor shape {:?}",
            m.shape(),
            t.shape()
        )));
    }
    Ok(1.0 - t.distance(&reconstruct(m))? / norm)
}

/// Remove the scale, sign and permutation freedom of a CP model.
///
/// Columns are normalized to unit length with the scale moved into the
/// weights. Signs are fixed along the mode chain: for `n = 0..N-1`, if the
/// largest-magnitude entry (first on ties) of the mode-`n` column is negative,
/// the mode-`n` and mode-`n+1` columns are both negated. Components are then
/// sorted by weight, descending, with ties broken by the lexicographic order
/// of the mode-0 column. Components with zero weight or a zero column are
/// zeroed out entirely.
pub fn canonicalize(m: &CpModel) -> CpModel {
    let rank = m.rank();
    let order = m.factors.len();
    let mut weights = m.weights.clone();
    let mut factors = m.factors.clone();

    for r in 0..rank {
        let norms: Vec<f64> = factors.iter().map(|f| f.column_norm(r)).collect();
        if weights[r] == 0.0 || norms.iter().any(|&n| n == 0.0) {
            if weights[r] != 0.0 {
                log::debug!("component {r} has a zero factor column; weight forced to 0");
            }
            weights[r] = 0.0;
            for f in factors.iter_mut() {
                f.scale_column(r, 0.0);
            }
            continue;
        }
        for (f, &n) in factors.iter_mut().zip(&norms) {
            // already-unit columns are left alone so the map is idempotent
            if (n - 1.0).abs() > 4.0 * f64::EPSILON {
                f.scale_column(r, 1.0 / n);
                weights[r] *= n;
            }
        }
        if weights[r] < 0.0 {
            weights[r] = -weights[r];
            factors[0].scale_column(r, -1.0);
        }
        for n in 0..order.saturating_sub(1) {
            if leading_entry(&factors[n], r) < 0.0 {
                factors[n].scale_column(r, -1.0);
                factors[n + 1].scale_column(r, -1.0);
            }
        }
    }

    let mut perm: Vec<usize> = (0..rank).collect();
    let first_cols: Vec<Vec<f64>> = (0..rank).map(|r| factors[0].column(r)).collect();
    perm.sort_by(|&a, &b| {
        weights[b].total_cmp(&weights[a]).then_with(|| {
            first_cols[a]
                .iter()
                .zip(&first_cols[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let factors = factors
        .iter()
        .map(|f| {
            let mut out = Matrix::zeros(f.rows(), rank);
            for (dst, &src) in perm.iter().enumerate() {
                for i in 0..f.rows() {
                    out[(i, dst)] = f[(i, src)];
                }
            }
            out
        })
        .collect();
    let weights: Vec<f64> = perm.iter().map(|&r| weights[r]).collect();
    let degenerate = weights.iter().all(|&w| w == 0.0);
    CpModel {
        weights,
        factors,
        degenerate,
    }
}

/// Largest-magnitude entry of column `r`, first occurrence on ties.
fn leading_entry(f: &Matrix, r: usize) -> f64 {
    let mut best = 0.0_f64;
    for i in 0..f.rows() {
        let v = f[(i, r)];
        if v.abs() > best.abs() {
            best = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / nrm).collect()
    }

    fn model_from(weights: Vec<f64>, cols: &[Vec<Vec<f64>>]) -> CpModel {
        // cols[mode][component] = column vector
        let factors = cols
            .iter()
            .map(|comps| {
                let rows = comps[0].len();
                let mut m = Matrix::zeros(rows, comps.len());
                for (r, c) in comps.iter().enumerate() {
                    for (i, &v) in c.iter().enumerate() {
                        m[(i, r)] = v;
                    }
                }
                m
            })
            .collect();
        CpModel {
            weights,
            factors,
            degenerate: false,
        }
    }

    fn outer3(a: &[f64], b: &[f64], c: &[f64]) -> DenseTensor {
        DenseTensor::from_fn(vec![a.len(), b.len(), c.len()], |i| {
            a[i[0]] * b[i[1]] * c[i[2]]
        })
        .unwrap()
    }

    #[test]
    fn rank_one_recovery_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_unit_vector(&mut rng, 5);
        let b = random_unit_vector(&mut rng, 4);
        let c = random_unit_vector(&mut rng, 3);
        let t = outer3(&a, &b, &c);
        let m = cp_als(&t, 1, &AlsOptions::default()).unwrap();
        assert!(fit_score(&m, &t).unwrap() >= 0.999999);
        let back = reconstruct(&m);
        for (x, y) in back.as_slice().iter().zip(t.as_slice()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_tensor_is_degenerate() {
        let t = DenseTensor::zeros(vec![3, 4, 2]).unwrap();
        for rank in [1, 3] {
            let m = cp_als(&t, rank, &AlsOptions::default()).unwrap();
            assert!(m.degenerate);
            assert_eq!(m.weights, vec![0.0; rank]);
            assert!(reconstruct(&m).is_zero());
        }
    }

    #[test]
    fn invalid_arguments() {
        let t = DenseTensor::zeros(vec![2, 2]).unwrap();
        assert!(cp_als(&t, 0, &AlsOptions::default()).is_err());
        let vec1 = DenseTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(cp_als(&vec1, 1, &AlsOptions::default()).is_err());
        let bad = AlsOptions {
            max_sweeps: 0,
            ..AlsOptions::default()
        };
        assert!(cp_als(&t, 1, &bad).is_err());
    }

    #[test]
    fn deterministic_for_fixed_inputs() {
        let t = DenseTensor::from_fn(vec![4, 5, 6], |i| ((i[0] * 7 + i[1] * 3 + i[2]) % 5) as f64)
            .unwrap();
        let opts = AlsOptions {
            init_seed: 9,
            ..AlsOptions::default()
        };
        assert_eq!(cp_als(&t, 3, &opts).unwrap(), cp_als(&t, 3, &opts).unwrap());
    }

    #[test]
    fn reconstruct_trivial_models() {
        let e0 = vec![1.0, 0.0];
        let m = model_from(vec![1.0], &[vec![e0.clone()], vec![e0.clone()], vec![e0]]);
        let t = reconstruct(&m);
        assert_eq!(t.as_slice(), &[1., 0., 0., 0., 0., 0., 0., 0.]);

        let mut z = m.clone();
        z.weights = vec![0.0];
        assert!(reconstruct(&z).is_zero());
    }

    #[test]
    fn fit_score_examples() {
        let t = DenseTensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = model_from(vec![1.0], &[vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]]);
        let fit = fit_score(&m, &t).unwrap();
        assert!((fit - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);
        assert!((fit - 0.29289).abs() < 1e-5);

        let zero = CpModel::zero(&[2, 2], 1);
        assert_eq!(fit_score(&zero, &t).unwrap(), 0.0);

        let perfect = model_from(
            vec![1.0, 1.0],
            &[
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ],
        );
        assert_eq!(fit_score(&perfect, &t).unwrap(), 1.0);

        let zt = DenseTensor::zeros(vec![2, 2]).unwrap();
        assert!(matches!(fit_score(&m, &zt), Err(Error::UndefinedFit)));
    }

    #[test]
    fn canonicalize_sorts_by_weight() {
        let m = model_from(
            vec![1.0, 5.0],
            &[
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![0.6, 0.8], vec![1.0, 0.0]],
            ],
        );
        let c = canonicalize(&m);
        assert_eq!(c.weights, vec![5.0, 1.0]);
        assert_eq!(c.factors[0].column(0), vec![0.0, 1.0]);
        assert_eq!(c.factors[1].column(0), vec![1.0, 0.0]);
        assert_eq!(c.factors[1].column(1), vec![0.6, 0.8]);
        assert_eq!(canonicalize(&c), c);
    }

    #[test]
    fn canonicalize_absorbs_scale_and_fixes_sign() {
        let m = model_from(
            vec![2.0],
            &[
                vec![vec![0.0, -3.0]],
                vec![vec![4.0, 0.0]],
                vec![vec![1.0, 1.0]],
            ],
        );
        let c = canonicalize(&m);
        assert!((c.weights[0] - 2.0 * 3.0 * 4.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(c.factors[0].column(0), vec![0.0, 1.0]);
        // mode 1 is flipped twice, the net sign lands on mode 2
        assert_eq!(c.factors[1].column(0), vec![1.0, 0.0]);
        assert!(c.factors[2].column(0).iter().all(|&v| v < 0.0));
        let c1 = canonicalize(&c);
        assert_eq!(c1, c);
    }

    #[test]
    fn canonicalize_zero_column_forces_zero_weight() {
        let m = model_from(
            vec![3.0, 1.0],
            &[
                vec![vec![0.0, 0.0], vec![1.0, 0.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ],
        );
        let c = canonicalize(&m);
        assert_eq!(c.weights, vec![1.0, 0.0]);
        assert!(c.factors[1].column(1).iter().all(|&v| v == 0.0));
        assert!(!c.degenerate);
    }
}
