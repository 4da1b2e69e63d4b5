use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tensorforest::tensor::{
    canonicalize, cp_als, cp_als_traced, fit_score, fold, reconstruct, unfold, AlsInit, AlsOptions,
    CpModel, DenseTensor, Matrix,
};

fn gaussian_factors(rng: &mut ChaCha8Rng, shape: &[usize], rank: usize) -> CpModel {
    let factors = shape
        .iter()
        .map(|&d| {
            let data = (0..d * rank).map(|_| StandardNormal.sample(rng)).collect();
            Matrix::from_vec(d, rank, data).unwrap()
        })
        .collect();
    CpModel {
        weights: vec![1.0; rank],
        factors,
        degenerate: false,
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    let len = shape.iter().product();
    DenseTensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap()
}

#[test]
fn exact_low_rank_recovery() {
    let opts = AlsOptions {
        max_sweeps: 200,
        rel_fit_tolerance: 1e-10,
        ..AlsOptions::default()
    };
    for rank in [1, 3] {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = reconstruct(&gaussian_factors(&mut rng, &[16, 16, 16], rank));
            let m = cp_als(&truth, rank, &opts).unwrap();
            let fit = fit_score(&m, &truth).unwrap();
            assert!(fit >= 0.999, "rank {rank} seed {seed}: fit {fit}");
        }
    }
}

#[test]
fn als_error_is_monotone() {
    let opts = AlsOptions {
        max_sweeps: 30,
        rel_fit_tolerance: 0.0,
        ..AlsOptions::default()
    };
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let t = uniform_tensor(&mut rng, &[6, 7, 8]);
        for (rank, init) in [2, 5, 9]
            .into_iter()
            .flat_map(|r| [(r, AlsInit::Svd), (r, AlsInit::Uniform)])
        {
            let opts = AlsOptions { init, ..opts };
            let (_, trace) = cp_als_traced(&t, rank, &opts).unwrap();
            for w in trace.errors.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "seed {seed} rank {rank} {init:?}: {w:?}"
                );
            }
        }
    }
}

#[test]
fn higher_rank_fits_at_least_as_well() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let t = uniform_tensor(&mut rng, &[16, 16, 16]);
        let opts = AlsOptions {
            init_seed: seed,
            ..AlsOptions::default()
        };
        let f3 = fit_score(&cp_als(&t, 3, &opts).unwrap(), &t).unwrap();
        let f16 = fit_score(&cp_als(&t, 16, &opts).unwrap(), &t).unwrap();
        assert!(f16 >= f3, "seed {seed}: {f16} < {f3}");
    }
}

#[test]
fn canonicalize_preserves_reconstruction_of_als_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = uniform_tensor(&mut rng, &[5, 6, 7]);
    let m = cp_als(&t, 4, &AlsOptions::default()).unwrap();
    let c = canonicalize(&m);
    for (a, b) in reconstruct(&m)
        .as_slice()
        .iter()
        .zip(reconstruct(&c).as_slice())
    {
        assert!((a - b).abs() <= 1e-9);
    }
    assert_eq!(canonicalize(&c), c);
    assert!(c.weights.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn negated_pair_has_same_canonical_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = gaussian_factors(&mut rng, &[4, 5, 6], 3);
    let canon = canonicalize(&m);
    for (a, b) in [(0, 1), (1, 2), (0, 2)] {
        let mut flipped = m.clone();
        flipped.factors[a].scale_column(1, -1.0);
        flipped.factors[b].scale_column(1, -1.0);
        assert_eq!(canonicalize(&flipped), canon);
    }
}

fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1usize..5, 1..5).prop_flat_map(|shape| {
        let len: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(-100.0f64..100.0, len))
    })
}

proptest! {
    #[test]
    fn unfold_fold_round_trip((shape, data) in shape_and_data()) {
        let t = DenseTensor::new(shape.clone(), data).unwrap();
        for mode in 0..shape.len() {
            let m = unfold(&t, mode).unwrap();
            prop_assert_eq!(m.rows(), shape[mode]);
            prop_assert_eq!(fold(&m, mode, &shape).unwrap(), t.clone());
        }
    }

    #[test]
    fn unfold_matches_index_definition((shape, data) in shape_and_data(), pick in 0usize..4) {
        let t = DenseTensor::new(shape.clone(), data).unwrap();
        let mode = pick % shape.len();
        let m = unfold(&t, mode).unwrap();
        // enumerate every multi-index directly
        let total: usize = shape.iter().product();
        for flat in 0..total {
            let mut idx = vec![0; shape.len()];
            let mut rem = flat;
            for d in (0..shape.len()).rev() {
                idx[d] = rem % shape[d];
                rem /= shape[d];
            }
            let col = (0..shape.len())
                .filter(|&d| d != mode)
                .fold(0, |acc, d| acc * shape[d] + idx[d]);
            prop_assert_eq!(m[(idx[mode], col)], t.get(&idx));
        }
    }
}
