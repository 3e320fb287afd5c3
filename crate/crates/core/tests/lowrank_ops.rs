mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use sweepdemod::lowrank::{self, MeasurementOperator, NuclearOptions};
use sweepdemod::subspace::{Provenance, SweepSubspace};
use sweepdemod::FrameStack;

fn operator(p: usize, dims: &[usize], k: Option<usize>, seed: u64) -> MeasurementOperator {
    let spaces = dims
        .iter()
        .enumerate()
        .map(|(j, &n)| lowrank::random_subspace(p, n, j, seed * 97 + j as u64).unwrap())
        .collect();
    let q = k.map(|k| gaussian_matrix(&mut rng(seed ^ 0xabc), p, k));
    MeasurementOperator::new(spaces, q).unwrap()
}

#[test]
fn apply_matches_assembled_measurements() {
    for q in [None, Some(5)] {
        let op = operator(24, &[3, 3], q, 4);
        let x = gaussian_matrix(&mut rng(9), op.image_dim(), op.coeff_dim());
        let fast = lowrank::apply_operator(&op, &x).unwrap();
        let slow = brute_force_apply(&op, &x);
        assert!((fast - slow).amax() < 1e-12);
    }
}

#[test]
fn rank_one_lift_is_the_pixelwise_product() {
    let op = operator(24, &[3, 3], None, 2);
    let mut r = rng(3);
    let beta = gaussian_matrix(&mut r, 24, 1);
    let alpha = gaussian_matrix(&mut r, 6, 1);
    let y = op.apply(&(&beta * alpha.transpose())).unwrap();
    for j in 0..2 {
        let u = op.subspaces()[j].basis() * alpha.rows(3 * j, 3);
        for i in 0..24 {
            assert!((y[(i, j)] - beta[i] * u[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn canonical_bases_read_the_diagonal() {
    let s = SweepSubspace::from_basis(DMatrix::identity(5, 5), Provenance::Oracle, 0).unwrap();
    let op = MeasurementOperator::new(vec![s], None).unwrap();
    let x = gaussian_matrix(&mut rng(1), 5, 5);
    let y = op.apply(&x).unwrap();
    for i in 0..5 {
        assert_eq!(y[(i, 0)], x[(i, i)]);
    }
    assert_eq!(
        op.apply(&DMatrix::zeros(5, 5)).unwrap(),
        DMatrix::zeros(5, 1)
    );
}

#[test]
fn unit_residual_adjoint_is_the_measurement_matrix() {
    let op = operator(24, &[3, 2], Some(4), 6);
    for (i, j) in [(0, 0), (7, 1), (23, 0)] {
        let mut r = DMatrix::zeros(24, 2);
        r[(i, j)] = 1.0;
        let a = op.adjoint(&r).unwrap();
        assert!((a - measurement_matrix(&op, i, j)).amax() < 1e-12);
    }
    assert_eq!(op.adjoint(&DMatrix::zeros(24, 2)).unwrap().amax(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjoint_pairing(seed in any::<u64>(), p in 4usize..30, m in 1usize..4, with_q in any::<bool>()) {
        let dims: Vec<usize> = (0..m).map(|j| 1 + (j + seed as usize) % 3).collect();
        let op = operator(p, &dims, with_q.then_some(3), seed % 1000);
        let mut r = rng(seed);
        let x = gaussian_matrix(&mut r, op.image_dim(), op.coeff_dim());
        let res = gaussian_matrix(&mut r, p, m);
        let lhs = frobenius_inner(&op.apply(&x).unwrap(), &res);
        let rhs = frobenius_inner(&x, &op.adjoint(&res).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn svt_is_non_expansive(seed in any::<u64>(), rows in 1usize..9, cols in 1usize..9, tau in 0.0f64..3.0) {
        let mut r = rng(seed);
        let a = gaussian_matrix(&mut r, rows, cols);
        let b = &a + gaussian_matrix(&mut r, rows, cols) * 0.3;
        let d = (lowrank::svt(&a, tau) - lowrank::svt(&b, tau)).norm();
        prop_assert!(d <= (&a - &b).norm() * (1.0 + 1e-12) + 1e-14);
    }

    #[test]
    fn svt_variants_agree(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..12, tau in 0.0f64..2.0) {
        let a = gaussian_matrix(&mut rng(seed), rows, cols);
        let full = lowrank::svt_full(&a, tau);
        let gram = lowrank::svt_gram(&a, tau);
        prop_assert!((&full.matrix - &gram.matrix).amax() < 1e-9);
        prop_assert!((full.nuclear_norm - gram.nuclear_norm).abs() < 1e-9 * (1.0 + full.nuclear_norm));
    }

    #[test]
    fn factor_scale_ambiguity(seed in any::<u64>(), c in prop_oneof![-5.0f64..-0.2, 0.2f64..5.0]) {
        let mut r = rng(seed);
        let beta = gaussian_matrix(&mut r, 6, 1);
        let alpha = gaussian_matrix(&mut r, 4, 1);
        let x = &beta * alpha.transpose();
        let y = (&beta * c) * (&alpha / c).transpose();
        prop_assert!((&x - &y).amax() <= 1e-12 * x.amax().max(1.0));
        let f = lowrank::extract_factors(&y).unwrap();
        let back = &f.beta * f.alpha.transpose();
        prop_assert!((back - &x).amax() <= 1e-10 * x.amax().max(1.0));
    }
}

#[test]
fn zero_pivot_fallback_reproduces_the_outer_product() {
    let mut r = rng(12);
    let mut beta = gaussian_matrix(&mut r, 7, 1);
    beta[0] = 0.0;
    let alpha = gaussian_matrix(&mut r, 5, 1);
    let x = &beta * alpha.transpose();
    let f = lowrank::extract_factors(&x).unwrap();
    assert!(f.used_fallback);
    assert!((&f.beta * f.alpha.transpose() - x).amax() < 1e-10);
}

fn rank_one_instance(seed: u64) -> (MeasurementOperator, FrameStack, DMatrix<f64>) {
    let op = operator(16, &[2, 2, 2], None, seed);
    let mut r = rng(seed + 1);
    let beta = DMatrix::from_fn(16, 1, |_, _| 1.0 + 0.3 * gaussian(&mut r));
    let alpha = gaussian_matrix(&mut r, 6, 1);
    let x = &beta * alpha.transpose();
    let y = op.apply(&x).unwrap();
    let stack = FrameStack::new(4, 4, y, None).unwrap();
    (op, stack, x)
}

#[test]
fn large_lambda_gives_zero() {
    let (op, stack, _) = rank_one_instance(3);
    let top = lowrank::adjoint_spectral_norm(&op, &stack, 1).unwrap();
    let opts = NuclearOptions {
        iters: 50,
        continuation_steps: 1,
        ..NuclearOptions::default()
    };
    let sol = lowrank::solve_nuclear(&stack, &op, 2.0 * top, &opts).unwrap();
    assert_eq!(sol.x.amax(), 0.0);
    assert_eq!(sol.beta.amax(), 0.0);
}

#[test]
fn objective_is_monotone_within_each_stage() {
    for seed in 0..5 {
        let (op, stack, _) = rank_one_instance(seed);
        let top = lowrank::adjoint_spectral_norm(&op, &stack, 1).unwrap();
        let opts = NuclearOptions {
            iters: 400,
            continuation_steps: 4,
            stage_tol: 0.0,
            ..NuclearOptions::default()
        };
        let sol = lowrank::solve_nuclear(&stack, &op, 1e-3 * top, &opts).unwrap();
        assert_eq!(sol.objective_trace.len(), sol.stage_of.len());
        for stage in 0..4 {
            let trace: Vec<f64> = sol
                .objective_trace
                .iter()
                .zip(&sol.stage_of)
                .filter(|(_, &s)| s == stage)
                .map(|(&v, _)| v)
                .collect();
            assert!(!trace.is_empty());
            let bad = increases(&trace, 1e-12);
            assert!(bad.is_empty(), "seed {seed} stage {stage}: {bad:?}");
        }
    }
}

#[test]
fn operator_shape_errors() {
    let op = operator(8, &[2], None, 0);
    assert!(op.apply(&DMatrix::zeros(8, 3)).is_err());
    assert!(op.adjoint(&DMatrix::zeros(7, 1)).is_err());
    assert!(MeasurementOperator::new(Vec::new(), None).is_err());
    let bad_q = DMatrix::zeros(5, 2);
    let s = lowrank::random_subspace(8, 2, 0, 1).unwrap();
    assert!(MeasurementOperator::new(vec![s], Some(bad_q)).is_err());
}
