//! Structural properties of the smoothed objective, its minimizer and the
//! Newton refinement, checked on seeded random instances.

use conquer::kernels::HigherOrderKernel;
use conquer::model::{destandardize_coefficients, standardize};
use conquer::onestep::{newton_system, refinement_bandwidth};
use conquer::oracles::{convolution_loss_quadrature, exact_qr_small, OracleBudget};
use conquer::simulate::{generate_dataset, ExperimentKind, ExperimentSpec, Method, Model, Noise};
use conquer::solver::{smoothed_gradient, smoothed_loss, weighted_smoothed_loss};
use conquer::{fit_conquer, Bandwidth, Dataset, FitConfig, KernelKind};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn instance(seed: u64, n: usize, p: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cov = Array2::from_shape_fn((n, p - 1), |_| rng.random_range(-2.0..2.0));
    let y = Array1::from_shape_fn(n, |i| {
        let e: f64 = StandardNormal.sample(&mut rng);
        0.5 + cov.row(i).sum() + e
    });
    Dataset::from_covariates(y, cov).unwrap()
}

fn normal_vec(rng: &mut ChaCha8Rng, p: usize) -> Array1<f64> {
    Array1::from_shape_fn(p, |_| StandardNormal.sample(rng))
}

fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn l2(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn loss_matches_quadrature_mean() {
    let data = instance(11, 20, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let budget = OracleBudget::default();
    for kind in KernelKind::ALL {
        let beta = normal_vec(&mut rng, 3);
        let (tau, h) = (0.3, 0.7);
        let r = conquer::model::residuals(&data, beta.view()).unwrap();
        let mean = r
            .iter()
            .map(|&u| convolution_loss_quadrature(kind, tau, h, u, &budget).unwrap())
            .sum::<f64>()
            / 20.0;
        let closed = smoothed_loss(&data, beta.view(), tau, kind, h).unwrap();
        assert!((closed - mean).abs() < 1e-6, "{kind:?}: {closed} vs {mean}");
    }
}

#[test]
fn negative_gradient_is_a_descent_direction() {
    let data = instance(21, 60, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for kind in KernelKind::ALL {
        let beta = normal_vec(&mut rng, 4);
        let g = smoothed_gradient(&data, beta.view(), 0.7, kind, 0.5).unwrap();
        let f0 = smoothed_loss(&data, beta.view(), 0.7, kind, 0.5).unwrap();
        let moved = &beta - &(&g * 1e-3);
        let f1 = smoothed_loss(&data, moved.view(), 0.7, kind, 0.5).unwrap();
        assert!(f1 < f0, "{kind:?}: {f1} >= {f0}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn loss_is_midpoint_convex(seed in any::<u64>(), k in 0usize..5, tau in 0.05f64..0.95, h in 0.05f64..2.0) {
        let data = instance(7, 40, 3);
        let kind = KernelKind::ALL[k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normal_vec(&mut rng, 3) * 3.0;
        let b = normal_vec(&mut rng, 3) * 3.0;
        let mid = (&a + &b) * 0.5;
        let f = |v: &Array1<f64>| smoothed_loss(&data, v.view(), tau, kind, h).unwrap();
        prop_assert!(f(&mid) <= 0.5 * (f(&a) + f(&b)) + 1e-12);
    }

    #[test]
    fn standardized_landscape_matches_original(seed in any::<u64>(), tau in 0.05f64..0.95) {
        let data = instance(31, 50, 4);
        let (std_data, t) = standardize(&data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = normal_vec(&mut rng, 4);
        let beta = destandardize_coefficients(gamma.view(), &t).unwrap();
        let a = smoothed_loss(&std_data, gamma.view(), tau, KernelKind::Gaussian, 0.4).unwrap();
        let b = smoothed_loss(&data, beta.view(), tau, KernelKind::Gaussian, 0.4).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }
}

#[test]
fn scale_equivariance() {
    for seed in 0..5u64 {
        let data = instance(100 + seed, 200, 4);
        let c = 3.5;
        let scaled = data.with_response(data.y() * c).unwrap();
        let cfg = FitConfig::new(0.35).bandwidth(0.4).tol(1e-9);
        let base = fit_conquer(&data, &cfg, None).unwrap();
        let big = fit_conquer(&scaled, &cfg.clone().bandwidth(0.4 * c).tol(1e-9 * c), None).unwrap();
        assert!(base.converged && big.converged);
        let err = max_abs_diff(&(&base.beta * c), &big.beta);
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn row_permutation_invariance() {
    let data = instance(41, 300, 5);
    let mut order: Vec<usize> = (0..300).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let shuffled = data.permuted(&order).unwrap();
    let cfg = FitConfig::new(0.6).tol(1e-11);
    let a = fit_conquer(&data, &cfg, None).unwrap();
    let b = fit_conquer(&shuffled, &cfg, None).unwrap();
    assert!(a.converged && b.converged);
    let err = max_abs_diff(&a.beta, &b.beta);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn bandwidth_path_approaches_exact_fit() {
    // averaged over instances to smooth out Monte Carlo noise
    let hs = [0.5, 0.25, 0.1];
    let reps = 30;
    let mut dist = [0.0; 3];
    for seed in 0..reps {
        let data = instance(500 + seed, 50, 2);
        let qr = exact_qr_small(&data, 0.5, &OracleBudget::default()).unwrap();
        for (k, &h) in hs.iter().enumerate() {
            let fit = fit_conquer(&data, &FitConfig::new(0.5).bandwidth(h).tol(1e-10), None).unwrap();
            assert!(fit.converged);
            dist[k] += l2(&fit.beta, &qr) / reps as f64;
        }
    }
    eprintln!("mean distance to exact fit by h {hs:?}: {dist:?}");
    assert!(dist[0] >= dist[1] && dist[1] >= dist[2], "{dist:?}");
}

#[test]
fn multiplier_weights_average_to_unweighted_loss() {
    let n = 10;
    let data = instance(61, n, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    for _ in 0..5 {
        let beta = normal_vec(&mut rng, 3);
        let plain = smoothed_loss(&data, beta.view(), 0.25, KernelKind::Logistic, 0.6).unwrap();
        let mut mean = 0.0;
        for mask in 0u32..(1 << n) {
            let w: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { 2.0 } else { 0.0 }).collect();
            mean += weighted_smoothed_loss(&data, beta.view(), 0.25, KernelKind::Logistic, 0.6, &w).unwrap();
        }
        mean /= f64::from(1u32 << n);
        assert!((mean - plain).abs() < 1e-12, "{mean} vs {plain}");
    }
}

#[test]
fn refinement_hessian_is_positive_definite() {
    let noises = [Noise::DEFAULT_GAUSSIAN, Noise::StudentT { df: 2.0 }, Noise::StudentT { df: 1.5 }];
    for (m, model) in Model::ALL.into_iter().enumerate() {
        for (k, noise) in noises.into_iter().enumerate() {
            for tau in [0.5, 0.9] {
                let (n, p) = (800, 20);
                let data = generate_dataset(model, n, p, tau, noise, (10 * m + k) as u64).unwrap();
                let pilot = fit_conquer(&data, &FitConfig::new(tau), None).unwrap();
                for order in [4, 6] {
                    let kernel = HigherOrderKernel::of_order(order).unwrap();
                    let b = refinement_bandwidth(n, p, order).unwrap();
                    let sys = newton_system(&data, pilot.beta.view(), tau, kernel, b).unwrap();
                    let h = DMatrix::from_fn(p, p, |i, j| sys.hessian[[i, j]]);
                    let min = h.symmetric_eigenvalues().min();
                    assert!(min > 0.0, "{model:?} {noise:?} tau {tau} order {order}: {min}");
                }
            }
        }
    }
}

#[test]
fn conquer_tracks_horowitz_at_upper_tail() {
    let mut spec = ExperimentSpec::new(ExperimentKind::Estimation, Model::Homogeneous, 500, 10);
    spec.noise = Noise::StudentT { df: 2.0 };
    spec.tau = 0.9;
    spec.reps = 100;
    spec.seed = 2024;
    spec.bandwidth = Bandwidth::Auto;
    spec.methods = vec![Method::Conquer(KernelKind::Gaussian), Method::Horowitz];
    let report = conquer::simulate::run_experiment(&spec).unwrap();
    let med = |m| report.summary(m).unwrap().median_l2_error.unwrap();
    let (c, hz) = (med(Method::Conquer(KernelKind::Gaussian)), med(Method::Horowitz));
    eprintln!("median l2 error: conquer {c:.4}, horowitz {hz:.4}");
    assert!(c <= 1.05 * hz, "conquer {c} vs horowitz {hz}");
}
