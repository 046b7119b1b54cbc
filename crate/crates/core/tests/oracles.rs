mod common;

use common::{
    fd_gradient, fro, fro_dist, jacobi_svd, oracle_polar, oracle_singular_values,
    power_spectral_norm, problem_suite,
};
use muonlab::matrix::{
    frobenius_inner, nuclear_norm, polar_factor, random_semi_orthogonal, singular_values,
    spectral_norm, svd_reduced, Matrix, NewtonSchulz, DEFAULT_RANK_TOL,
};
use muonlab::problems::{NoiseModel, ProblemSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SHAPES: [(usize, usize); 6] = [(1, 1), (4, 3), (3, 4), (6, 6), (9, 2), (2, 7)];

fn gaussian(m: usize, n: usize, seed: u64) -> Matrix {
    Matrix::random_gaussian(m, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn jacobi_oracle_reconstructs_its_input() {
    let a = gaussian(7, 4, 1);
    let svd = jacobi_svd(&a);
    let mut back = vec![0.0; 28];
    for i in 0..7 {
        for j in 0..4 {
            back[i * 4 + j] = (0..4)
                .map(|k| svd.u.at(i, k) * svd.s[k] * svd.v.at(j, k))
                .sum();
        }
    }
    let back = Matrix::from_row_slice(7, 4, &back).unwrap();
    assert!(fro_dist(&a, &back) <= 1e-12 * fro(&a));
}

#[test]
fn singular_values_match_jacobi() {
    for (k, &(m, n)) in SHAPES.iter().enumerate() {
        for seed in 0..20 {
            let a = gaussian(m, n, 100 * k as u64 + seed);
            let ours = singular_values(&a);
            let oracle = oracle_singular_values(&a);
            assert_eq!(ours.len(), oracle.len());
            for (x, y) in ours.iter().zip(&oracle) {
                assert!((x - y).abs() <= 1e-12 * oracle[0], "{m}x{n}: {x} vs {y}");
            }
            let nuc: f64 = oracle.iter().sum();
            assert!((nuclear_norm(&a) - nuc).abs() <= 1e-12 * nuc);
        }
    }
}

#[test]
fn spectral_norm_matches_power_iteration() {
    for (k, &(m, n)) in SHAPES.iter().enumerate() {
        for seed in 0..10 {
            let a = gaussian(m, n, 1000 + 100 * k as u64 + seed);
            let p = power_spectral_norm(&a, 5000);
            let s = spectral_norm(&a);
            assert!((s - p).abs() <= 1e-9 * p, "{m}x{n}: {s} vs {p}");
        }
    }
}

#[test]
fn polar_factor_matches_jacobi() {
    for (k, &(m, n)) in SHAPES.iter().enumerate() {
        for seed in 0..20 {
            let a = gaussian(m, n, 2000 + 100 * k as u64 + seed);
            let ours = polar_factor(&a, DEFAULT_RANK_TOL).unwrap();
            let oracle = oracle_polar(&a);
            let sv = oracle_singular_values(&a);
            let cond = sv[0] / sv[sv.len() - 1];
            assert!(
                fro_dist(&ours, &oracle) <= 1e-13 * cond.max(1.0) * (n as f64),
                "{m}x{n}"
            );
        }
    }
}

#[test]
fn svd_reconstruction_is_accurate() {
    for (k, &(m, n)) in SHAPES.iter().enumerate() {
        for seed in 0..20 {
            let a = gaussian(m, n, 3000 + 100 * k as u64 + seed);
            let svd = svd_reduced(&a, DEFAULT_RANK_TOL).unwrap();
            assert!(fro_dist(&a, &svd.reconstruct()) <= 1e-8 * fro(&a));
        }
    }
}

#[test]
fn polar_factor_beats_sampled_semi_orthogonal_matrices() {
    for seed in 0..50 {
        let b = gaussian(5, 3, 4000 + seed);
        let best = fro_dist(&polar_factor(&b, DEFAULT_RANK_TOL).unwrap(), &b);
        for q_seed in 0..200 {
            let q = random_semi_orthogonal(5, 3, seed * 1000 + q_seed).unwrap();
            assert!(best <= fro_dist(&q, &b) + 1e-12);
        }
    }
}

#[test]
fn newton_schulz_fixes_orthogonal_inputs() {
    let ns = NewtonSchulz::cubic(12).unwrap();
    for (seed, &(m, n)) in [(32, 32), (20, 8), (8, 20)].iter().enumerate() {
        let q = if m >= n {
            random_semi_orthogonal(m, n, seed as u64).unwrap()
        } else {
            random_semi_orthogonal(n, m, seed as u64)
                .unwrap()
                .transpose()
        };
        // Frobenius prescaling leaves every singular value at 1/√min(m, n).
        let out = ns.orthogonalize(&q).unwrap();
        assert!(
            fro_dist(&out, &q) <= 1e-10,
            "{m}x{n}: {}",
            fro_dist(&out, &q)
        );
    }
}

#[test]
fn tuned_newton_schulz_is_close_on_well_conditioned_inputs() {
    let ns = NewtonSchulz::tuned();
    for seed in 0..10 {
        let q = random_semi_orthogonal(16, 16, seed).unwrap();
        // Singular values spread over [1, 2].
        let d: Vec<f64> = (0..16).map(|i| 1.0 + i as f64 / 15.0).collect();
        let b = Matrix::from_diagonal(&d).unwrap().matmul(&q).unwrap();
        let exact = oracle_polar(&b);
        assert!(fro_dist(&ns.orthogonalize(&b).unwrap(), &exact) <= 1e-2);
    }
}

fn random_points(p: &ProblemSpec, count: usize, seed: u64) -> Vec<Matrix> {
    (0..count as u64)
        .map(|s| p.initial_point(seed + s, 0.5 + (s % 4) as f64).unwrap())
        .collect()
}

#[test]
fn gradients_match_finite_differences() {
    for p in problem_suite() {
        for x in random_points(&p, 20, 50) {
            let g = p.exact_gradient(&x).unwrap();
            let fd = fd_gradient(|y| p.objective_value(y), &x, 1e-5);
            let rel = fro_dist(&g, &fd) / fro(&g);
            assert!(rel <= 1e-6, "{:?}: relative error {rel}", p.kind());
        }
    }
}

#[test]
fn smoothness_inequalities_hold_on_random_pairs() {
    for p in problem_suite() {
        let pts = random_points(&p, 40, 900);
        for pair in pts.windows(2) {
            let (x, y) = (&pair[0], &pair[1]);
            let gx = p.exact_gradient(x).unwrap();
            let d = y.sub(x).unwrap();
            let lin = p.objective_value(x) + frobenius_inner(&gx, &d).unwrap();
            let fy = p.objective_value(y);
            let tol = 1e-9 * fy.abs().max(1.0);
            assert!(fy <= lin + 0.5 * p.lipschitz_fro * fro(&d).powi(2) + tol);
            let spec = power_spectral_norm(&d, 5000);
            assert!(fy <= lin + 0.5 * p.lipschitz_dual * spec * spec + tol);
        }
    }
}

#[test]
fn declared_constants_certify() {
    for p in problem_suite() {
        let report = p.certify_constants(400, 5).unwrap();
        assert!(report.max_ratio_fro <= p.lipschitz_fro * (1.0 + 1e-9));
        assert!(report.max_ratio_dual <= p.lipschitz_dual * (1.0 + 1e-9));
    }
}

#[test]
fn nuclear_variance_is_bounded_by_column_count_times_frobenius_variance() {
    let p =
        ProblemSpec::noisy_quadratic(&[1.0, 0.5, 0.25], 3, 2.0, NoiseModel::GaussianAdditive, 3)
            .unwrap();
    let x = p.initial_point(1, 1.0).unwrap();
    let grad = p.exact_gradient(&x).unwrap();
    let batch = 4;
    let trials = 4000;
    let samples: Vec<f64> = (0..trials)
        .map(|s| {
            let g = p.stochastic_gradient(&x, batch, s).unwrap();
            nuclear_norm(&g.sub(&grad).unwrap()).powi(2)
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / trials as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials as f64 - 1.0);
    let se = (var / trials as f64).sqrt();
    let bound = 3.0 * p.sigma_sq_fro / batch as f64;
    assert!(mean <= bound + 3.0 * se, "{mean} vs {bound}");
    assert!((p.sigma_sq_nuc - 3.0 * p.sigma_sq_fro).abs() <= 1e-12 * p.sigma_sq_nuc);
}
