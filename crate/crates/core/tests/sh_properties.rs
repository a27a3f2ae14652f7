use nalgebra::{DMatrix, DVector, Rotation3, Unit, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shresnet_core::rish::rish_features;
use shresnet_core::sh::{basis_row, design_matrix, fit_sh, n_coef, reconstruct, ShBasisSpec, ShCoefficients};

fn random_dirs(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if r > 0.1 && r <= 1.0 {
                break [v[0] / r, v[1] / r, v[2] / r];
            }
        })
        .collect()
}

fn synth(c: &[f64], dirs: &[[f64; 3]]) -> Vec<f64> {
    dirs.iter()
        .map(|&d| basis_row(4, d).iter().zip(c).map(|(b, c)| b * c).sum())
        .collect()
}

/// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (1..=n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

#[test]
fn basis_is_orthonormal_under_quadrature() {
    // degree-8 products integrate exactly with 6 nodes in cos θ and 12 in φ
    let nc = n_coef(4);
    let mut gram = vec![0.0; nc * nc];
    let n_phi = 12;
    for (z, w) in gauss_legendre(6) {
        let s = (1.0 - z * z).sqrt();
        for k in 0..n_phi {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / n_phi as f64;
            let y = basis_row(4, [s * phi.cos(), s * phi.sin(), z]);
            let wt = w * 2.0 * std::f64::consts::PI / n_phi as f64;
            for i in 0..nc {
                for j in 0..nc {
                    gram[i * nc + j] += wt * y[i] * y[j];
                }
            }
        }
    }
    for i in 0..nc {
        for j in 0..nc {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((gram[i * nc + j] - expect).abs() < 1e-12, "({i},{j}) = {}", gram[i * nc + j]);
        }
    }
}

#[test]
fn regularized_fit_matches_normal_equations() {
    let dirs = random_dirs(30, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let signal: Vec<f64> = dirs
        .iter()
        .map(|d| (-1.2 * (0.3 + 1.1 * d[0] * d[0])).exp() + 0.02 * rng.random_range(-1.0..1.0))
        .collect();
    let spec = ShBasisSpec::new(4, 0.006).unwrap();
    let b = design_matrix(&spec, &dirs).unwrap();
    let pen: Vec<f64> = (0..=4usize)
        .step_by(2)
        .flat_map(|l| std::iter::repeat_n((l * l * (l + 1) * (l + 1)) as f64, 2 * l + 1))
        .collect();
    let lhs = b.transpose() * &b + 0.006 * DMatrix::from_diagonal(&DVector::from_vec(pen));
    let rhs = b.transpose() * DVector::from_vec(signal.clone());
    let oracle = lhs.lu().solve(&rhs).unwrap();
    let c = fit_sh(&signal, &dirs, &spec).unwrap();
    for (a, o) in c.values.iter().zip(oracle.iter()) {
        assert!((a - o).abs() < 1e-10);
    }
    let plain = fit_sh(&signal, &dirs, &ShBasisSpec::new(4, 0.0).unwrap()).unwrap();
    for l in [2, 4] {
        let norm = |c: &ShCoefficients| c.block(l).iter().map(|v| v * v).sum::<f64>();
        assert!(norm(&c) < norm(&plain), "order {l} not shrunk");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn band_limited_round_trip(c in prop::collection::vec(-1.0f64..1.0, 15), seed in any::<u64>()) {
        let dirs = random_dirs(60, seed);
        let spec = ShBasisSpec::new(4, 0.0).unwrap();
        let fit = fit_sh(&synth(&c, &dirs), &dirs, &spec).unwrap();
        for (a, b) in fit.values.iter().zip(&c) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
        let back = reconstruct(&fit, &dirs).unwrap();
        for (a, b) in back.iter().zip(synth(&c, &dirs)) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn rish_and_c0_are_rotation_invariant(
        c in prop::collection::vec(-1.0f64..1.0, 15),
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in 0.0f64..std::f64::consts::TAU,
        seed in any::<u64>(),
    ) {
        prop_assume!(axis.iter().map(|a| a * a).sum::<f64>() > 1e-3);
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle);
        let dirs = random_dirs(45, seed);
        let spec = ShBasisSpec::new(4, 0.0).unwrap();
        // g(u) = f(Rᵀu), sampled on the unrotated set
        let pulled: Vec<[f64; 3]> = dirs
            .iter()
            .map(|d| {
                let v = rot.inverse() * Vector3::from(*d);
                [v.x, v.y, v.z]
            })
            .collect();
        let original = ShCoefficients::new(4, c.clone()).unwrap();
        let rotated = fit_sh(&synth(&c, &pulled), &dirs, &spec).unwrap();
        prop_assert!((rotated.values[0] - c[0]).abs() <= 1e-6);
        let (a, b) = (rish_features(&original), rish_features(&rotated));
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }
}
