use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use proptest::prelude::*;

use shresnet_core::dti::{fa, fit_tensor, md, DiffusionTensor};
use shresnet_core::phantom::repulsion_directions;
use shresnet_core::rish::{rish_features, rish_project};
use shresnet_core::sh::ShCoefficients;

/// FA from matrix traces: `sqrt(3/2 · tr((D − md·I)²) / tr(D²))`.
fn trace_fa(m: &Matrix3<f64>) -> f64 {
    let dev = m - Matrix3::identity() * (m.trace() / 3.0);
    (1.5 * (dev * dev).trace() / (m * m).trace()).sqrt()
}

fn spd(eig: [f64; 3], axis: [f64; 3], angle: f64) -> Matrix3<f64> {
    let r = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle);
    r.matrix() * Matrix3::from_diagonal(&Vector3::from(eig)) * r.matrix().transpose()
}

#[test]
fn fa_of_prolate_tensor_matches_closed_form() {
    let (l1, l2, l3): (f64, f64, f64) = (1.7e-3, 0.3e-3, 0.3e-3);
    let oracle = (0.5f64).sqrt() * ((l1 - l2).powi(2) + (l2 - l3).powi(2) + (l3 - l1).powi(2)).sqrt()
        / (l1 * l1 + l2 * l2 + l3 * l3).sqrt();
    let d = DiffusionTensor::diag(l1, l2, l3);
    assert!((fa(&d) - oracle).abs() < 1e-6);
    assert!((oracle - 0.80).abs() < 0.01);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_are_rotation_invariant(
        eig in prop::array::uniform3(0.05e-3f64..3e-3),
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        prop_assume!(axis.iter().map(|a| a * a).sum::<f64>() > 1e-3);
        let base = DiffusionTensor::diag(eig[0], eig[1], eig[2]);
        let rotated = DiffusionTensor::from_matrix(&spd(eig, axis, angle));
        prop_assert!((fa(&base) - fa(&rotated)).abs() <= 1e-9);
        prop_assert!((md(&base) - md(&rotated)).abs() <= 1e-9);
        prop_assert!((fa(&rotated) - trace_fa(&rotated.matrix())).abs() <= 1e-9);
    }

    #[test]
    fn noise_free_fit_recovers_tensor(
        eig in prop::array::uniform3(0.1e-3f64..2.5e-3),
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        prop_assume!(axis.iter().map(|a| a * a).sum::<f64>() > 1e-3);
        let truth = DiffusionTensor::from_matrix(&spd(eig, axis, angle));
        let dirs = repulsion_directions(30, 1);
        let bvals = vec![1200.0; dirs.len()];
        let att: Vec<f64> = dirs.iter().map(|&g| truth.attenuation(1200.0, g)).collect();
        let fit = fit_tensor(&att, &bvals, &dirs).unwrap();
        for (a, b) in fit.elements.iter().zip(&truth.elements) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn projection_moves_energy_and_keeps_orientation(
        input in prop::collection::vec(-1.0f64..1.0, 15),
        harmonized in prop::collection::vec(-1.0f64..1.0, 15),
        zero_block in 0usize..4,
    ) {
        let mut input = input;
        let blocks = [0..1, 1..6, 6..15];
        if zero_block < 3 {
            input[blocks[zero_block].clone()].iter_mut().for_each(|v| *v = 0.0);
        }
        let a = ShCoefficients::new(4, input.clone()).unwrap();
        let h = ShCoefficients::new(4, harmonized.clone()).unwrap();
        let p = rish_project(&a, &h).unwrap();
        let (rh, rp) = (rish_features(&h), rish_features(&p.coeffs));
        let mut degenerate = 0;
        for (k, r) in blocks.iter().enumerate() {
            let x = &input[r.clone()];
            let y = &p.coeffs.values[r.clone()];
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 {
                prop_assert!(y.iter().all(|&v| v == 0.0));
                degenerate += usize::from(rh.values[k] > 0.0);
                continue;
            }
            prop_assert!((rp.values[k] - rh.values[k]).abs() <= 1e-10);
            if ny > 0.0 {
                let cos = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / (nx * ny);
                prop_assert!(1.0 - cos <= 1e-12);
            }
        }
        prop_assert_eq!(p.degenerate_orders, degenerate);
    }
}
