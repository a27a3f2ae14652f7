//! Rotation-invariant SH (RISH) features and the per-order energy projection
//! that moves harmonized energy onto the input signal's orientation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh::{ShBasisSpec, ShCoefficients};

/// Per-order energy `Σ_m c_{l,m}²`, indexed by `l / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RishFeatures {
    pub order: usize,
    pub values: Vec<f64>,
}

impl RishFeatures {
    pub fn get(&self, l: usize) -> f64 {
        self.values[l / 2]
    }
}

pub fn rish_features(c: &ShCoefficients) -> RishFeatures {
    let spec = ShBasisSpec {
        order: c.order,
        lambda: 0.0,
    };
    let values = spec
        .blocks()
        .into_iter()
        .map(|(_, r)| c.values[r].iter().map(|v| v * v).sum())
        .collect();
    RishFeatures {
        order: c.order,
        values,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coeffs: ShCoefficients,
    /// Orders whose input energy was zero while the harmonized energy was not.
    pub degenerate_orders: usize,
}

/// Rescales each order block of `input` by `sqrt(RISH(harmonized) / RISH(input))`.
///
/// A block with zero input energy has no orientation to carry the harmonized
/// energy; it is emitted as zeros and counted in `degenerate_orders` when the
/// harmonized block is non-zero.
pub fn rish_project(input: &ShCoefficients, harmonized: &ShCoefficients) -> Result<Projection> {
    if input.order != harmonized.order || input.values.len() != harmonized.values.len() {
        return Err(Error::Shape(format!(
            "RISH projection between order {} and order {}",
            input.order, harmonized.order
        )));
    }
    let mut out = vec![0.0; input.values.len()];
    let degenerate = project_into(&input.values, &harmonized.values, input.order, &mut out);
    Ok(Projection {
        coeffs: ShCoefficients {
            order: input.order,
            values: out,
        },
        degenerate_orders: degenerate,
    })
}

/// Slice form of [`rish_project`]; returns the degenerate-order count.
pub(crate) fn project_into(input: &[f64], harmonized: &[f64], order: usize, out: &mut [f64]) -> usize {
    let spec = ShBasisSpec { order, lambda: 0.0 };
    let mut degenerate = 0;
    for (_, r) in spec.blocks() {
        let e_in: f64 = input[r.clone()].iter().map(|v| v * v).sum();
        let e_h: f64 = harmonized[r.clone()].iter().map(|v| v * v).sum();
        if e_in == 0.0 {
            if e_h > 0.0 {
                degenerate += 1;
            }
            out[r].iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let scale = e_h.sqrt() / e_in.sqrt();
        for k in r {
            out[k] = input[k] * scale;
        }
    }
    degenerate
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coeffs(v: Vec<f64>) -> ShCoefficients {
        ShCoefficients::new(4, v).unwrap()
    }

    #[test]
    fn features_per_order() {
        let mut v = vec![0.0; 15];
        v[0] = 2.0;
        let f = rish_features(&coeffs(v.clone()));
        assert_eq!(f.values, vec![4.0, 0.0, 0.0]);
        v[1..6].iter_mut().for_each(|x| *x = 1.0);
        assert_eq!(rish_features(&coeffs(v)).get(2), 5.0);
    }

    #[test]
    fn equal_energy_is_identity() {
        let a: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        // same per-order energy, different orientation
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| if i % 2 == 0 { -v } else { *v }).collect();
        let p = rish_project(&coeffs(a.clone()), &coeffs(b)).unwrap();
        assert_eq!(p.coeffs.values, a);
        assert_eq!(p.degenerate_orders, 0);
    }

    #[test]
    fn scale_by_sqrt_energy_ratio() {
        let mut a = vec![0.0; 15];
        a[0] = 1.0;
        a[1] = 1.0;
        a[6] = 1.0;
        let mut h = a.clone();
        h[1] = 0.0;
        h[3] = 2.0;
        let p = rish_project(&coeffs(a), &coeffs(h)).unwrap();
        assert_eq!(&p.coeffs.values[1..6], &[2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_order_is_zeroed_and_counted() {
        let mut a = vec![0.0; 15];
        a[0] = 1.0;
        let mut h = vec![0.5; 15];
        h[0] = 3.0;
        let p = rish_project(&coeffs(a), &coeffs(h)).unwrap();
        assert_eq!(p.degenerate_orders, 2);
        assert_eq!(p.coeffs.values[0], 3.0);
        assert!(p.coeffs.values[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn order_mismatch() {
        let a = ShCoefficients::zeros(4);
        let b = ShCoefficients::zeros(2);
        assert!(rish_project(&a, &b).is_err());
    }
}
