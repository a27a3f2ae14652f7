//! Single-tensor log-linear fit with FA and MD.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attenuations below this are clamped before taking the log.
pub const MIN_ATTENUATION: f64 = 1e-6;

/// Symmetric tensor in mm²/s, stored as `(xx, yy, zz, xy, xz, yz)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTensor {
    pub elements: [f64; 6],
}

impl DiffusionTensor {
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self {
            elements: [
                m[(0, 0)],
                m[(1, 1)],
                m[(2, 2)],
                0.5 * (m[(0, 1)] + m[(1, 0)]),
                0.5 * (m[(0, 2)] + m[(2, 0)]),
                0.5 * (m[(1, 2)] + m[(2, 1)]),
            ],
        }
    }

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        Self {
            elements: [a, b, c, 0.0, 0.0, 0.0],
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let [xx, yy, zz, xy, xz, yz] = self.elements;
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    /// Eigenvalues, descending.
    pub fn eigenvalues(&self) -> [f64; 3] {
        let e = SymmetricEigen::new(self.matrix()).eigenvalues;
        let mut v = [e[0], e[1], e[2]];
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    pub fn has_negative_eigenvalue(&self) -> bool {
        self.eigenvalues()[2] < 0.0
    }

    /// Apparent signal attenuation `exp(-b gᵀDg)`.
    pub fn attenuation(&self, b: f64, g: [f64; 3]) -> f64 {
        let [xx, yy, zz, xy, xz, yz] = self.elements;
        let q = xx * g[0] * g[0]
            + yy * g[1] * g[1]
            + zz * g[2] * g[2]
            + 2.0 * (xy * g[0] * g[1] + xz * g[0] * g[2] + yz * g[1] * g[2]);
        (-b * q).exp()
    }
}

/// Precomputed least-squares solve for one direction set.
#[derive(Debug, Clone)]
pub struct TensorFitter {
    pinv: DMatrix<f64>,
}

impl TensorFitter {
    pub fn new(bvals: &[f64], dirs: &[[f64; 3]]) -> Result<Self> {
        if bvals.len() != dirs.len() {
            return Err(Error::Shape(format!(
                "{} b-values for {} directions",
                bvals.len(),
                dirs.len()
            )));
        }
        if dirs.len() < 6 {
            return Err(Error::TensorFit(format!(
                "{} directions cannot determine 6 tensor elements",
                dirs.len()
            )));
        }
        let mut a = DMatrix::zeros(dirs.len(), 6);
        for (i, (&b, g)) in bvals.iter().zip(dirs).enumerate() {
            let row = [
                g[0] * g[0],
                g[1] * g[1],
                g[2] * g[2],
                2.0 * g[0] * g[1],
                2.0 * g[0] * g[2],
                2.0 * g[1] * g[2],
            ];
            for (k, v) in row.into_iter().enumerate() {
                a[(i, k)] = -b * v;
            }
        }
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smax > 0.0) || smin <= smax * 1e-10 {
            return Err(Error::TensorFit(
                "direction set is rank deficient for a tensor fit".into(),
            ));
        }
        let pinv = svd
            .pseudo_inverse(smax * 1e-12)
            .map_err(|e| Error::TensorFit(e.to_string()))?;
        Ok(Self { pinv })
    }

    pub fn n_dirs(&self) -> usize {
        self.pinv.ncols()
    }

    /// Log-linear least squares; attenuations are clamped at [`MIN_ATTENUATION`].
    pub fn fit(&self, attenuations: &[f64]) -> Result<DiffusionTensor> {
        if attenuations.len() != self.n_dirs() {
            return Err(Error::Shape(format!(
                "{} attenuations for {} directions",
                attenuations.len(),
                self.n_dirs()
            )));
        }
        let y = DVector::from_iterator(
            attenuations.len(),
            attenuations.iter().map(|&s| s.max(MIN_ATTENUATION).ln()),
        );
        let d = &self.pinv * y;
        Ok(DiffusionTensor {
            elements: [d[0], d[1], d[2], d[3], d[4], d[5]],
        })
    }
}

pub fn fit_tensor(attenuations: &[f64], bvals: &[f64], dirs: &[[f64; 3]]) -> Result<DiffusionTensor> {
    TensorFitter::new(bvals, dirs)?.fit(attenuations)
}

/// Fractional anisotropy from the eigenvalues, clamped to `[0, 1]`; zero for
/// the zero tensor.
pub fn fa(d: &DiffusionTensor) -> f64 {
    let ev = d.eigenvalues();
    let norm2: f64 = ev.iter().map(|v| v * v).sum();
    if norm2 == 0.0 {
        return 0.0;
    }
    let mean = (ev[0] + ev[1] + ev[2]) / 3.0;
    let dev2: f64 = ev.iter().map(|v| (v - mean) * (v - mean)).sum();
    ((1.5 * dev2 / norm2).sqrt()).clamp(0.0, 1.0)
}

/// Mean diffusivity, trace / 3.
pub fn md(d: &DiffusionTensor) -> f64 {
    (d.elements[0] + d.elements[1] + d.elements[2]) / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dirs30() -> Vec<[f64; 3]> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..30)
            .map(|i| {
                let z = 1.0 - (i as f64 + 0.5) / 30.0;
                let r = (1.0 - z * z).sqrt();
                let t = golden * i as f64;
                [r * t.cos(), r * t.sin(), z]
            })
            .collect()
    }

    #[test]
    fn fa_edge_cases() {
        assert_eq!(fa(&DiffusionTensor::diag(1e-3, 1e-3, 1e-3)), 0.0);
        assert!((fa(&DiffusionTensor::diag(2e-3, 0.0, 0.0)) - 1.0).abs() < 1e-15);
        assert_eq!(fa(&DiffusionTensor::diag(0.0, 0.0, 0.0)), 0.0);
        // negative eigenvalues still land in [0, 1]
        let v = fa(&DiffusionTensor::diag(1e-3, -1e-3, -1e-3));
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn md_arithmetic() {
        assert!((md(&DiffusionTensor::diag(1e-3, 1e-3, 1e-3)) - 1e-3).abs() < 1e-18);
        assert!((md(&DiffusionTensor::diag(1.7e-3, 0.3e-3, 0.3e-3)) - 0.766_666_666_666_666_7e-3).abs() < 1e-15);
    }

    #[test]
    fn no_decay_gives_zero_tensor() {
        let d = dirs30();
        let b = vec![1200.0; 30];
        let t = fit_tensor(&[1.0; 30], &b, &d).unwrap();
        assert!(t.elements.iter().all(|v| v.abs() < 1e-18));
    }

    #[test]
    fn isotropic_round_trip() {
        let d = dirs30();
        let b = vec![1200.0; 30];
        let truth = DiffusionTensor::diag(1e-3, 1e-3, 1e-3);
        let s: Vec<f64> = d.iter().map(|&g| truth.attenuation(1200.0, g)).collect();
        let t = fit_tensor(&s, &b, &d).unwrap();
        for (a, e) in t.elements.iter().zip(truth.elements) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_deficient_rejected() {
        let d = vec![[0.0, 0.0, 1.0]; 10];
        assert!(TensorFitter::new(&[1000.0; 10], &d).is_err());
        assert!(TensorFitter::new(&[1000.0; 5], &dirs30()[..5]).is_err());
    }
}
