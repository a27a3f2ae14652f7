//! Real symmetric spherical-harmonic basis, regularized least-squares fit and
//! reconstruction.
//!
//! Basis functions are ordered by `l` ascending (even `l` only), then
//! `m = -l..=l`. With `K = sqrt((2l+1)/(4π) · (l-|m|)!/(l+|m|)!)` and the
//! associated Legendre function `P_l^m` carrying the Condon–Shortley phase:
//!
//! * `m = 0`: `K P_l^0(cos θ)`
//! * `m > 0`: `√2 (-1)^m K P_l^m(cos θ) cos(m φ)`
//! * `m < 0`: `√2 (-1)^m K P_l^|m|(cos θ) sin(|m| φ)`

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dwi::{extract_patches, NormalizedDwi, Patches, TissueMask};
use crate::error::{Error, Result};
use crate::grid::{Array3, Array4};
use crate::io::{self, DType, Sidecar};

const UNIT_TOL: f64 = 1e-6;

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_LAMBDA: f64 = 0.006;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShBasisSpec {
    pub order: usize,
    pub lambda: f64,
}

impl Default for ShBasisSpec {
    fn default() -> Self {
        Self {
            order: DEFAULT_ORDER,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl ShBasisSpec {
    pub fn new(order: usize, lambda: f64) -> Result<Self> {
        if order % 2 != 0 {
            return Err(Error::Invalid(format!("SH order must be even, got {order}")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { order, lambda })
    }

    pub fn n_coef(&self) -> usize {
        n_coef(self.order)
    }

    /// `(l, index range)` for every even order up to `self.order`.
    pub fn blocks(&self) -> Vec<(usize, Range<usize>)> {
        (0..=self.order)
            .step_by(2)
            .map(|l| {
                let start = sh_index(l, -(l as i64));
                (l, start..start + 2 * l + 1)
            })
            .collect()
    }

    /// Laplace–Beltrami penalty `l²(l+1)²` per coefficient.
    pub fn penalty(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_coef());
        for (l, r) in self.blocks() {
            let p = (l * l * (l + 1) * (l + 1)) as f64;
            out.extend(std::iter::repeat(p).take(r.len()));
        }
        out
    }
}

pub fn n_coef(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Flat index of `(l, m)` for even `l`.
pub fn sh_index(l: usize, m: i64) -> usize {
    debug_assert!(l % 2 == 0 && m.unsigned_abs() as usize <= l);
    (l * l.saturating_sub(1)) / 2 + (m + l as i64) as usize
}

/// SH coefficient vector for one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoefficients {
    pub order: usize,
    pub values: Vec<f64>,
}

impl ShCoefficients {
    pub fn new(order: usize, values: Vec<f64>) -> Result<Self> {
        if order % 2 != 0 || values.len() != n_coef(order) {
            return Err(Error::Shape(format!(
                "{} coefficients do not match order {order}",
                values.len()
            )));
        }
        Ok(Self { order, values })
    }

    pub fn zeros(order: usize) -> Self {
        Self {
            order,
            values: vec![0.0; n_coef(order)],
        }
    }

    /// The `(l, -l..=l)` block.
    pub fn block(&self, l: usize) -> &[f64] {
        let s = sh_index(l, -(l as i64));
        &self.values[s..s + 2 * l + 1]
    }
}

/// Associated Legendre `P_l^m(x)` for `0 <= m <= l <= lmax`, Condon–Shortley
/// phase included. Indexed `[l][m]`.
fn legendre_table(lmax: usize, x: f64) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; lmax + 1]; lmax + 1];
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for m in 0..=lmax {
        if m > 0 {
            pmm *= -((2 * m - 1) as f64) * s;
        }
        p[m][m] = pmm;
        if m < lmax {
            p[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in (m + 2)..=lmax {
            p[l][m] = ((2 * l - 1) as f64 * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m])
                / (l - m) as f64;
        }
    }
    p
}

fn normalization(l: usize, m: usize) -> f64 {
    // (l-m)!/(l+m)! as a running product
    let mut ratio = 1.0;
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt()
}

/// Maps `g` and `-g` to the same representative so antipodal rows are
/// bit-identical.
fn canonical(g: [f64; 3]) -> [f64; 3] {
    let flip = g[2] < 0.0 || (g[2] == 0.0 && (g[1] < 0.0 || (g[1] == 0.0 && g[0] < 0.0)));
    if flip {
        [-g[0], -g[1], -g[2]]
    } else {
        g
    }
}

/// All basis functions up to `order` at one unit direction.
pub fn basis_row(order: usize, dir: [f64; 3]) -> Vec<f64> {
    let [x, y, z] = canonical(dir);
    let z = z.clamp(-1.0, 1.0);
    let phi = y.atan2(x);
    let p = legendre_table(order, z);
    let mut row = vec![0.0; n_coef(order)];
    for l in (0..=order).step_by(2) {
        row[sh_index(l, 0)] = normalization(l, 0) * p[l][0];
        for m in 1..=l {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            let a = std::f64::consts::SQRT_2 * sign * normalization(l, m) * p[l][m];
            let mf = m as f64 * phi;
            row[sh_index(l, m as i64)] = a * mf.cos();
            row[sh_index(l, -(m as i64))] = a * mf.sin();
        }
    }
    row
}

fn check_dirs(dirs: &[[f64; 3]]) -> Result<()> {
    for (i, d) in dirs.iter().enumerate() {
        let n = crate::dwi::norm(d);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Invalid(format!(
                "direction {i} has norm {n}, expected unit length"
            )));
        }
    }
    Ok(())
}

/// `[n_dirs, n_coef]` basis matrix.
pub fn design_matrix(spec: &ShBasisSpec, dirs: &[[f64; 3]]) -> Result<DMatrix<f64>> {
    check_dirs(dirs)?;
    let n = spec.n_coef();
    let mut b = DMatrix::zeros(dirs.len(), n);
    for (j, &d) in dirs.iter().enumerate() {
        for (k, v) in basis_row(spec.order, d).into_iter().enumerate() {
            b[(j, k)] = v;
        }
    }
    Ok(b)
}

/// Precomputed fit for one direction set: `(BᵀB + λR)⁻¹ Bᵀ`.
#[derive(Debug, Clone)]
pub struct ShFitter {
    spec: ShBasisSpec,
    basis: DMatrix<f64>,
    fit: DMatrix<f64>,
}

impl ShFitter {
    pub fn new(spec: ShBasisSpec, dirs: &[[f64; 3]]) -> Result<Self> {
        let basis = design_matrix(&spec, dirs)?;
        let n = spec.n_coef();
        if dirs.len() < n {
            return Err(Error::ShFit(format!(
                "{} directions cannot determine {n} coefficients",
                dirs.len()
            )));
        }
        let bt = basis.transpose();
        let mut normal = &bt * &basis;
        for (k, p) in spec.penalty().into_iter().enumerate() {
            normal[(k, k)] += spec.lambda * p;
        }
        let fit = match normal.clone().cholesky() {
            Some(ch) => ch.solve(&bt),
            None => {
                let lu = normal.full_piv_lu();
                if !lu.is_invertible() {
                    return Err(Error::ShFit(
                        "singular normal matrix; use a regularization lambda > 0".into(),
                    ));
                }
                lu.solve(&bt).ok_or_else(|| {
                    Error::ShFit("singular normal matrix; use a regularization lambda > 0".into())
                })?
            }
        };
        if fit.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShFit(
                "ill-conditioned normal matrix; use a regularization lambda > 0".into(),
            ));
        }
        Ok(Self { spec, basis, fit })
    }

    pub fn spec(&self) -> &ShBasisSpec {
        &self.spec
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn n_dirs(&self) -> usize {
        self.basis.nrows()
    }

    pub fn fit(&self, signal: &[f64]) -> Result<ShCoefficients> {
        if signal.len() != self.n_dirs() {
            return Err(Error::Shape(format!(
                "signal has {} samples, fitter expects {}",
                signal.len(),
                self.n_dirs()
            )));
        }
        let mut out = vec![0.0; self.spec.n_coef()];
        self.fit_into(signal, &mut out);
        Ok(ShCoefficients {
            order: self.spec.order,
            values: out,
        })
    }

    pub(crate) fn fit_into(&self, signal: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &s) in signal.iter().enumerate() {
                acc += self.fit[(k, j)] * s;
            }
            *o = acc;
        }
    }

    pub fn reconstruct(&self, c: &ShCoefficients) -> Result<Vec<f64>> {
        reconstruct_with(&self.basis, c)
    }
}

pub fn fit_sh(signal: &[f64], dirs: &[[f64; 3]], spec: &ShBasisSpec) -> Result<ShCoefficients> {
    ShFitter::new(*spec, dirs)?.fit(signal)
}

/// `s = B c`.
pub fn reconstruct(c: &ShCoefficients, dirs: &[[f64; 3]]) -> Result<Vec<f64>> {
    let spec = ShBasisSpec {
        order: c.order,
        lambda: 0.0,
    };
    let b = design_matrix(&spec, dirs)?;
    reconstruct_with(&b, c)
}

pub(crate) fn reconstruct_with(basis: &DMatrix<f64>, c: &ShCoefficients) -> Result<Vec<f64>> {
    if c.values.len() != basis.ncols() {
        return Err(Error::Shape(format!(
            "{} coefficients for a {}-column basis",
            c.values.len(),
            basis.ncols()
        )));
    }
    let v = basis * DVector::from_column_slice(&c.values);
    Ok(v.iter().copied().collect())
}

/// Per-voxel SH coefficients of a normalized acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct ShVolume {
    pub coeffs: Array4,
    pub mean_b0: Array3,
    pub mask: TissueMask,
    pub spec: ShBasisSpec,
}

impl ShVolume {
    /// Fits every masked voxel; unmasked voxels stay zero.
    pub fn fit(norm: &NormalizedDwi, mask: &TissueMask, spec: ShBasisSpec) -> Result<Self> {
        let fitter = ShFitter::new(spec, &norm.table.dirs)?;
        Self::fit_with(&fitter, norm, mask)
    }

    pub fn fit_with(fitter: &ShFitter, norm: &NormalizedDwi, mask: &TissueMask) -> Result<Self> {
        let dims = norm.signal.spatial_dims();
        mask.check_dims(dims)?;
        if norm.signal.channels() != fitter.n_dirs() {
            return Err(Error::Shape(format!(
                "volume has {} directions, fitter expects {}",
                norm.signal.channels(),
                fitter.n_dirs()
            )));
        }
        let n = fitter.spec.n_coef();
        let mut coeffs = Array4::zeros([dims[0], dims[1], dims[2], n]);
        let mut sig = vec![0.0; fitter.n_dirs()];
        let mut c = vec![0.0; n];
        for v in mask.voxels() {
            norm.signal.read_voxel(v, &mut sig);
            fitter.fit_into(&sig, &mut c);
            coeffs.write_voxel(v, &c);
        }
        Ok(Self {
            coeffs,
            mean_b0: norm.mean_b0.clone(),
            mask: mask.clone(),
            spec: fitter.spec,
        })
    }

    pub fn patches(&self) -> Result<Patches> {
        extract_patches(&self.coeffs, &self.mask)
    }

    /// Coefficients at `coeffs_path`; mean b0 and mask as `_meanb0` / `_mask`
    /// siblings.
    pub fn save(&self, coeffs_path: &Path, voxel_size: [f64; 3]) -> Result<()> {
        let mut sc = Sidecar::new(self.coeffs.dims().to_vec(), DType::F32, voxel_size);
        sc.sh_order = Some(self.spec.order);
        sc.sh_lambda = Some(self.spec.lambda);
        io::save_array4(coeffs_path, &self.coeffs, &sc)?;
        io::save_array3(&io::sibling(coeffs_path, "meanb0"), &self.mean_b0, voxel_size)?;
        io::save_mask(&io::sibling(coeffs_path, "mask"), &self.mask, voxel_size)
    }

    pub fn load(coeffs_path: &Path) -> Result<Self> {
        let (coeffs, sc) = io::load_array4(coeffs_path)?;
        let order = sc
            .sh_order
            .ok_or_else(|| Error::load(coeffs_path, "sidecar lacks sh_order"))?;
        let spec = ShBasisSpec::new(order, sc.sh_lambda.unwrap_or(DEFAULT_LAMBDA))?;
        if coeffs.channels() != spec.n_coef() {
            return Err(Error::load(
                coeffs_path,
                format!("{} channels but order {order}", coeffs.channels()),
            ));
        }
        let (mean_b0, _) = io::load_array3(&io::sibling(coeffs_path, "meanb0"))?;
        let mask = io::load_mask(&io::sibling(coeffs_path, "mask"))?;
        Ok(Self {
            coeffs,
            mean_b0,
            mask,
            spec,
        })
    }
}
