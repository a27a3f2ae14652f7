//! Diffusion volumes, gradient tables, tissue masks, b0 normalization and
//! 3×3×3 patch extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{raster, Array3, Array4, Voxel};

const UNIT_TOL: f64 = 1e-6;

/// Minimum number of diffusion-weighted entries (order-4 SH fit).
pub const MIN_WEIGHTED: usize = 15;

/// b-values (s/mm²) and gradient directions of one acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientTable {
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
}

impl GradientTable {
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self> {
        if bvals.is_empty() || bvals.len() != bvecs.len() {
            return Err(Error::Invalid(format!(
                "gradient table needs equal, non-zero counts (bvals {}, bvecs {})",
                bvals.len(),
                bvecs.len()
            )));
        }
        for (i, (&b, v)) in bvals.iter().zip(&bvecs).enumerate() {
            if !b.is_finite() || b < 0.0 {
                return Err(Error::Invalid(format!("b-value {i} is {b}")));
            }
            if b > 0.0 {
                let n = norm(v);
                if (n - 1.0).abs() > UNIT_TOL {
                    return Err(Error::Invalid(format!(
                        "gradient {i} has norm {n}, expected unit length"
                    )));
                }
            }
        }
        let n_b0 = bvals.iter().filter(|&&b| b == 0.0).count();
        let n_dw = bvals.len() - n_b0;
        if n_b0 == 0 {
            return Err(Error::Invalid("gradient table has no b=0 entry".into()));
        }
        if n_dw < MIN_WEIGHTED {
            return Err(Error::Invalid(format!(
                "gradient table has {n_dw} diffusion-weighted entries, need at least {MIN_WEIGHTED}"
            )));
        }
        Ok(Self { bvals, bvecs })
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[[f64; 3]] {
        &self.bvecs
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bvals[i] == 0.0).collect()
    }

    pub fn weighted_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bvals[i] > 0.0).collect()
    }

    /// The diffusion-weighted subset.
    pub fn weighted(&self) -> WeightedTable {
        let idx = self.weighted_indices();
        WeightedTable {
            bvals: idx.iter().map(|&i| self.bvals[i]).collect(),
            dirs: idx.iter().map(|&i| self.bvecs[i]).collect(),
        }
    }
}

/// Diffusion-weighted entries only; every direction is unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTable {
    pub bvals: Vec<f64>,
    pub dirs: Vec<[f64; 3]>,
}

impl WeightedTable {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Same directions and b-values within `tol`.
    pub fn same_as(&self, other: &WeightedTable, tol: f64) -> bool {
        self.len() == other.len()
            && self
                .bvals
                .iter()
                .zip(&other.bvals)
                .all(|(a, b)| (a - b).abs() <= tol)
            && self
                .dirs
                .iter()
                .zip(&other.dirs)
                .all(|(a, b)| (0..3).all(|k| (a[k] - b[k]).abs() <= tol))
    }
}

pub(crate) fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Raw diffusion acquisition `[X, Y, Z, G]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiVolume {
    pub data: Array4,
    pub voxel_size: [f64; 3],
    pub table: GradientTable,
}

impl DwiVolume {
    pub fn new(data: Array4, voxel_size: [f64; 3], table: GradientTable) -> Result<Self> {
        if data.channels() != table.len() {
            return Err(Error::Shape(format!(
                "volume has {} gradient entries but table has {}",
                data.channels(),
                table.len()
            )));
        }
        if let Some(i) = data.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite intensity at flat index {i}")));
        }
        Ok(Self {
            data,
            voxel_size,
            table,
        })
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        self.data.spatial_dims()
    }
}

/// Tissue class of a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Grey,
    White,
}

impl Tissue {
    pub const ALL: [Tissue; 2] = [Tissue::White, Tissue::Grey];

    pub fn label(self) -> u8 {
        match self {
            Tissue::Grey => 1,
            Tissue::White => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Grey => "grey",
            Tissue::White => "white",
        }
    }
}

/// Labels 0 = background, 1 = grey matter, 2 = white matter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    dims: [usize; 3],
    labels: Vec<u8>,
}

impl TissueMask {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "mask {dims:?} needs {} labels, got {}",
                dims.iter().product::<usize>(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l > 2) {
            return Err(Error::Invalid(format!(
                "mask label {} at flat index {i} is not in {{0,1,2}}",
                labels[i]
            )));
        }
        Ok(Self { dims, labels })
    }

    /// Every voxel labelled `label`.
    pub fn filled(dims: [usize; 3], label: u8) -> Result<Self> {
        Self::new(dims, vec![label; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, [x, y, z]: Voxel) -> u8 {
        self.labels[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    #[inline]
    pub fn is_tissue(&self, v: Voxel) -> bool {
        self.label(v) != 0
    }

    pub fn set(&mut self, [x, y, z]: Voxel, label: u8) {
        self.labels[x + self.dims[0] * (y + self.dims[1] * z)] = label;
    }

    /// Masked voxels in raster order.
    pub fn voxels(&self) -> Vec<Voxel> {
        raster(self.dims).filter(|&v| self.is_tissue(v)).collect()
    }

    pub fn tissue_voxels(&self, tissue: Tissue) -> Vec<Voxel> {
        raster(self.dims)
            .filter(|&v| self.label(v) == tissue.label())
            .collect()
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub(crate) fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        if self.dims != dims {
            return Err(Error::Shape(format!(
                "mask dims {:?} differ from volume dims {dims:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// Diffusion-weighted attenuations (signal ÷ mean b0).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDwi {
    pub signal: Array4,
    pub mean_b0: Array3,
    pub table: WeightedTable,
}

/// Divides every diffusion-weighted entry by the voxel's mean b0. Voxels
/// outside the mask are zero in both outputs. Attenuations above one are
/// passed through unchanged.
pub fn normalize_b0(vol: &DwiVolume, mask: &TissueMask) -> Result<NormalizedDwi> {
    let dims = vol.spatial_dims();
    mask.check_dims(dims)?;
    let b0_idx = vol.table.b0_indices();
    let dw_idx = vol.table.weighted_indices();
    if b0_idx.is_empty() {
        return Err(Error::Invalid("no b=0 entries to normalize by".into()));
    }

    let mut mean_b0 = Array3::zeros(dims);
    let mut signal = Array4::zeros([dims[0], dims[1], dims[2], dw_idx.len()]);
    let mut bad = 0usize;
    for v in raster(dims) {
        if !mask.is_tissue(v) {
            continue;
        }
        let m = b0_idx.iter().map(|&g| vol.data.get(v, g)).sum::<f64>() / b0_idx.len() as f64;
        if !(m > 0.0) {
            bad += 1;
            continue;
        }
        mean_b0.set(v, m);
        for (d, &g) in dw_idx.iter().enumerate() {
            signal.set(v, d, vol.data.get(v, g) / m);
        }
    }
    if bad > 0 {
        return Err(Error::Normalization { count: bad });
    }
    Ok(NormalizedDwi {
        signal,
        mean_b0,
        table: vol.table.weighted(),
    })
}

pub const PATCH_SIDE: usize = 3;
pub const PATCH_VOXELS: usize = 27;
pub const PATCH_CENTER: usize = 13;

/// Masked 3×3×3 neighbourhoods, flattened `[N, C, 3, 3, 3]`.
///
/// Within a patch the spatial index is `(dz, dy, dx)` with `dx` fastest, so
/// channel `c` of the centre voxel sits at `c * 27 + 13`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub channels: usize,
    pub data: Vec<f64>,
    pub centers: Vec<Voxel>,
}

impl Patches {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * PATCH_VOXELS
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let n = self.patch_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], Voxel)> + '_ {
        self.data
            .chunks_exact(self.patch_len())
            .zip(self.centers.iter().copied())
    }
}

/// One patch per masked voxel in raster order. Neighbours outside the
/// volume or outside the mask are zero.
pub fn extract_patches(coeffs: &Array4, mask: &TissueMask) -> Result<Patches> {
    let dims = coeffs.spatial_dims();
    mask.check_dims(dims)?;
    let centers = mask.voxels();
    if centers.is_empty() {
        return Err(Error::Invalid("mask selects no voxels".into()));
    }
    let c = coeffs.channels();
    let plen = c * PATCH_VOXELS;
    let mut data = vec![0.0; centers.len() * plen];
    let mut buf = vec![0.0; c];
    for (patch, &[x, y, z]) in data.chunks_exact_mut(plen).zip(&centers) {
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                    if nx == 0 || ny == 0 || nz == 0 {
                        continue;
                    }
                    let n = [nx - 1, ny - 1, nz - 1];
                    if n[0] >= dims[0] || n[1] >= dims[1] || n[2] >= dims[2] {
                        continue;
                    }
                    if !mask.is_tissue(n) {
                        continue;
                    }
                    coeffs.read_voxel(n, &mut buf);
                    let s = dz * 9 + dy * 3 + dx;
                    for (ch, &val) in buf.iter().enumerate() {
                        patch[ch * PATCH_VOXELS + s] = val;
                    }
                }
            }
        }
    }
    Ok(Patches {
        channels: c,
        data,
        centers,
    })
}
