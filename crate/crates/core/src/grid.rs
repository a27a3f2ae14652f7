//! Dense voxel grids stored x-fastest, matching the on-disk container layout.

use crate::error::{Error, Result};

pub type Voxel = [usize; 3];

/// 3D scalar grid `[X, Y, Z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Array3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Array3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "grid {dims:?} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, [x, y, z]: Voxel) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, v: Voxel) -> f64 {
        self.data[self.offset(v)]
    }

    #[inline]
    pub fn set(&mut self, v: Voxel, value: f64) {
        let o = self.offset(v);
        self.data[o] = value;
    }
}

/// 4D grid `[X, Y, Z, C]`; the last axis is the per-voxel vector (gradients,
/// SH coefficients, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Array4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Array4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "grid {dims:?} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn n_spatial(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn offset(&self, [x, y, z]: Voxel, c: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * (z + self.dims[2] * c))
    }

    #[inline]
    pub fn get(&self, v: Voxel, c: usize) -> f64 {
        self.data[self.offset(v, c)]
    }

    #[inline]
    pub fn set(&mut self, v: Voxel, c: usize, value: f64) {
        let o = self.offset(v, c);
        self.data[o] = value;
    }

    /// Copies out the channel vector at one voxel.
    pub fn voxel(&self, v: Voxel) -> Vec<f64> {
        let mut out = vec![0.0; self.dims[3]];
        self.read_voxel(v, &mut out);
        out
    }

    pub fn read_voxel(&self, v: Voxel, out: &mut [f64]) {
        let base = self.offset(v, 0);
        let stride = self.n_spatial();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.data[base + c * stride];
        }
    }

    pub fn write_voxel(&mut self, v: Voxel, values: &[f64]) {
        let base = self.offset(v, 0);
        let stride = self.n_spatial();
        for (c, &val) in values.iter().enumerate() {
            self.data[base + c * stride] = val;
        }
    }

    /// Raster order over the spatial grid, x fastest.
    pub fn voxels(&self) -> impl Iterator<Item = Voxel> {
        raster(self.spatial_dims())
    }
}

/// All voxels of a grid in x-fastest raster order.
pub fn raster(dims: [usize; 3]) -> impl Iterator<Item = Voxel> {
    (0..dims[2]).flat_map(move |z| {
        (0..dims[1]).flat_map(move |y| (0..dims[0]).map(move |x| [x, y, z]))
    })
}
