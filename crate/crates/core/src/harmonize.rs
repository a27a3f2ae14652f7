//! Applying a trained network to a new source-scanner acquisition.

use rayon::prelude::*;

use crate::dwi::{normalize_b0, DwiVolume, GradientTable, NormalizedDwi, TissueMask};
use crate::error::{Error, Result};
use crate::grid::Array4;
use crate::model::NetworkParams;
use crate::rish::project_into;
use crate::sh::{design_matrix, ShBasisSpec, ShVolume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonizeOptions {
    pub sh: ShBasisSpec,
    /// Skip the RISH projection and use the raw network output.
    pub skip_projection: bool,
}

impl Default for HarmonizeOptions {
    fn default() -> Self {
        Self {
            sh: ShBasisSpec::default(),
            skip_projection: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Harmonized {
    /// Output signal on the requested table: b0 entries hold the source mean
    /// b0, weighted entries the harmonized attenuation times that mean.
    pub volume: DwiVolume,
    /// Harmonized attenuations, one channel per weighted output direction.
    pub attenuations: Array4,
    /// Projected SH coefficients per voxel.
    pub coeffs: Array4,
    /// Total number of (voxel, order) blocks that could not be projected.
    pub degenerate_orders: usize,
}

/// Normalizes `src` by its mean b0 and harmonizes it onto `out_table`.
pub fn harmonize_volume(
    model: &NetworkParams,
    src: &DwiVolume,
    mask: &TissueMask,
    out_table: &GradientTable,
    opts: &HarmonizeOptions,
) -> Result<Harmonized> {
    let norm = normalize_b0(src, mask)?;
    harmonize_normalized(model, &norm, mask, out_table, src.voxel_size, opts)
}

/// Per masked voxel: SH fit, network on the 3×3×3 neighbourhood, RISH
/// projection of the input onto the predicted energies, reconstruction at the
/// weighted directions of `out_table` and rescaling by the mean b0.
pub fn harmonize_normalized(
    model: &NetworkParams,
    norm: &NormalizedDwi,
    mask: &TissueMask,
    out_table: &GradientTable,
    voxel_size: [f64; 3],
    opts: &HarmonizeOptions,
) -> Result<Harmonized> {
    if model.spec.sh_order != opts.sh.order {
        return Err(Error::Invalid(format!(
            "checkpoint was trained for SH order {}, basis is order {}",
            model.spec.sh_order, opts.sh.order
        )));
    }
    let sh = ShVolume::fit(norm, mask, opts.sh)?;
    let patches = sh.patches()?;
    let n = patches.len();
    let nc = opts.sh.n_coef();
    let pred = model.predict(&patches.data, n)?;

    let out_dirs = out_table.weighted();
    let basis = design_matrix(&opts.sh, &out_dirs.dirs)?;
    let nd = out_dirs.len();

    let per_voxel: Vec<(Vec<f64>, Vec<f64>, usize)> = patches
        .centers
        .par_iter()
        .enumerate()
        .map(|(i, &v)| {
            let input = sh.coeffs.voxel(v);
            let h = &pred[i * nc..(i + 1) * nc];
            let mut c = vec![0.0; nc];
            let degenerate = if opts.skip_projection {
                c.copy_from_slice(h);
                0
            } else {
                project_into(&input, h, opts.sh.order, &mut c)
            };
            let att: Vec<f64> = (0..nd)
                .map(|j| (0..nc).map(|k| basis[(j, k)] * c[k]).sum())
                .collect();
            (c, att, degenerate)
        })
        .collect();

    let dims = norm.signal.spatial_dims();
    let mut coeffs = Array4::zeros([dims[0], dims[1], dims[2], nc]);
    let mut attenuations = Array4::zeros([dims[0], dims[1], dims[2], nd]);
    let mut data = Array4::zeros([dims[0], dims[1], dims[2], out_table.len()]);
    let b0_idx = out_table.b0_indices();
    let dw_idx = out_table.weighted_indices();
    let mut degenerate_orders = 0;
    for (&v, (c, att, d)) in patches.centers.iter().zip(per_voxel) {
        degenerate_orders += d;
        coeffs.write_voxel(v, &c);
        attenuations.write_voxel(v, &att);
        let m = norm.mean_b0.get(v);
        for &g in &b0_idx {
            data.set(v, g, m);
        }
        for (&g, a) in dw_idx.iter().zip(&att) {
            data.set(v, g, a * m);
        }
    }
    Ok(Harmonized {
        volume: DwiVolume::new(data, voxel_size, out_table.clone())?,
        attenuations,
        coeffs,
        degenerate_orders,
    })
}
