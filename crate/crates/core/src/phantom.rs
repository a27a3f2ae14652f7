//! Paired synthetic two-scanner diffusion datasets.
//!
//! Every subject shares one region layout: an ellipsoidal brain whose core is
//! "white matter" (circumferential fibres with a 90° crossing band around the
//! equator) and whose shell is low-anisotropy "grey matter". Scanner B sees
//! the same microstructure with trace-preserving anisotropy scaling, a scaled
//! effective diffusivity, a smooth multiplicative bias on the attenuations and
//! its own Rician noise.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dti::DiffusionTensor;
use crate::dwi::{DwiVolume, GradientTable, Tissue, TissueMask};
use crate::error::{Error, Result};
use crate::grid::{raster, Array4};
use crate::io::{self, Manifest, ManifestEntry};
use crate::sh::{ShBasisSpec, ShFitter};

/// Largest relative RMS residual of an order-4 fit to noise-free signals.
pub const MAX_FIT_RESIDUAL: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub n_subjects: usize,
    pub bvalue: f64,
    pub n_directions: usize,
    pub n_b0: usize,
    /// Unweighted signal level.
    pub s0: f64,
    /// Scanner-B eigenvalue spread about the mean diffusivity.
    pub anisotropy_scale: f64,
    /// Scanner-B multiplier on all diffusivities.
    pub diffusivity_scale: f64,
    /// Peak of the scanner-B multiplicative bias on attenuations.
    pub bias_amplitude: f64,
    pub noise_sigma_a: f64,
    pub noise_sigma_b: f64,
    /// Per-subject relative jitter of the tissue eigenvalues.
    pub subject_jitter: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [16, 16, 16],
            voxel_size_mm: [2.0; 3],
            n_subjects: 10,
            bvalue: 1200.0,
            n_directions: 30,
            n_b0: 3,
            s0: 1000.0,
            anisotropy_scale: 0.85,
            diffusivity_scale: 1.1,
            bias_amplitude: 0.1,
            noise_sigma_a: 10.0,
            noise_sigma_b: 10.0,
            subject_jitter: 0.05,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Scanner B equal to scanner A and no noise.
    pub fn identity() -> Self {
        Self {
            anisotropy_scale: 1.0,
            diffusivity_scale: 1.0,
            bias_amplitude: 0.0,
            noise_sigma_a: 0.0,
            noise_sigma_b: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Invalid(format!("grid {:?} is smaller than 8³", self.dims)));
        }
        if self.n_subjects == 0 {
            return Err(Error::Invalid("n_subjects must be at least 1".into()));
        }
        if self.n_directions < crate::dwi::MIN_WEIGHTED {
            return Err(Error::Invalid(format!(
                "{} directions, need at least {}",
                self.n_directions,
                crate::dwi::MIN_WEIGHTED
            )));
        }
        if self.n_b0 == 0 {
            return Err(Error::Invalid("n_b0 must be at least 1".into()));
        }
        let positive = [self.bvalue, self.s0, self.anisotropy_scale, self.diffusivity_scale];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Invalid("b-value, s0 and scale factors must be positive".into()));
        }
        if self.anisotropy_scale > 1.5 {
            return Err(Error::Invalid("anisotropy_scale above 1.5 gives negative eigenvalues".into()));
        }
        let nonneg = [self.bias_amplitude, self.noise_sigma_a, self.noise_sigma_b, self.subject_jitter];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid("bias, noise and jitter must be non-negative".into()));
        }
        if self.subject_jitter >= 0.5 {
            return Err(Error::Invalid("subject_jitter must be below 0.5".into()));
        }
        if self.voxel_size_mm.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Invalid("voxel size must be positive".into()));
        }
        Ok(())
    }

    pub fn gradient_table(&self) -> GradientTable {
        let dirs = repulsion_directions(self.n_directions, self.seed);
        let mut bvals = vec![0.0; self.n_b0];
        let mut bvecs = vec![[0.0; 3]; self.n_b0];
        bvals.extend(std::iter::repeat_n(self.bvalue, dirs.len()));
        bvecs.extend(dirs);
        GradientTable::new(bvals, bvecs).expect("generated table is valid")
    }
}

/// `n` unit vectors spread over the sphere by electrostatic repulsion between
/// antipodal pairs, canonicalized to `z ≥ 0`.
pub fn repulsion_directions(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1_5EC7);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pts: Vec<Vector3<f64>> = (0..n)
        .map(|_| {
            let v = Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
            v.normalize()
        })
        .collect();
    for it in 0..400 {
        let step = 0.05 / (1.0 + it as f64 / 50.0);
        let forces: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let mut f = Vector3::zeros();
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    for s in [1.0, -1.0] {
                        let d = pts[i] - s * pts[j];
                        let r2 = d.norm_squared().max(1e-12);
                        f += d / (r2 * r2.sqrt());
                    }
                }
                f
            })
            .collect();
        for (p, f) in pts.iter_mut().zip(&forces) {
            let tangential = f - p.dot(f) * *p;
            let cap = tangential.norm().max(1.0);
            *p = (*p + step * tangential / cap).normalize();
        }
    }
    pts.into_iter()
        .map(|p| {
            let p = if p.z < 0.0 { -p } else { p };
            [p.x, p.y, p.z]
        })
        .collect()
}

struct Compartment {
    fraction: f64,
    direction: Vector3<f64>,
    eig: [f64; 3],
}

/// Tissue label and compartments of one voxel; coordinates in `[-1, 1]`.
fn layout(u: [f64; 3], gm_dir: Vector3<f64>) -> Option<(Tissue, Vec<Compartment>)> {
    let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if r >= 0.9 {
        return None;
    }
    if r >= 0.55 {
        let c = Compartment {
            fraction: 1.0,
            direction: gm_dir,
            eig: [1.0e-3, 0.8e-3, 0.7e-3],
        };
        return Some((Tissue::Grey, vec![c]));
    }
    let wm = [1.4e-3, 0.4e-3, 0.4e-3];
    let rho = (u[0] * u[0] + u[1] * u[1]).sqrt();
    let circ = if rho < 1e-9 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        Vector3::new(-u[1] / rho, u[0] / rho, 0.0)
    };
    let mut comps = vec![Compartment {
        fraction: 1.0,
        direction: circ,
        eig: wm,
    }];
    if u[2].abs() < 0.2 {
        comps[0].fraction = 0.5;
        comps.push(Compartment {
            fraction: 0.5,
            direction: Vector3::new(0.0, 0.0, 1.0),
            eig: wm,
        });
    }
    Some((Tissue::White, comps))
}

/// Axially symmetric-ish tensor with principal axis `e1`.
fn tensor(direction: Vector3<f64>, eig: [f64; 3]) -> DiffusionTensor {
    let e1 = direction.normalize();
    let helper = if e1.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e2 = e1.cross(&helper).normalize();
    let e3 = e1.cross(&e2);
    let m = eig[0] * e1 * e1.transpose() + eig[1] * e2 * e2.transpose() + eig[2] * e3 * e3.transpose();
    DiffusionTensor::from_matrix(&Matrix3::from(m))
}

/// Eigenvalues with their spread about the mean scaled by `s`.
pub fn scale_anisotropy(eig: [f64; 3], s: f64) -> [f64; 3] {
    let md = (eig[0] + eig[1] + eig[2]) / 3.0;
    eig.map(|l| md + s * (l - md))
}

/// Smooth field in `[1, 1 + amplitude]`, fixed by the config seed.
fn bias_field(u: [f64; 3], amplitude: f64, phases: [f64; 3]) -> f64 {
    use std::f64::consts::PI;
    let w = 0.5
        + 0.25 * (PI * 0.5 * u[0] + phases[0]).cos() * (PI * 0.5 * u[1] + phases[1]).cos()
        + 0.25 * (PI * 0.5 * u[2] + phases[2]).cos();
    1.0 + amplitude * w
}

/// Noise-free attenuation of a compartment mixture.
fn mixture(comps: &[(f64, DiffusionTensor)], b: f64, g: [f64; 3]) -> f64 {
    comps.iter().map(|(f, d)| f * d.attenuation(b, g)).sum()
}

fn rician(s: f64, sigma: f64, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> f64 {
    if sigma == 0.0 {
        return s;
    }
    let re = s + sigma * normal.sample(rng);
    let im = sigma * normal.sample(rng);
    (re * re + im * im).sqrt()
}

#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub id: String,
    pub scanner_a: DwiVolume,
    pub scanner_b: DwiVolume,
    pub mask: TissueMask,
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:02}")
}

fn stream(seed: u64, subject: usize, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((subject as u64) << 8) | tag);
    rng
}

/// Generates subject `index`. Layout, bias field and direction set depend on
/// the config seed only; eigenvalue jitter and noise also on `index`.
pub fn generate_subject(cfg: &PhantomConfig, index: usize) -> Result<PhantomSubject> {
    cfg.validate()?;
    let table = cfg.gradient_table();
    let dims = cfg.dims;

    let mut layout_rng = stream(cfg.seed, usize::MAX >> 8, 1);
    let phases = [0; 3].map(|_| layout_rng.random_range(0.0..std::f64::consts::TAU));
    let gm_dir = Vector3::new(layout_rng.random::<f64>() - 0.5, layout_rng.random::<f64>() - 0.5, 0.5);

    let mut jitter_rng = stream(cfg.seed, index, 2);
    let mut jitter = || 1.0 + cfg.subject_jitter * (2.0 * jitter_rng.random::<f64>() - 1.0);
    let (j_white, j_grey) = (jitter(), jitter());

    let n_vol = table.len();
    let mut a = Array4::zeros([dims[0], dims[1], dims[2], n_vol]);
    let mut b = Array4::zeros([dims[0], dims[1], dims[2], n_vol]);
    let mut mask = TissueMask::filled(dims, 0)?;
    let mut noise_a = stream(cfg.seed, index, 3);
    let mut noise_b = stream(cfg.seed, index, 4);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut clean = Vec::new();
    for v in raster(dims) {
        let u = [0, 1, 2].map(|k| 2.0 * (v[k] as f64 + 0.5) / dims[k] as f64 - 1.0);
        let Some((tissue, comps)) = layout(u, gm_dir) else {
            continue;
        };
        mask.set(v, tissue.label());
        let j = if tissue == Tissue::White { j_white } else { j_grey };
        let comps_a: Vec<(f64, DiffusionTensor)> = comps
            .iter()
            .map(|c| (c.fraction, tensor(c.direction, c.eig.map(|l| l * j))))
            .collect();
        let comps_b: Vec<(f64, DiffusionTensor)> = comps
            .iter()
            .map(|c| {
                let eig = scale_anisotropy(c.eig.map(|l| l * j), cfg.anisotropy_scale);
                (c.fraction, tensor(c.direction, eig.map(|l| l * cfg.diffusivity_scale)))
            })
            .collect();
        let bias = bias_field(u, cfg.bias_amplitude, phases);
        let s0 = cfg.s0 * if tissue == Tissue::White { 0.8 } else { 1.0 };
        let mut att = Vec::with_capacity(table.len());
        for (g, (&bv, &dir)) in table.bvals().iter().zip(table.bvecs()).enumerate() {
            let (sa, sb) = if bv == 0.0 {
                (s0, s0)
            } else {
                let ea = mixture(&comps_a, bv, dir);
                att.push(ea);
                (s0 * ea, s0 * bias * mixture(&comps_b, bv, dir))
            };
            a.set(v, g, rician(sa, cfg.noise_sigma_a, &mut noise_a, &normal));
            b.set(v, g, rician(sb, cfg.noise_sigma_b, &mut noise_b, &normal));
        }
        clean.push(att);
    }

    check_band_limit(&table, &clean)?;
    let round = |arr: &mut Array4| arr.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
    round(&mut a);
    round(&mut b);
    Ok(PhantomSubject {
        id: subject_id(index),
        scanner_a: DwiVolume::new(a, cfg.voxel_size_mm, table.clone())?,
        scanner_b: DwiVolume::new(b, cfg.voxel_size_mm, table)?,
        mask,
    })
}

/// Relative RMS residual of the default order-4 fit over all voxels.
pub fn band_limit_residual(table: &GradientTable, signals: &[Vec<f64>]) -> Result<f64> {
    let fitter = ShFitter::new(ShBasisSpec::default(), &table.weighted().dirs)?;
    let (mut err, mut norm) = (0.0, 0.0);
    for s in signals {
        let c = fitter.fit(s)?;
        let r = fitter.reconstruct(&c)?;
        for (x, y) in s.iter().zip(r) {
            err += (x - y) * (x - y);
            norm += x * x;
        }
    }
    Ok((err / norm.max(f64::MIN_POSITIVE)).sqrt())
}

fn check_band_limit(table: &GradientTable, signals: &[Vec<f64>]) -> Result<()> {
    let r = band_limit_residual(table, signals)?;
    if r > MAX_FIT_RESIDUAL {
        return Err(Error::Invalid(format!(
            "phantom signals are not band-limited: order-4 residual {r:.4} exceeds {MAX_FIT_RESIDUAL}"
        )));
    }
    Ok(())
}

/// Writes one directory per subject plus `manifest.json` under `out`.
pub fn write_phantom(cfg: &PhantomConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let subjects: Vec<PhantomSubject> = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(cfg, i))
        .collect::<Result<_>>()?;
    let mut manifest = Manifest { subjects: Vec::new() };
    for s in &subjects {
        let dir = out.join(&s.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        io::save_volume(&dir.join("scanner_a.raw"), &s.scanner_a)?;
        io::save_volume(&dir.join("scanner_b.raw"), &s.scanner_b)?;
        io::save_mask(&dir.join("mask.raw"), &s.mask, cfg.voxel_size_mm)?;
        manifest.subjects.push(ManifestEntry {
            id: s.id.clone(),
            source: format!("{}/scanner_a.raw", s.id),
            target: format!("{}/scanner_b.raw", s.id),
            mask: format!("{}/mask.raw", s.id),
        });
    }
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}
