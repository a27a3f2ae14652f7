//! On-disk formats: raw little-endian payload + JSON sidecar, FSL-style
//! bval/bvec text files, and the subject manifest.
//!
//! A payload `foo.raw` has its sidecar at `foo.json` and, for diffusion
//! volumes, its gradient table at `foo.bval` / `foo.bvec`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dwi::{DwiVolume, GradientTable, TissueMask};
use crate::error::{Error, Result};
use crate::grid::{Array3, Array4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "u8")]
    U8,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: Vec<usize>,
    pub dtype: DType,
    pub voxel_size_mm: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sh_order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sh_lambda: Option<f64>,
}

impl Sidecar {
    pub fn new(dims: Vec<usize>, dtype: DType, voxel_size_mm: [f64; 3]) -> Self {
        Self {
            dims,
            dtype,
            voxel_size_mm,
            sh_order: None,
            sh_lambda: None,
        }
    }

    fn n_values(&self) -> usize {
        self.dims.iter().product()
    }
}

pub fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

pub fn bval_path(payload: &Path) -> PathBuf {
    payload.with_extension("bval")
}

pub fn bvec_path(payload: &Path) -> PathBuf {
    payload.with_extension("bvec")
}

/// `dir/stem_suffix.raw` next to `payload`.
pub fn sibling(payload: &Path, suffix: &str) -> PathBuf {
    let stem = payload
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    payload.with_file_name(format!("{stem}_{suffix}.raw"))
}

pub fn read_sidecar(payload: &Path) -> Result<Sidecar> {
    let sc = sidecar_path(payload);
    let text = fs::read_to_string(&sc).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::load(&sc, "missing JSON sidecar"),
        _ => Error::io(&sc, e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::load(&sc, format!("bad sidecar: {e}")))
}

fn write_sidecar(payload: &Path, sidecar: &Sidecar) -> Result<()> {
    let sc = sidecar_path(payload);
    let mut text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    text.push('\n');
    fs::write(&sc, text).map_err(|e| Error::io(sc, e))
}

fn read_payload(payload: &Path, sidecar: &Sidecar, want: DType) -> Result<Vec<u8>> {
    if sidecar.dtype != want {
        return Err(Error::load(
            payload,
            format!("dtype {:?}, expected {:?}", sidecar.dtype, want),
        ));
    }
    let bytes = fs::read(payload).map_err(|e| Error::io(payload, e))?;
    let expect = sidecar.n_values() * want.width();
    if bytes.len() != expect {
        return Err(Error::load(
            payload,
            format!(
                "size mismatch: sidecar dims {:?} need {} bytes, payload has {}",
                sidecar.dims,
                expect,
                bytes.len()
            ),
        ));
    }
    Ok(bytes)
}

/// Reads an f32 payload, rejecting non-finite values.
pub fn read_f32(payload: &Path) -> Result<(Sidecar, Vec<f32>)> {
    let sidecar = read_sidecar(payload)?;
    let bytes = read_payload(payload, &sidecar, DType::F32)?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::load(
            payload,
            format!("non-finite value at index {:?}", unravel(i, &sidecar.dims)),
        ));
    }
    Ok((sidecar, values))
}

fn unravel(mut i: usize, dims: &[usize]) -> Vec<usize> {
    dims.iter()
        .map(|&d| {
            let r = i % d;
            i /= d;
            r
        })
        .collect()
}

pub fn write_f32(payload: &Path, sidecar: &Sidecar, values: &[f32]) -> Result<()> {
    if values.len() != sidecar.n_values() {
        return Err(Error::Shape(format!(
            "{} values for dims {:?}",
            values.len(),
            sidecar.dims
        )));
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(payload, bytes).map_err(|e| Error::io(payload, e))?;
    write_sidecar(payload, sidecar)
}

pub fn load_array4(payload: &Path) -> Result<(Array4, Sidecar)> {
    let (sc, values) = read_f32(payload)?;
    let dims: [usize; 4] = match sc.dims.as_slice() {
        &[x, y, z, g] => [x, y, z, g],
        &[x, y, z] => [x, y, z, 1],
        d => return Err(Error::load(payload, format!("expected 4 dims, got {d:?}"))),
    };
    let arr = Array4::from_vec(dims, values.into_iter().map(f64::from).collect())?;
    Ok((arr, sc))
}

pub fn save_array4(payload: &Path, arr: &Array4, sidecar: &Sidecar) -> Result<()> {
    if sidecar.dims != arr.dims() {
        return Err(Error::Shape(format!(
            "sidecar dims {:?} vs array {:?}",
            sidecar.dims,
            arr.dims()
        )));
    }
    let values: Vec<f32> = arr.data().iter().map(|&v| v as f32).collect();
    write_f32(payload, sidecar, &values)
}

pub fn load_array3(payload: &Path) -> Result<(Array3, Sidecar)> {
    let (arr, sc) = load_array4(payload)?;
    let d = arr.dims();
    if d[3] != 1 {
        return Err(Error::load(payload, format!("expected a 3D map, got dims {d:?}")));
    }
    Ok((Array3::from_vec([d[0], d[1], d[2]], arr.into_data())?, sc))
}

/// Writes a scalar map with dims `[X, Y, Z, 1]`.
pub fn save_array3(payload: &Path, arr: &Array3, voxel_size: [f64; 3]) -> Result<()> {
    let d = arr.dims();
    let a4 = Array4::from_vec([d[0], d[1], d[2], 1], arr.data().to_vec())?;
    save_array4(
        payload,
        &a4,
        &Sidecar::new(vec![d[0], d[1], d[2], 1], DType::F32, voxel_size),
    )
}

pub fn load_mask(payload: &Path) -> Result<TissueMask> {
    let sc = read_sidecar(payload)?;
    let dims: [usize; 3] = match sc.dims.as_slice() {
        &[x, y, z] | &[x, y, z, 1] => [x, y, z],
        d => return Err(Error::load(payload, format!("mask dims {d:?}"))),
    };
    let bytes = read_payload(payload, &sc, DType::U8)?;
    TissueMask::new(dims, bytes).map_err(|e| Error::load(payload, e.to_string()))
}

pub fn save_mask(payload: &Path, mask: &TissueMask, voxel_size: [f64; 3]) -> Result<()> {
    fs::write(payload, mask.labels()).map_err(|e| Error::io(payload, e))?;
    write_sidecar(
        payload,
        &Sidecar::new(mask.dims().to_vec(), DType::U8, voxel_size),
    )
}

pub fn read_fsl_table(bval: &Path, bvec: &Path) -> Result<GradientTable> {
    let read = |p: &Path| -> Result<Vec<Vec<f64>>> {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| Error::load(p, format!("bad number {t:?}")))
                    })
                    .collect()
            })
            .collect()
    };
    let bvals = read(bval)?;
    if bvals.len() != 1 {
        return Err(Error::load(bval, format!("expected one row, found {}", bvals.len())));
    }
    let rows = read(bvec)?;
    if rows.len() != 3 || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::load(bvec, "expected three equal-length rows (x, y, z)"));
    }
    let bvecs = (0..rows[0].len())
        .map(|i| [rows[0][i], rows[1][i], rows[2][i]])
        .collect();
    GradientTable::new(bvals.into_iter().next().unwrap(), bvecs)
}

pub fn write_fsl_table(table: &GradientTable, bval: &Path, bvec: &Path) -> Result<()> {
    let join = |it: &mut dyn Iterator<Item = f64>| {
        let mut s = it.map(|v| format!("{v}")).collect::<Vec<_>>().join(" ");
        s.push('\n');
        s
    };
    let bv = join(&mut table.bvals().iter().copied());
    fs::write(bval, bv).map_err(|e| Error::io(bval, e))?;
    let mut text = String::new();
    for k in 0..3 {
        text.push_str(&join(&mut table.bvecs().iter().map(|v| v[k])));
    }
    fs::write(bvec, text).map_err(|e| Error::io(bvec, e))
}

/// Loads `payload` with its sibling `.bval` / `.bvec`.
pub fn load_volume(payload: &Path) -> Result<DwiVolume> {
    let table = read_fsl_table(&bval_path(payload), &bvec_path(payload))?;
    load_volume_with_table(payload, table)
}

pub fn load_volume_with_table(payload: &Path, table: GradientTable) -> Result<DwiVolume> {
    let (data, sc) = load_array4(payload)?;
    if sc.dims.len() != 4 {
        return Err(Error::load(payload, format!("expected [X,Y,Z,G], got {:?}", sc.dims)));
    }
    DwiVolume::new(data, sc.voxel_size_mm, table).map_err(|e| Error::load(payload, e.to_string()))
}

/// Writes payload, sidecar, `.bval` and `.bvec`.
pub fn save_volume(payload: &Path, vol: &DwiVolume) -> Result<()> {
    let sc = Sidecar::new(vol.data.dims().to_vec(), DType::F32, vol.voxel_size);
    save_array4(payload, &vol.data, &sc)?;
    write_fsl_table(&vol.table, &bval_path(payload), &bvec_path(payload))
}

/// Paired-scanner subject list; paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Scanner-1 (input) diffusion payload.
    pub source: String,
    /// Scanner-2 (target) diffusion payload.
    pub target: String,
    pub mask: String,
}

/// One subject scanned on both systems, already on a shared voxel grid.
#[derive(Debug, Clone)]
pub struct PairedSubject {
    pub id: String,
    pub source: DwiVolume,
    pub target: DwiVolume,
    pub mask: TissueMask,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::load(path, format!("bad manifest: {e}")))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn find(&self, id: &str) -> Option<&ManifestEntry> {
        self.subjects.iter().find(|s| s.id == id)
    }
}

impl ManifestEntry {
    pub fn load(&self, base: &Path) -> Result<PairedSubject> {
        let source = load_volume(&base.join(&self.source))?;
        let target = load_volume(&base.join(&self.target))?;
        let mask = load_mask(&base.join(&self.mask))?;
        if source.spatial_dims() != target.spatial_dims() {
            return Err(Error::Invalid(format!(
                "subject {}: source and target grids differ",
                self.id
            )));
        }
        mask.check_dims(source.spatial_dims())?;
        Ok(PairedSubject {
            id: self.id.clone(),
            source,
            target,
            mask,
        })
    }
}

pub fn load_subjects(manifest: &Path) -> Result<Vec<PairedSubject>> {
    let (m, base) = Manifest::load(manifest)?;
    m.subjects.iter().map(|e| e.load(&base)).collect()
}
