//! Python bindings for the harmonization core.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use shresnet_core::dti;
use shresnet_core::error::ErrorClass;
use shresnet_core::evaluation;
use shresnet_core::harmonize::{harmonize_volume, HarmonizeOptions};
use shresnet_core::io;
use shresnet_core::model::{ModelKind, NetworkParams, NetworkSpec};
use shresnet_core::phantom::{write_phantom, PhantomConfig};
use shresnet_core::rish;
use shresnet_core::sh::{self, ShBasisSpec, ShCoefficients};
use shresnet_core::Error;

fn to_py(e: Error) -> PyErr {
    match e.class() {
        ErrorClass::Data => PyValueError::new_err(e.to_string()),
        ErrorClass::Numerical => PyArithmeticError::new_err(e.to_string()),
    }
}

fn coeffs(order: usize, values: Vec<f64>) -> PyResult<ShCoefficients> {
    ShCoefficients::new(order, values).map_err(to_py)
}

/// Number of coefficients of the even-order basis up to `order`.
#[pyfunction]
fn n_coef(order: usize) -> usize {
    sh::n_coef(order)
}

/// Regularized least-squares SH fit of one voxel's signal.
#[pyfunction]
#[pyo3(signature = (signal, dirs, order=4, lam=0.006))]
fn fit_sh(signal: Vec<f64>, dirs: Vec<[f64; 3]>, order: usize, lam: f64) -> PyResult<Vec<f64>> {
    let spec = ShBasisSpec::new(order, lam).map_err(to_py)?;
    Ok(sh::fit_sh(&signal, &dirs, &spec).map_err(to_py)?.values)
}

#[pyfunction]
#[pyo3(signature = (coefficients, dirs, order=4))]
fn reconstruct(coefficients: Vec<f64>, dirs: Vec<[f64; 3]>, order: usize) -> PyResult<Vec<f64>> {
    sh::reconstruct(&coeffs(order, coefficients)?, &dirs).map_err(to_py)
}

/// Per-order energies, one per even order.
#[pyfunction]
#[pyo3(signature = (coefficients, order=4))]
fn rish_features(coefficients: Vec<f64>, order: usize) -> PyResult<Vec<f64>> {
    Ok(rish::rish_features(&coeffs(order, coefficients)?).values)
}

/// Returns `(projected coefficients, degenerate order count)`.
#[pyfunction]
#[pyo3(signature = (input, harmonized, order=4))]
fn rish_project(input: Vec<f64>, harmonized: Vec<f64>, order: usize) -> PyResult<(Vec<f64>, usize)> {
    let p = rish::rish_project(&coeffs(order, input)?, &coeffs(order, harmonized)?).map_err(to_py)?;
    Ok((p.coeffs.values, p.degenerate_orders))
}

/// Log-linear tensor fit; returns `(xx, yy, zz, xy, xz, yz)`.
#[pyfunction]
fn fit_tensor(attenuations: Vec<f64>, bvals: Vec<f64>, dirs: Vec<[f64; 3]>) -> PyResult<[f64; 6]> {
    Ok(dti::fit_tensor(&attenuations, &bvals, &dirs).map_err(to_py)?.elements)
}

#[pyfunction]
fn fa(tensor: [f64; 6]) -> f64 {
    dti::fa(&dti::DiffusionTensor { elements: tensor })
}

#[pyfunction]
fn md(tensor: [f64; 6]) -> f64 {
    dti::md(&dti::DiffusionTensor { elements: tensor })
}

#[pyfunction]
fn nmse(y: Vec<f64>, y_hat: Vec<f64>) -> PyResult<f64> {
    evaluation::nmse(&y, &y_hat).map_err(to_py)
}

/// Two-sided paired signed-rank test.
#[pyfunction]
fn wilcoxon<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let r = evaluation::wilcoxon_signed_rank(&a, &b).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("statistic", r.statistic)?;
    d.set_item("p_value", r.p_value)?;
    d.set_item("n", r.n)?;
    d.set_item("exact", r.exact)?;
    d.set_item("degenerate", r.degenerate)?;
    d.set_item("stars", evaluation::stars(r.p_value))?;
    Ok(d)
}

/// Writes paired phantom subjects and a manifest; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, n_subjects=None, seed=None, config_json=None))]
fn generate_phantom(
    out: PathBuf,
    n_subjects: Option<usize>,
    seed: Option<u64>,
    config_json: Option<&str>,
) -> PyResult<PathBuf> {
    let mut cfg: PhantomConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => PhantomConfig::default(),
    };
    if let Some(n) = n_subjects {
        cfg.n_subjects = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    write_phantom(&cfg, &out).map_err(to_py)?;
    Ok(out.join("manifest.json"))
}

/// Harmonizes a stored volume with a checkpoint and writes the result; returns
/// the number of (voxel, order) blocks that could not be projected.
#[pyfunction]
#[pyo3(signature = (checkpoint, dwi, mask, out, order=4, lam=0.006))]
fn harmonize(checkpoint: PathBuf, dwi: PathBuf, mask: PathBuf, out: PathBuf, order: usize, lam: f64) -> PyResult<usize> {
    let model = NetworkParams::load(&checkpoint).map_err(to_py)?;
    let vol = io::load_volume(&dwi).map_err(to_py)?;
    let mask = io::load_mask(&mask).map_err(to_py)?;
    let opts = HarmonizeOptions {
        sh: ShBasisSpec::new(order, lam).map_err(to_py)?,
        skip_projection: false,
    };
    let h = harmonize_volume(&model, &vol, &mask, &vol.table, &opts).map_err(to_py)?;
    io::save_volume(&out, &h.volume).map_err(to_py)?;
    Ok(h.degenerate_orders)
}

/// Network weights with their architecture.
#[pyclass(name = "Model")]
struct PyModel {
    inner: NetworkParams,
}

#[pymethods]
impl PyModel {
    /// `kind` is `"shresnet"` or `"golkov"`; `hidden` is the functional-unit
    /// width for the former and the MLP width for the latter.
    #[staticmethod]
    #[pyo3(signature = (kind="shresnet", resblocks=2, hidden=32, order=4, seed=0))]
    fn build(kind: &str, resblocks: usize, hidden: usize, order: usize, seed: u64) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().map_err(to_py)?;
        let mut spec = match kind {
            ModelKind::Shresnet => NetworkSpec::shresnet(resblocks, hidden),
            ModelKind::Golkov => NetworkSpec::golkov(hidden),
        };
        spec.sh_order = order;
        Ok(Self {
            inner: NetworkParams::build(spec, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: NetworkParams::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.spec.model_kind.name()
    }

    /// Maps `n` flattened coefficient patches to `n` predicted coefficient rows.
    fn predict(&self, patches: Vec<f64>, n: usize) -> PyResult<Vec<f64>> {
        self.inner.predict(&patches, n).map_err(to_py)
    }
}

#[pymodule]
fn shresnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(n_coef, m)?)?;
    m.add_function(wrap_pyfunction!(fit_sh, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(rish_features, m)?)?;
    m.add_function(wrap_pyfunction!(rish_project, m)?)?;
    m.add_function(wrap_pyfunction!(fit_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(fa, m)?)?;
    m.add_function(wrap_pyfunction!(md, m)?)?;
    m.add_function(wrap_pyfunction!(nmse, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(harmonize, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
