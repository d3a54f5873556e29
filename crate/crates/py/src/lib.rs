//! Python bindings: meshes, sparse grids, the KL decomposition and the
//! reference example runs. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use stochident_core::config::ConfigFile;
use stochident_core::experiments::{make_example, run_example as run_reference, OutputPlan};
use stochident_core::kl::{KlModel, SampleData};
use stochident_core::{mesh, sparse_grid};

fn to_py(e: stochident_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Simplicial mesh of the unit interval or the unit square.
#[pyclass(name = "Mesh")]
struct PyMesh {
    inner: mesh::Mesh,
}

#[pymethods]
impl PyMesh {
    #[staticmethod]
    fn interval(cells: usize) -> PyResult<Self> {
        Ok(Self {
            inner: mesh::build_interval_mesh(cells).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn unit_square(per_side: usize) -> PyResult<Self> {
        Ok(Self {
            inner: mesh::build_unit_square_mesh(per_side).map_err(to_py)?,
        })
    }

    /// Uniform refinement that halves every edge.
    fn refine(&self) -> Self {
        Self {
            inner: mesh::refine_uniform(&self.inner),
        }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_vertices(&self) -> usize {
        self.inner.n_vertices()
    }

    #[getter]
    fn n_elements(&self) -> usize {
        self.inner.n_elements()
    }

    fn vertices(&self) -> Vec<Vec<f64>> {
        self.inner.vertices().to_vec()
    }

    fn elements(&self) -> Vec<Vec<usize>> {
        self.inner.elements().iter().map(|e| e.to_vec()).collect()
    }

    fn boundary_vertices(&self) -> Vec<usize> {
        self.inner.boundary_vertices().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mesh(dim={}, vertices={}, elements={})",
            self.inner.dim(),
            self.inner.n_vertices(),
            self.inner.n_elements()
        )
    }
}

/// Hierarchical piecewise linear sparse grid on the unit cube.
#[pyclass(name = "SparseGrid")]
struct PySparseGrid {
    inner: sparse_grid::SparseGrid,
}

#[pymethods]
impl PySparseGrid {
    #[new]
    fn new(dim: usize, level: u32) -> PyResult<Self> {
        Ok(Self {
            inner: sparse_grid::build_sparse_grid(dim, level).map_err(to_py)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn level(&self) -> u32 {
        self.inner.level()
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    /// Node coordinates in grid order.
    fn nodes(&self) -> Vec<Vec<f64>> {
        self.inner.nodes().iter().map(|n| n.coords.clone()).collect()
    }

    /// Surpluses from nodal values; one row per field, one column per node.
    fn hierarchize(&self, values: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.hierarchize(&matrix(values)?).map_err(to_py)?))
    }

    fn dehierarchize(&self, surpluses: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.dehierarchize(&matrix(surpluses)?).map_err(to_py)?))
    }

    /// Value of the interpolant with the given surpluses at `y`.
    fn interpolate(&self, surpluses: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        self.inner.interpolate(&surpluses, &y).map_err(to_py)
    }
}

/// Generalized eigenpairs of `cov · gram`, eigenvalues descending and
/// eigenvectors as columns.
#[pyfunction]
fn kl_decompose(cov: Vec<Vec<f64>>, gram: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let eig = stochident_core::kl::kl_decompose(&matrix(cov)?, &matrix(gram)?).map_err(to_py)?;
    Ok((eig.values, rows(&eig.vectors)))
}

/// Truncated KL model of a sample matrix (one column per sample).
#[pyfunction]
#[pyo3(signature = (samples, gram, tol=1e-7, max_rank=None))]
fn kl_fit<'py>(
    py: Python<'py>,
    samples: Vec<Vec<f64>>,
    gram: Vec<Vec<f64>>,
    tol: f64,
    max_rank: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let data = SampleData::new(matrix(samples)?);
    let model = KlModel::fit(&data, &matrix(gram)?, tol, max_rank).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("rank", model.rank)?;
    out.set_item("eigenvalues", model.eigenvalues.clone())?;
    out.set_item("mean", model.mean.clone())?;
    out.set_item("y_samples", model.y_samples.clone())?;
    Ok(out)
}

/// Resolved configuration of a reference example as JSON.
#[pyfunction]
#[pyo3(signature = (id, seed=7))]
fn example_config(id: u8, seed: u64) -> PyResult<String> {
    let spec = make_example(id).map_err(to_py)?;
    ConfigFile::from_spec(&spec, seed).to_json().map_err(to_py)
}

/// Runs a reference example and returns one summary per regularization
/// weight.
#[pyfunction]
#[pyo3(signature = (id, seed=7, out=None, beta=None, level=None, n_mc=None))]
fn run_example<'py>(
    py: Python<'py>,
    id: u8,
    seed: u64,
    out: Option<PathBuf>,
    beta: Option<f64>,
    level: Option<u32>,
    n_mc: Option<usize>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let overrides = ConfigFile {
        beta,
        level,
        n_mc,
        ..ConfigFile::default()
    };
    overrides.validate().map_err(to_py)?;
    let spec = overrides.apply(make_example(id).map_err(to_py)?).map_err(to_py)?;
    let provenance =
        serde_json::to_value(ConfigFile::from_spec(&spec, seed)).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let outcome = py
        .detach(|| {
            run_reference(
                &spec,
                seed,
                &OutputPlan {
                    dir: out.as_deref(),
                    provenance,
                },
            )
        })
        .map_err(to_py)?;
    outcome
        .variants
        .iter()
        .map(|(s, _)| {
            let d = PyDict::new(py);
            d.set_item("beta", s.beta)?;
            d.set_item("converged", s.converged)?;
            d.set_item("iterations", s.iterations)?;
            d.set_item("final_l2_error", s.final_l2_error)?;
            d.set_item("mean_field_error", s.mean_field_error)?;
            d.set_item("mean_h1_seminorm", s.mean_h1_seminorm)?;
            d.set_item("final_constraint_norm", s.final_constraint_norm)?;
            d.set_item("seconds", s.seconds)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn stochident(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_class::<PySparseGrid>()?;
    m.add_function(wrap_pyfunction!(kl_decompose, m)?)?;
    m.add_function(wrap_pyfunction!(kl_fit, m)?)?;
    m.add_function(wrap_pyfunction!(example_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_example, m)?)?;
    Ok(())
}
