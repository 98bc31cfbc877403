//! Python module `conelattice`: configurations, cone graphs, path families
//! and the discrete forms built on them.

use conelattice::chaining::{build_path_family, verify_path_family, FamilyOptions, PathFamily as CorePathFamily};
use conelattice::configuration::{random_configuration, reference_cones as core_reference_cones, Configuration as CoreConfiguration};
use conelattice::forms::{
    chaining_constant as core_chaining_constant, comparability_ratio as core_comparability_ratio, cone_kernel,
    energy as core_energy, fractional_kernel, DiscreteKernel,
};
use conelattice::lattice_graph::{build_graph, connectivity_radius as core_connectivity_radius, LatticeBall};
use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use std::collections::HashMap;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Axis coordinates and apex angle.
type ConeTuple = (Vec<f64>, f64);

/// A cone configuration x -> Γ(x) on the lattice.
#[pyclass(module = "conelattice", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Configuration {
    inner: CoreConfiguration,
}

#[pymethods]
impl Configuration {
    /// Reproducible random configuration with aperture at least `theta_min`.
    #[staticmethod]
    fn random(dim: usize, theta_min: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: random_configuration(dim, theta_min, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfiguration::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn theta_min(&self) -> f64 {
        self.inner.theta_min()
    }

    /// Γ(x) as (axis, apex).
    fn cone_at(&self, x: Vec<i64>) -> PyResult<ConeTuple> {
        let c = self.inner.cone_at(&x).map_err(err)?;
        Ok((c.axis().coords().to_vec(), c.apex()))
    }

    fn __repr__(&self) -> String {
        format!("Configuration(dim={}, theta_min={})", self.inner.dim(), self.inner.theta_min())
    }
}

/// Reference cones of aperture theta/3 covering the sphere.
#[pyfunction]
fn reference_cones(dim: usize, theta: f64) -> PyResult<Vec<ConeTuple>> {
    let fam = core_reference_cones(dim, theta).map_err(err)?;
    Ok(fam.cones().iter().map(|c| (c.axis().coords().to_vec(), c.apex())).collect())
}

/// Directed edges of the cone graph restricted to a lattice ball.
#[pyfunction]
fn graph_edges(config: &Configuration, center: Vec<i64>, radius: f64) -> PyResult<Vec<(Vec<i64>, Vec<i64>)>> {
    let ball = LatticeBall::around(&center, radius).map_err(err)?;
    let g = build_graph(&config.inner, &ball).map_err(err)?;
    let pts = g.points();
    let mut out = Vec::with_capacity(g.edge_count());
    for (i, p) in pts.iter().enumerate() {
        for &j in g.out_neighbors(i) {
            out.push((p.clone(), pts[j as usize].clone()));
        }
    }
    Ok(out)
}

/// Smallest doubling R with B_r(x) ∩ Z^d connected inside B_R(x).
#[pyfunction]
fn connectivity_radius(config: &Configuration, x: Vec<i64>, r: f64, cap: f64) -> PyResult<f64> {
    core_connectivity_radius(&config.inner, &x, r, cap).map_err(err)
}

/// Multiscale path family on a lattice ball.
#[pyclass(module = "conelattice", frozen)]
struct PathFamily {
    inner: CorePathFamily,
}

#[pymethods]
impl PathFamily {
    #[new]
    #[pyo3(signature = (config, center, radius, r0, delta=None))]
    fn new(py: Python<'_>, config: &Configuration, center: Vec<i64>, radius: f64, r0: f64, delta: Option<i64>) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let fam = py
            .detach(move || build_path_family(&cfg, &center, radius, delta, r0, &FamilyOptions::default()))
            .map_err(err)?;
        Ok(Self { inner: fam })
    }

    #[getter]
    fn pairs(&self) -> u64 {
        self.inner.stats.pairs
    }

    /// Maximum number of edges on a path.
    #[getter(B)]
    fn b(&self) -> usize {
        self.inner.stats.b
    }

    /// Maximum number of paths through one edge.
    #[getter(M)]
    fn m(&self) -> u64 {
        self.inner.stats.m
    }

    /// Maximum edge length relative to the endpoint distance.
    #[getter(lambda_)]
    fn lambda(&self) -> f64 {
        self.inner.stats.lambda
    }

    #[getter]
    fn delta(&self) -> i64 {
        self.inner.delta
    }

    fn path(&self, x: Vec<i64>, y: Vec<i64>) -> PyResult<Vec<Vec<i64>>> {
        self.inner
            .path(&x, &y)
            .ok_or_else(|| PyKeyError::new_err(format!("no path stored for {x:?} -> {y:?}")))
    }

    /// Checks the four path-family properties; returns name -> passed.
    fn verify(&self) -> HashMap<&'static str, bool> {
        let r = verify_path_family(&self.inner);
        HashMap::from([
            ("endpoints", r.endpoints_ok),
            ("edge_count", r.edges_ok),
            ("usage", r.usage_ok),
            ("lengths", r.lengths_ok),
            ("in_graph", r.edges_in_graph),
        ])
    }

    /// The text export format.
    fn export(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.export(&mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(err)
    }
}

/// A symmetric lattice kernel ω(x, y).
#[pyclass(module = "conelattice", frozen)]
struct Kernel {
    inner: DiscreteKernel,
}

#[pymethods]
impl Kernel {
    /// |x - y|^{-d-α}.
    #[staticmethod]
    fn fractional(dim: usize, alpha: f64) -> PyResult<Self> {
        Ok(Self {
            inner: fractional_kernel(dim, alpha).map_err(err)?,
        })
    }

    /// Λ^{-1}(1_{Γ(x)}(y-x) + 1_{Γ(y)}(x-y))|x - y|^{-d-α}.
    #[staticmethod]
    #[pyo3(signature = (config, alpha, big_lambda=1.0))]
    fn cone(config: &Configuration, alpha: f64, big_lambda: f64) -> PyResult<Self> {
        Ok(Self {
            inner: cone_kernel(&config.inner, alpha, big_lambda).map_err(err)?,
        })
    }

    fn __call__(&self, x: Vec<i64>, y: Vec<i64>) -> PyResult<f64> {
        self.inner.eval(&x, &y).map_err(err)
    }
}

/// Energy Σ ω(x,y)(f(x)-f(y))² over ordered pairs in B(center, radius) farther than r0 apart.
#[pyfunction]
fn energy(f: Bound<'_, PyAny>, kernel: &Kernel, center: Vec<i64>, radius: f64, r0: f64) -> PyResult<f64> {
    let ball = LatticeBall::around(&center, radius).map_err(err)?;
    let mut values = HashMap::new();
    for p in ball.points() {
        let v: f64 = f.call1((p.clone(),))?.extract()?;
        values.insert(p, v);
    }
    let lookup = |x: &[i64]| values.get(x).copied();
    Ok(core_energy(&lookup, &ball, &kernel.inner, r0).map_err(err)?.value)
}

/// Lower estimate of sup_f E_frac,B_R(f) / E_ω,B_κR(f); returns (ratio, probe).
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (kernel, center, radius, kappa, r0, budget=200, seed=0))]
fn comparability_ratio(
    py: Python<'_>,
    kernel: &Kernel,
    center: Vec<i64>,
    radius: f64,
    kappa: f64,
    r0: f64,
    budget: usize,
    seed: u64,
) -> PyResult<(f64, String)> {
    let k = kernel.inner.clone();
    let est = py
        .detach(move || core_comparability_ratio(&k, &center, radius, kappa, r0, budget, seed))
        .map_err(err)?;
    Ok((est.ratio, est.source))
}

/// Constant c with c E_frac <= E_ω on B_κR, from the path family; returns (c, kappa).
#[pyfunction]
#[pyo3(signature = (family, kernel, functions=4, seed=0))]
fn chaining_constant(family: &PathFamily, kernel: &Kernel, functions: usize, seed: u64) -> PyResult<(f64, f64)> {
    let cc = core_chaining_constant(&family.inner, &kernel.inner, functions, seed).map_err(err)?;
    Ok((cc.c, cc.kappa))
}

#[pymodule(name = "conelattice")]
fn conelattice_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Configuration>()?;
    m.add_class::<PathFamily>()?;
    m.add_class::<Kernel>()?;
    m.add_function(wrap_pyfunction!(reference_cones, m)?)?;
    m.add_function(wrap_pyfunction!(graph_edges, m)?)?;
    m.add_function(wrap_pyfunction!(connectivity_radius, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(comparability_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(chaining_constant, m)?)?;
    Ok(())
}
