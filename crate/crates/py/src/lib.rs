//! Python bindings: site data, the federated and pooled estimators, the
//! simulation design and the study runner.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use fedtate_core::domain::{load_sites_csv as load_csv, OutcomeKind, SiteDataset, TreatmentArm};
use fedtate_core::ensemble::{Penalty, DEFAULT_LAMBDA_GRID};
use fedtate_core::error::Error;
use fedtate_core::federation::{run_federated, wire_size};
use fedtate_core::pipeline::{EnsembleFit, PipelineConfig, DEFAULT_SPLITS, DEFAULT_SPLIT_SEED};
use fedtate_core::pooled::run_pooled;
use fedtate_core::simulation::{self as sim, Density, DgpConfig, Estimator, Specification, StudyConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Csv { .. } | Error::InvalidDataset { .. } | Error::EmptyDataset(_) | Error::Dimension(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn outcome_kind(s: &str) -> PyResult<OutcomeKind> {
    match s {
        "continuous" => Ok(OutcomeKind::Continuous),
        "binary" => Ok(OutcomeKind::Binary),
        _ => Err(PyValueError::new_err(format!("outcome must be continuous or binary, got {s:?}"))),
    }
}

/// One site's patients: covariate rows, treatment indicators and outcomes.
#[pyclass(name = "SiteData", module = "fedtate", frozen, from_py_object)]
#[derive(Clone)]
struct PySiteData {
    inner: SiteDataset,
}

#[pymethods]
impl PySiteData {
    #[new]
    #[pyo3(signature = (site_id, x, a, y, outcome = "continuous"))]
    fn new(site_id: String, x: Vec<Vec<f64>>, a: Vec<u8>, y: Vec<f64>, outcome: &str) -> PyResult<Self> {
        let n = x.len();
        let p = x.first().map_or(0, Vec::len);
        if x.iter().any(|row| row.len() != p) {
            return Err(PyValueError::new_err("covariate rows differ in length"));
        }
        let covariates = DMatrix::from_fn(n, p, |i, j| x[i][j]);
        let inner = SiteDataset::new(site_id, covariates, a, y, outcome_kind(outcome)?).map_err(to_py)?;
        Ok(PySiteData { inner })
    }

    #[getter]
    fn site_id(&self) -> &str {
        &self.inner.site_id
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        let m = &self.inner.covariates;
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    }

    #[getter]
    fn a(&self) -> Vec<u8> {
        self.inner.treatment.clone()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.outcome.clone()
    }

    fn __repr__(&self) -> String {
        format!("SiteData(site_id={:?}, n={}, p={})", self.inner.site_id, self.inner.n(), self.inner.p())
    }
}

/// Sites of a `site_id,a,y,x1,...,xp` file, in order of first appearance.
#[pyfunction]
#[pyo3(signature = (path, outcome = "continuous"))]
fn load_sites_csv(path: &str, outcome: &str) -> PyResult<Vec<PySiteData>> {
    let sites = load_csv(path, outcome_kind(outcome)?).map_err(to_py)?;
    Ok(sites.into_iter().map(|inner| PySiteData { inner }).collect())
}

fn pipeline(kind: OutcomeKind, penalty: &str, lambda_grid: Option<Vec<f64>>, n_splits: usize, seed: u64) -> PyResult<PipelineConfig> {
    let mut cfg = PipelineConfig::for_kind(kind, parse::<Penalty>(penalty)?);
    if let Some(g) = lambda_grid {
        cfg.lambda_grid = g;
    }
    cfg.n_splits = n_splits;
    cfg.split_seed = seed;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn fit_dict<'py>(py: Python<'py>, fit: &EnsembleFit) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("target_site", &fit.target_site)?;
    d.set_item("estimate", fit.tate.value)?;
    d.set_item("se", fit.tate.se)?;
    d.set_item("ci", (fit.tate.ci95.0, fit.tate.ci95.1))?;
    let arms = PyDict::new(py);
    for arm in TreatmentArm::BOTH {
        let a = fit.arms.get(arm);
        let ad = PyDict::new(py);
        ad.set_item("estimate", a.estimate.value)?;
        ad.set_item("se", a.estimate.se)?;
        ad.set_item("lambda", a.estimate.weights.lambda)?;
        let w = PyDict::new(py);
        for (site, eta) in fit.weights_by_site(arm) {
            w.set_item(site, eta)?;
        }
        ad.set_item("weights", w)?;
        arms.set_item(arm.name(), ad)?;
    }
    d.set_item("arms", arms)?;
    let dropped = PyDict::new(py);
    for s in &fit.dropped {
        dropped.set_item(&s.site_id, &s.reason)?;
    }
    d.set_item("dropped", dropped)?;
    Ok(d)
}

fn datasets(sources: &[PySiteData]) -> Vec<SiteDataset> {
    sources.iter().map(|s| s.inner.clone()).collect()
}

/// Runs the one-round protocol and returns the estimate, per-arm weights
/// and the byte size of every message.
#[pyfunction]
#[pyo3(signature = (target, sources, penalty = "l1", lambda_grid = None, n_splits = DEFAULT_SPLITS, seed = DEFAULT_SPLIT_SEED))]
fn estimate<'py>(
    py: Python<'py>,
    target: &PySiteData,
    sources: Vec<PySiteData>,
    penalty: &str,
    lambda_grid: Option<Vec<f64>>,
    n_splits: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = pipeline(target.inner.outcome_kind, penalty, lambda_grid, n_splits, seed)?;
    let src = datasets(&sources);
    let run = py.detach(|| run_federated(&target.inner, &src, &cfg)).map_err(to_py)?;
    let d = fit_dict(py, &run.fit)?;
    let sizes = PyDict::new(py);
    sizes.set_item("broadcast", wire_size(&run.broadcast).map_err(to_py)?)?;
    sizes.set_item("target_summary", wire_size(&run.target_summary).map_err(to_py)?)?;
    for r in &run.replies {
        sizes.set_item(format!("reply:{}", r.site_id), wire_size(r).map_err(to_py)?)?;
    }
    d.set_item("message_bytes", sizes)?;
    Ok(d)
}

/// The same estimator computed with every site's data in one place.
#[pyfunction]
#[pyo3(signature = (target, sources, penalty = "l1", lambda_grid = None, n_splits = DEFAULT_SPLITS, seed = DEFAULT_SPLIT_SEED))]
fn estimate_pooled<'py>(
    py: Python<'py>,
    target: &PySiteData,
    sources: Vec<PySiteData>,
    penalty: &str,
    lambda_grid: Option<Vec<f64>>,
    n_splits: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = pipeline(target.inner.outcome_kind, penalty, lambda_grid, n_splits, seed)?;
    let src = datasets(&sources);
    let fit = py.detach(|| run_pooled(&target.inner, &src, &cfg)).map_err(to_py)?;
    fit_dict(py, &fit)
}

fn dgp(spec: &str, density: &str, k: usize, p: usize, seed: u64) -> PyResult<DgpConfig> {
    let cfg = DgpConfig::new(k, p, parse::<Density>(density)?, parse::<Specification>(spec)?, seed);
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Target and sources of one simulated replication.
#[pyfunction]
#[pyo3(signature = (spec = "I", density = "sparse", k = 10, p = 2, seed = 7, rep = 0))]
fn generate_study(spec: &str, density: &str, k: usize, p: usize, seed: u64, rep: u64) -> PyResult<(PySiteData, Vec<PySiteData>)> {
    let g = sim::generate_replication(&dgp(spec, density, k, p, seed)?, rep).map_err(to_py)?;
    Ok((
        PySiteData { inner: g.target },
        g.sources.into_iter().map(|inner| PySiteData { inner }).collect(),
    ))
}

/// Population TATE of the simulation design.
#[pyfunction]
#[pyo3(signature = (spec = "I", density = "sparse", k = 10, p = 2, seed = 7))]
fn true_tate(spec: &str, density: &str, k: usize, p: usize, seed: u64) -> PyResult<f64> {
    Ok(sim::true_tate(&dgp(spec, density, k, p, seed)?))
}

/// Bias, RMSE, coverage and CI length per estimator over `reps`
/// replications.
#[pyfunction]
#[pyo3(signature = (spec = "I", density = "sparse", k = 10, p = 2, reps = 200, seed = 7, estimators = None, lambda_grid = None, n_splits = DEFAULT_SPLITS, workers = None))]
#[allow(clippy::too_many_arguments)]
fn run_study<'py>(
    py: Python<'py>,
    spec: &str,
    density: &str,
    k: usize,
    p: usize,
    reps: usize,
    seed: u64,
    estimators: Option<Vec<String>>,
    lambda_grid: Option<Vec<f64>>,
    n_splits: usize,
    workers: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut study = StudyConfig::new(dgp(spec, density, k, p, seed)?, reps);
    if let Some(names) = estimators {
        study.estimators = names.iter().map(|s| parse::<Estimator>(s)).collect::<PyResult<_>>()?;
    }
    study.lambda_grid = lambda_grid.unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
    study.n_splits = n_splits;
    study.workers = workers;
    let result = py.detach(|| sim::run_study(&study)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("truth", result.truth)?;
    let rows = PyList::empty(py);
    for m in &result.metrics {
        let r = PyDict::new(py);
        r.set_item("estimator", &m.estimator)?;
        r.set_item("bias", m.bias)?;
        r.set_item("rmse", m.rmse)?;
        r.set_item("coverage", m.coverage)?;
        r.set_item("ci_length", m.ci_length)?;
        r.set_item("n_fail", m.n_fail)?;
        rows.append(r)?;
    }
    d.set_item("metrics", rows)?;
    Ok(d)
}

#[pymodule]
fn fedtate(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySiteData>()?;
    m.add_function(wrap_pyfunction!(load_sites_csv, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_pooled, m)?)?;
    m.add_function(wrap_pyfunction!(generate_study, m)?)?;
    m.add_function(wrap_pyfunction!(true_tate, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
