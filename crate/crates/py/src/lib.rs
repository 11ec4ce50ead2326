//! Python bindings: model configuration, simulation, the Ulam operator,
//! the grid filter and the extreme-value experiments.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use heterodyn::evt::{self, EnsembleSetup};
use heterodyn::filter;
use heterodyn::grid::Grid;
use heterodyn::{operator, stats, Error, Interval, PsiKind, SeededStream, StateFn};

create_exception!(heterodyn, HeterodynError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig(_) | Error::Parse { .. } | Error::InvalidArgument(_) | Error::Domain { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => HeterodynError::new_err(other.to_string()),
    }
}

fn psi_kind(name: &str) -> PyResult<PsiKind> {
    match name {
        "uniform" => Ok(PsiKind::Uniform),
        "truncnormal" => Ok(PsiKind::TruncNormal),
        other => Err(PyValueError::new_err(format!("unknown psi kind `{other}`"))),
    }
}

#[pyclass(name = "ModelConfig", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: heterodyn::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[staticmethod]
    fn reference() -> Self {
        PyModelConfig {
            inner: heterodyn::ModelConfig::reference(),
        }
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        let inner = heterodyn::ModelConfig::from_file(&path).map_err(to_py)?;
        Ok(PyModelConfig { inner })
    }

    #[staticmethod]
    fn from_string(text: &str) -> PyResult<Self> {
        let inner = heterodyn::ModelConfig::from_config_str(text).map_err(to_py)?;
        Ok(PyModelConfig { inner })
    }

    #[pyo3(name = "to_string")]
    fn to_text(&self) -> String {
        self.inner.to_config_string()
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash_hex()
    }

    /// Constant observation modulation `s` with noise of width `epsilon`.
    #[pyo3(signature = (s, epsilon, psi = "uniform"))]
    fn with_constant_observation(&self, s: f64, epsilon: f64, psi: &str) -> PyResult<Self> {
        let inner = self
            .inner
            .with_observation(StateFn::Const(s), psi_kind(psi)?, epsilon)
            .map_err(to_py)?;
        Ok(PyModelConfig { inner })
    }

    /// Affine modulation `s(x) = intercept + slope·x`.
    #[pyo3(signature = (intercept, slope, epsilon, psi = "uniform"))]
    fn with_affine_observation(&self, intercept: f64, slope: f64, epsilon: f64, psi: &str) -> PyResult<Self> {
        let inner = self
            .inner
            .with_observation(StateFn::Affine { intercept, slope }, psi_kind(psi)?, epsilon)
            .map_err(to_py)?;
        Ok(PyModelConfig { inner })
    }

    /// `(name, passed, detail)` for each model check.
    fn validate(&self) -> Vec<(String, bool, String)> {
        heterodyn::validate_config(&self.inner)
            .checks
            .into_iter()
            .map(|c| (c.name.to_string(), c.passed, c.detail))
            .collect()
    }

    fn t(&self, x: f64) -> PyResult<f64> {
        self.inner.t(x).map_err(to_py)
    }

    fn sigma(&self, x: f64) -> f64 {
        self.inner.sigma(x)
    }

    fn s(&self, x: f64) -> f64 {
        self.inner.s(x)
    }

    fn kernel(&self, x: f64, y: f64) -> PyResult<f64> {
        heterodyn::eval_kernel_p(x, y, &self.inner).map_err(to_py)
    }

    fn likelihood(&self, z: f64, x: f64) -> PyResult<f64> {
        heterodyn::eval_likelihood(z, x, &self.inner).map_err(to_py)
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.geometry.gamma
    }

    #[getter]
    fn critical_point(&self) -> f64 {
        self.inner.geometry.critical_point
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig(hash={})", self.inner.config_hash_hex())
    }
}

#[pyclass(name = "GridDensity", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGridDensity {
    inner: heterodyn::GridDensity,
}

#[pymethods]
impl PyGridDensity {
    /// Density with the given cell values on `n` equal cells of `[lo, hi]`.
    #[new]
    fn new(lo: f64, hi: f64, weights: Vec<f64>) -> PyResult<Self> {
        let grid = Grid::new(Interval::new(lo, hi), weights.len()).map_err(to_py)?;
        let inner = heterodyn::GridDensity::new(grid, weights).map_err(to_py)?;
        Ok(PyGridDensity { inner })
    }

    #[staticmethod]
    fn uniform(lo: f64, hi: f64, n_cells: usize) -> PyResult<Self> {
        let grid = Grid::new(Interval::new(lo, hi), n_cells).map_err(to_py)?;
        Ok(PyGridDensity {
            inner: heterodyn::GridDensity::uniform(grid),
        })
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    #[getter]
    fn n_cells(&self) -> usize {
        self.inner.grid.n_cells
    }

    #[getter]
    fn bounds(&self) -> (f64, f64) {
        (self.inner.grid.interval.lo, self.inner.grid.interval.hi)
    }

    fn centers(&self) -> Vec<f64> {
        self.inner.grid.centers()
    }

    fn mass(&self) -> f64 {
        self.inner.mass()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn l1_distance(&self, other: &PyGridDensity) -> PyResult<f64> {
        self.inner.l1_distance(&other.inner).map_err(to_py)
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv("")
    }
}

#[pyclass(name = "Trajectory", frozen)]
struct PyTrajectory {
    inner: heterodyn::Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.x.clone()
    }

    #[getter]
    fn z(&self) -> Vec<f64> {
        self.inner.z.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

#[pyclass(name = "KernelMatrix", frozen)]
struct PyKernelMatrix {
    inner: heterodyn::KernelMatrix,
}

#[pymethods]
impl PyKernelMatrix {
    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn entry(&self, i: usize, j: usize) -> PyResult<f64> {
        let n = self.inner.n();
        if i >= n || j >= n {
            return Err(PyValueError::new_err(format!("index ({i}, {j}) outside {n} cells")));
        }
        Ok(self.inner.plain_entry(i, j))
    }

    /// Stationary density and the modulus of the second eigenvalue.
    fn stationary(&self) -> PyResult<(PyGridDensity, f64)> {
        let rep = operator::stationary_density(&self.inner).map_err(to_py)?;
        Ok((PyGridDensity { inner: rep.leading_density }, rep.second_modulus))
    }
}

/// Sequential grid filter.
#[pyclass(name = "Filter")]
struct PyFilter {
    config: heterodyn::ModelConfig,
    kernel: heterodyn::KernelMatrix,
    state: Option<filter::FilterState>,
    prior: heterodyn::GridDensity,
}

#[pymethods]
impl PyFilter {
    #[new]
    fn new(config: &PyModelConfig, kernel: &PyKernelMatrix, prior: &PyGridDensity) -> Self {
        PyFilter {
            config: config.inner.clone(),
            kernel: kernel.inner.clone(),
            state: None,
            prior: prior.inner.clone(),
        }
    }

    /// Condition on the next observation; the first one initializes.
    fn update(&mut self, z: f64) -> PyResult<()> {
        let next = match &self.state {
            None => filter::initialize(&self.prior, z, &self.config),
            Some(s) => filter::update(s, z, &self.kernel, &self.config),
        }
        .map_err(to_py)?;
        self.state = Some(next);
        Ok(())
    }

    #[getter]
    fn density(&self) -> PyGridDensity {
        PyGridDensity {
            inner: self.state.as_ref().map_or_else(|| self.prior.clone(), |s| s.density.clone()),
        }
    }

    #[getter]
    fn step(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.step)
    }
}

#[pyfunction]
#[pyo3(signature = (config, n, seed = 0, stream = 0, x0 = None))]
fn simulate(config: &PyModelConfig, n: usize, seed: u64, stream: u64, x0: Option<f64>) -> PyResult<PyTrajectory> {
    let start = x0.map_or(heterodyn::InitialState::BurnIn, heterodyn::InitialState::Point);
    let inner = heterodyn::simulate(&config.inner, n, &start, SeededStream::new(seed, stream)).map_err(to_py)?;
    Ok(PyTrajectory { inner })
}

#[pyfunction]
fn build_ulam(config: &PyModelConfig, n_cells: usize) -> PyResult<PyKernelMatrix> {
    let inner = heterodyn::build_ulam(&config.inner, n_cells).map_err(to_py)?;
    Ok(PyKernelMatrix { inner })
}

#[pyfunction]
fn hilbert_distance(f: &PyGridDensity, g: &PyGridDensity) -> PyResult<f64> {
    filter::hilbert_distance(&f.inner, &g.inner).map_err(to_py)
}

#[pyfunction]
fn kantorovich(f: &PyGridDensity, g: &PyGridDensity) -> PyResult<f64> {
    stats::kantorovich(&f.inner, &g.inner).map_err(to_py)
}

#[pyfunction]
fn check_main_assumption<'py>(py: Python<'py>, config: &PyModelConfig, z0: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = filter::check_main_assumption(&config.inner, z0).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("pass", r.pass())?;
    d.set_item("condition_a", r.condition_a)?;
    d.set_item("condition_b", r.condition_b)?;
    d.set_item("global_condition", r.global_condition)?;
    d.set_item("c", r.c)?;
    d.set_item("lambda", r.lambda)?;
    d.set_item("kernel_min", r.kernel_min)?;
    d.set_item("kernel_max", r.kernel_max)?;
    d.set_item("j_z0", r.j_z0.map(|j| (j.lo, j.hi)))?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (config, kernel, prior_a, prior_b, n, seed = 0))]
fn stability_experiment<'py>(
    py: Python<'py>,
    config: &PyModelConfig,
    kernel: &PyKernelMatrix,
    prior_a: &PyGridDensity,
    prior_b: &PyGridDensity,
    n: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let rep = filter::stability_experiment(
        &config.inner,
        &kernel.inner,
        (&prior_a.inner, &prior_b.inner),
        n,
        SeededStream::new(seed, 0),
    )
    .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("theta0", rep.rows.iter().map(|r| r.theta0).collect::<Vec<_>>())?;
    d.set_item("tv", rep.rows.iter().map(|r| r.tv).collect::<Vec<_>>())?;
    d.set_item("events", rep.certificate.event_count)?;
    d.set_item("lambda", rep.certificate.lambda)?;
    Ok(d)
}

#[pyfunction]
fn gev_fit<'py>(py: Python<'py>, maxima: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let fit = evt::gev_fit(&maxima).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("xi", fit.xi)?;
    d.set_item("kappa", fit.kappa)?;
    d.set_item("sigma", fit.sigma)?;
    d.set_item("neg_log_likelihood", fit.neg_log_likelihood)?;
    d.set_item("ci_95", fit.ci_95.to_vec())?;
    Ok(d)
}

#[pyfunction]
fn block_maxima(series: Vec<f64>, m: usize) -> PyResult<Vec<f64>> {
    Ok(evt::block_maxima(&series, m).map_err(to_py)?.0)
}

#[pyfunction]
#[pyo3(signature = (config, taus, t, replicas, seed = 0, n_cells = 512, center = None))]
#[allow(clippy::too_many_arguments)]
fn gumbel_check<'py>(
    py: Python<'py>,
    config: &PyModelConfig,
    taus: Vec<f64>,
    t: usize,
    replicas: usize,
    seed: u64,
    n_cells: usize,
    center: Option<f64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let setup = EnsembleSetup {
        center,
        n_cells,
        ..EnsembleSetup::default()
    };
    let rep = evt::gumbel_check(&config.inner, &taus, t, replicas, SeededStream::new(seed, 0), setup).map_err(to_py)?;
    rep.rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("tau", r.tau)?;
            d.set_item("u_t", r.u_t)?;
            d.set_item("w_hat", r.w_hat)?;
            d.set_item("ci", (r.ci_lo, r.ci_hi))?;
            d.set_item("e_minus_tau", r.e_minus_tau)?;
            d.set_item("beta_spectral", r.beta_spectral)?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
#[pyo3(signature = (config, center, t, m_list, seed = 0, n_cells = 512))]
fn modulation_detect<'py>(
    py: Python<'py>,
    config: &PyModelConfig,
    center: f64,
    t: usize,
    m_list: Vec<usize>,
    seed: u64,
    n_cells: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rep = evt::modulation_detect(&config.inner, center, t, &m_list, SeededStream::new(seed, 0), n_cells)
        .map_err(to_py)?;
    rep.rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("K", r.k)?;
            d.set_item("kappa_hat", r.kappa_hat)?;
            d.set_item("sigma_hat", r.sigma_hat)?;
            d.set_item("xi_hat", r.xi_hat)?;
            d.set_item("excess", r.excess())?;
            d.set_item("target_integral", r.target_integral)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn heterodyn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HeterodynError", m.py().get_type::<HeterodynError>())?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyGridDensity>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyKernelMatrix>()?;
    m.add_class::<PyFilter>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(build_ulam, m)?)?;
    m.add_function(wrap_pyfunction!(hilbert_distance, m)?)?;
    m.add_function(wrap_pyfunction!(kantorovich, m)?)?;
    m.add_function(wrap_pyfunction!(check_main_assumption, m)?)?;
    m.add_function(wrap_pyfunction!(stability_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(gev_fit, m)?)?;
    m.add_function(wrap_pyfunction!(block_maxima, m)?)?;
    m.add_function(wrap_pyfunction!(gumbel_check, m)?)?;
    m.add_function(wrap_pyfunction!(modulation_detect, m)?)?;
    Ok(())
}
