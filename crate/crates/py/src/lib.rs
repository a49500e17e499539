//! Python bindings: coefficient tables, quadrature rules, single solves and
//! whole convergence studies.

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use multistep_fbsde::bench::{self, RunSpec};
use multistep_fbsde::problems::{registry_get, PROBLEM_NAMES};
use multistep_fbsde::solver::{self, SolverConfig, TerminalMode};
use multistep_fbsde::{multistep, quadrature, Error};

create_exception!(fbsde, DivergenceError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    if e.is_divergence() {
        return DivergenceError::new_err(e.to_string());
    }
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        Error::WindowSizing { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Solver settings for one `(k, N)` run.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: SolverConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (k, n_steps, gh_points=8, degree=None, spacing=None, eps0=1e-11, terminal="exact", threads=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        k: usize,
        n_steps: usize,
        gh_points: usize,
        degree: Option<usize>,
        spacing: Option<f64>,
        eps0: f64,
        terminal: &str,
        threads: Option<usize>,
    ) -> PyResult<Self> {
        let mut inner = SolverConfig::new(k, n_steps);
        inner.gh_points = gh_points;
        inner.degree = degree;
        inner.spacing = spacing;
        inner.eps0 = eps0;
        inner.terminal = terminal.parse::<TerminalMode>().map_err(to_py)?;
        inner.threads = threads;
        inner.validate().map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.inner.n_steps
    }

    #[getter]
    fn gh_points(&self) -> usize {
        self.inner.gh_points
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Outcome of a single solve at the problem's initial point.
#[pyclass(name = "SolveResult", frozen)]
struct PySolveResult {
    #[pyo3(get)]
    y0: Vec<f64>,
    #[pyo3(get)]
    z0: Vec<f64>,
    #[pyo3(get)]
    err_y: Option<Vec<f64>>,
    #[pyo3(get)]
    err_z: Option<Vec<f64>>,
    #[pyo3(get)]
    runtime_s: f64,
    #[pyo3(get)]
    picard_max: usize,
    #[pyo3(get)]
    h: f64,
    #[pyo3(get)]
    r: usize,
}

#[pymethods]
impl PySolveResult {
    fn __repr__(&self) -> String {
        let opt = |v: &Option<Vec<f64>>| v.as_ref().map_or("None".to_string(), |v| format!("{v:?}"));
        format!(
            "SolveResult(y0={:?}, err_y={}, err_z={}, picard_max={})",
            self.y0,
            opt(&self.err_y),
            opt(&self.err_z),
            self.picard_max
        )
    }
}

/// Solves a registered problem; `x0` overrides its initial point.
#[pyfunction]
#[pyo3(signature = (problem, config, x0=None))]
fn solve(py: Python<'_>, problem: &str, config: &PyConfig, x0: Option<Vec<f64>>) -> PyResult<PySolveResult> {
    let mut p = registry_get(problem).map_err(to_py)?;
    if let Some(x0) = x0 {
        if x0.len() != p.q {
            return Err(PyValueError::new_err(format!(
                "x0 has {} entries, problem has dimension {}",
                x0.len(),
                p.q
            )));
        }
        p = p.with_x0(x0);
    }
    let cfg = config.inner.clone();
    let r = py.detach(move || solver::solve(&p, &cfg)).map_err(to_py)?;
    Ok(PySolveResult {
        y0: r.y0,
        z0: r.z0,
        err_y: r.err_y,
        err_z: r.err_z,
        runtime_s: r.runtime_s,
        picard_max: r.picard.max,
        h: r.h,
        r: r.r,
    })
}

/// Scaled multistep weights `alpha_{k,i} dt` as `(numerator, denominator)` pairs.
#[pyfunction]
fn multistep_coeffs(k: usize) -> PyResult<Vec<(i64, i64)>> {
    let c = multistep::compute_coeffs(k).map_err(to_py)?;
    c.scaled_alphas()
        .iter()
        .map(|a| {
            let n = i64::try_from(*a.numer());
            let d = i64::try_from(*a.denom());
            n.and_then(|n| d.map(|d| (n, d)))
                .map_err(|_| PyValueError::new_err("coefficient does not fit in 64 bits"))
        })
        .collect()
}

/// `(largest nontrivial root modulus, root condition holds)`.
#[pyfunction]
fn stability(k: usize) -> PyResult<(f64, bool)> {
    let c = multistep::compute_coeffs(k).map_err(to_py)?;
    let r = multistep::stability_report(&c);
    Ok((r.max_abs_nontrivial, r.stable))
}

/// Gauss–Hermite nodes and weights for the weight `exp(-x^2)`.
#[pyfunction]
fn gauss_hermite(points: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let rule = quadrature::hermite_rule(points).map_err(to_py)?;
    Ok((rule.nodes().to_vec(), rule.weights().to_vec()))
}

#[pyfunction]
fn problem_names() -> Vec<&'static str> {
    PROBLEM_NAMES.to_vec()
}

/// Least-squares slope of `log(err)` against `log(1/N)`.
#[pyfunction]
fn fit_rate(points: Vec<(usize, f64)>) -> PyResult<f64> {
    bench::fit_rate(&points).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs a convergence study and returns the rendered table.
#[pyfunction]
#[pyo3(signature = (problem, ks, ns, gh_points=None, degree=None, terminal=None, format="csv"))]
#[allow(clippy::too_many_arguments)]
fn run_study(
    py: Python<'_>,
    problem: &str,
    ks: Vec<usize>,
    ns: Vec<usize>,
    gh_points: Option<usize>,
    degree: Option<usize>,
    terminal: Option<&str>,
    format: &str,
) -> PyResult<String> {
    let mut spec = RunSpec::new(problem, ks, ns);
    spec.gh_points = gh_points;
    spec.degree = degree;
    spec.terminal = terminal.map(str::parse).transpose().map_err(to_py)?;
    spec.format = format.parse().map_err(to_py)?;
    let fmt = spec.format;
    let report = py.detach(move || bench::run(&spec)).map_err(to_py)?;
    Ok(bench::render(&report, fmt))
}

#[pymodule]
fn fbsde(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySolveResult>()?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(multistep_coeffs, m)?)?;
    m.add_function(wrap_pyfunction!(stability, m)?)?;
    m.add_function(wrap_pyfunction!(gauss_hermite, m)?)?;
    m.add_function(wrap_pyfunction!(problem_names, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rate, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    Ok(())
}
