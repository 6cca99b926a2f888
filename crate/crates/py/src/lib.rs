//! Python bindings. Reports come back as plain dicts parsed from the same
//! versioned JSON documents the command-line tool writes.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use orthoestim::copula::{self, FamilyKind};
use orthoestim::dataset::{self, ColumnKind, ColumnSpec, Dataset, Role, VariableSchema};
use orthoestim::dml::{self, DmlConfig, DmlReport};
use orthoestim::joint::{self, FitOptions, JointReport, JointSpec};
use orthoestim::synth::{self, DgpSpec};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_family(name: &str) -> PyResult<FamilyKind> {
    name.parse().map_err(|_| PyValueError::new_err(format!("unknown copula family `{name}`")))
}

/// Transposes row-major covariates into columns, checking they are rectangular.
fn columns_of(rows: &[Vec<f64>], n: usize) -> PyResult<Vec<Vec<f64>>> {
    if rows.len() != n {
        return Err(PyValueError::new_err(format!("expected {n} covariate rows, got {}", rows.len())));
    }
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("covariate rows have unequal lengths"));
    }
    Ok((0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect())
}

fn named(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}

/// BIC from a log-likelihood, parameter count and sample size.
#[pyfunction]
fn bic(loglik: f64, n_params: usize, n_obs: usize) -> f64 {
    joint::bic(loglik, n_params, n_obs)
}

/// Bivariate copula CDF for a family name and dependence parameter.
#[pyfunction]
fn copula_cdf(family: &str, theta: f64, u: f64, v: f64) -> PyResult<f64> {
    copula::copula_cdf(parse_family(family)?, theta, u, v).map_err(value_err)
}

/// Natural-breaks class upper bounds.
#[pyfunction]
fn jenks_breaks(values: Vec<f64>, classes: usize) -> PyResult<Vec<f64>> {
    dataset::jenks_breaks(&values, classes).map_err(value_err)
}

/// Wait-time categories 1, 2, 3 from durations in seconds.
#[pyfunction]
fn discretize_wait(seconds: Vec<f64>) -> PyResult<Vec<u32>> {
    // u8 vectors would convert to `bytes`.
    let codes = dataset::discretize_wait(&seconds).map_err(value_err)?;
    Ok(codes.into_iter().map(u32::from).collect())
}

/// Seeded fold label for each of `n` rows.
#[pyfunction]
fn kfold_split(n: usize, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    Ok(dataset::kfold_split(n, k, seed).map_err(value_err)?.labels().to_vec())
}

/// Generates a preset dataset. Returns `(columns, truth)` where `columns`
/// maps names to value lists and `truth` is the generator document.
#[pyfunction]
#[pyo3(signature = (preset, n, seed = 0))]
fn simulate<'py>(
    py: Python<'py>,
    preset: &str,
    n: usize,
    seed: u64,
) -> PyResult<(Bound<'py, PyDict>, Bound<'py, PyAny>)> {
    let spec = synth::preset(preset, n, seed).map_err(value_err)?;
    let data = match &spec {
        DgpSpec::Copula(s) => synth::generate_copula_data(s).map_err(value_err)?,
        DgpSpec::Dml(s) => synth::generate_dml_data(s).map_err(value_err)?.0,
    };
    let columns = PyDict::new(py);
    for c in data.schema().columns() {
        let values: Vec<f64> = data.column(&c.name).map_err(value_err)?.to_vec();
        columns.set_item(&c.name, values)?;
    }
    let truth = json_to_py(py, &synth::DgpDocument::new(spec))?;
    Ok((columns, truth))
}

/// Cross-fitted policy effect of a binary `policy` on `outcome`, adjusting
/// for the covariate rows. Returns the `dml/1` report as a dict.
#[pyfunction]
#[pyo3(signature = (outcome, policy, covariates, k_folds = 5, seed = 0, outcome_trees = None, policy_trees = None))]
fn fit_dml<'py>(
    py: Python<'py>,
    outcome: Vec<f64>,
    policy: Vec<f64>,
    covariates: Vec<Vec<f64>>,
    k_folds: usize,
    seed: u64,
    outcome_trees: Option<usize>,
    policy_trees: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let n = outcome.len();
    let w = columns_of(&covariates, n)?;
    let names = named("w", w.len());
    let mut specs = vec![
        ColumnSpec::new("outcome", ColumnKind::Continuous, Role::Outcome),
        ColumnSpec::new("policy", ColumnKind::Binary, Role::Policy),
    ];
    specs.extend(names.iter().map(|c| ColumnSpec::new(c, ColumnKind::Continuous, Role::Covariate)));
    let mut cols = vec![outcome, policy];
    cols.extend(w);
    let schema = VariableSchema::new(specs).map_err(value_err)?;
    let data = Dataset::from_columns(schema, &cols).map_err(value_err)?;

    let mut config = DmlConfig { k_folds, seed, ..DmlConfig::default() };
    if let Some(t) = outcome_trees {
        config.outcome_learner.n_trees = t;
    }
    if let Some(t) = policy_trees {
        config.policy_learner.n_trees = t;
    }
    let report = py
        .detach(|| {
            let est = dml::run_dml(&data, &config)?;
            DmlReport::new(&data, &config, est)
        })
        .map_err(value_err)?;
    json_to_py(py, &report)
}

/// Copula joint model for a binary `stress` (0/1) and ordinal `wait`
/// (1..levels) outcome. Returns the `jointfit/1` report as a dict.
#[pyfunction]
#[pyo3(signature = (stress, wait, stress_covariates, wait_covariates, family = "frank", levels = 3))]
fn fit_copula<'py>(
    py: Python<'py>,
    stress: Vec<f64>,
    wait: Vec<f64>,
    stress_covariates: Vec<Vec<f64>>,
    wait_covariates: Vec<Vec<f64>>,
    family: &str,
    levels: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let n = stress.len();
    let x = columns_of(&stress_covariates, n)?;
    let z = columns_of(&wait_covariates, n)?;
    let (x_names, z_names) = (named("x", x.len()), named("z", z.len()));
    let categories = (1..=levels).map(|c| c as f64).collect();
    let mut specs = vec![
        ColumnSpec::new("stress", ColumnKind::Binary, Role::Policy),
        ColumnSpec::new("wait", ColumnKind::Ordinal { categories }, Role::Outcome),
    ];
    specs.extend(
        x_names
            .iter()
            .chain(&z_names)
            .map(|c| ColumnSpec::new(c, ColumnKind::Continuous, Role::Covariate)),
    );
    let mut cols = vec![stress, wait];
    cols.extend(x);
    cols.extend(z);
    let schema = VariableSchema::new(specs).map_err(value_err)?;
    let data = Dataset::from_columns(schema, &cols).map_err(value_err)?;
    let spec = JointSpec {
        levels,
        ..JointSpec::new("stress", "wait", x_names, z_names, parse_family(family)?)
    };
    let fit = py
        .detach(|| joint::fit_joint_mle(&spec, &data, None, &FitOptions::default()))
        .map_err(value_err)?;
    json_to_py(py, &JointReport::single(&spec, &fit))
}

/// Runs the command-line tool with the given arguments; returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> u8 {
    let argv: Vec<String> = std::iter::once("orthoestim".to_string()).chain(args).collect();
    py.detach(|| orthoestim::cli::run_code(argv))
}

#[pymodule(name = "orthoestim")]
fn orthoestim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("PRESETS", synth::PRESETS.to_vec())?;
    m.add_function(wrap_pyfunction!(bic, m)?)?;
    m.add_function(wrap_pyfunction!(copula_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(jenks_breaks, m)?)?;
    m.add_function(wrap_pyfunction!(discretize_wait, m)?)?;
    m.add_function(wrap_pyfunction!(kfold_split, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_dml, m)?)?;
    m.add_function(wrap_pyfunction!(fit_copula, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
