//! Python bindings: MDPs, datasets, learners, the online and offline loops,
//! latent behavior cloning and the check suites.
//!
//! Matrices cross the boundary as lists of rows; records come back as dicts.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

use lab::bc::{self, BcConfig};
use lab::diagnostics::{self, Suite};
use lab::experiments;
use lab::io;
use lab::learner::{Learner, LearnerConfig, LearnerMethod};
use lab::mdp::{self, LowRankMdp, Policy, Transition, TransitionDataset};
use lab::objective::FeatureModel;
use lab::offline::{self, OfflineConfig};
use lab::online::{self, BonusConfig};
use lab::{Error, Matrix};

fn to_py(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => match s.as_str() {
            "inf" => f64::INFINITY.into_pyobject(py)?.into_any(),
            "-inf" => f64::NEG_INFINITY.into_pyobject(py)?.into_any(),
            "nan" => f64::NAN.into_pyobject(py)?.into_any(),
            _ => s.into_pyobject(py)?.into_any(),
        },
        Value::Array(xs) => {
            let list = PyList::empty(py);
            for x in xs {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn record_to_py<'py, T: Serialize>(py: Python<'py>, x: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(x).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn learner_method(name: &str) -> PyResult<LearnerMethod> {
    match name {
        "erm" => Ok(LearnerMethod::Erm),
        "gradient" => Ok(LearnerMethod::Gradient),
        "svd-oracle" | "svd_oracle" => Ok(LearnerMethod::SvdOracle),
        other => Err(PyValueError::new_err(format!("unknown learner '{other}'"))),
    }
}

/// A tabular low-rank MDP.
#[pyclass(name = "Mdp", module = "spederlab", frozen)]
struct PyMdp {
    inner: LowRankMdp,
}

#[pymethods]
impl PyMdp {
    /// Random `(states, actions, rank)` instance.
    #[staticmethod]
    #[pyo3(signature = (states, actions, rank, seed, gamma = 0.9))]
    fn random(states: usize, actions: usize, rank: usize, seed: u64, gamma: f64) -> PyResult<Self> {
        let inner = mdp::generate_random_mdp(states, actions, rank, seed).and_then(|m| m.with_gamma(gamma)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (side, slip = 0.0, gamma = 0.9))]
    fn gridworld(side: usize, slip: f64, gamma: f64) -> PyResult<Self> {
        Ok(Self { inner: mdp::gridworld(side, slip, gamma).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let parsed: io::MdpJson = io::from_json(text, std::path::Path::new("<string>")).map_err(to_py)?;
        Ok(Self { inner: parsed.to_mdp().map_err(to_py)? })
    }

    fn to_json(&self) -> PyResult<String> {
        io::mdp_to_json(&self.inner).map_err(to_py)
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    /// Rows indexed by `s * num_actions + a`.
    fn kernel(&self) -> Vec<Vec<f64>> {
        rows(self.inner.kernel())
    }

    fn reward(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.reward())
    }

    /// `(optimal value from rho, optimal policy rows)`.
    fn solve(&self) -> PyResult<(f64, Vec<Vec<f64>>)> {
        let (values, policy) = self.inner.solve().map_err(to_py)?;
        Ok((values.value_at(self.inner.rho()), rows(policy.probs())))
    }

    fn policy_value(&self, policy: Vec<Vec<f64>>) -> PyResult<f64> {
        let p = Policy::new(matrix(&policy)?).map_err(to_py)?;
        self.inner.policy_value(&p).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Mdp(states={}, actions={}, rank={}, gamma={})", self.num_states(), self.num_actions(), self.rank(), self.gamma())
    }
}

/// A learned factorization `phi_hat`, `mu_prime_hat`.
#[pyclass(name = "FeatureModel", module = "spederlab", frozen)]
struct PyFeatureModel {
    inner: FeatureModel,
}

#[pymethods]
impl PyFeatureModel {
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn phi_hat(&self) -> Vec<Vec<f64>> {
        rows(self.inner.phi_hat())
    }

    fn mu_prime_hat(&self) -> Vec<Vec<f64>> {
        rows(self.inner.mu_prime_hat())
    }

    fn to_json(&self) -> PyResult<String> {
        io::to_json(&io::FeatureModelJson::from(&self.inner)).map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let parsed: io::FeatureModelJson = io::from_json(text, std::path::Path::new("<string>")).map_err(to_py)?;
        Ok(Self { inner: parsed.to_model().map_err(to_py)? })
    }
}

fn policy_by_name(m: &LowRankMdp, name: &str, epsilon: f64) -> PyResult<Policy> {
    match name {
        "uniform" => Ok(Policy::uniform(m.num_states(), m.num_actions())),
        "optimal" => Ok(m.solve().map_err(to_py)?.1),
        "epsilon-greedy" => bc::expert_policy(m, epsilon).map_err(to_py),
        other => Err(PyValueError::new_err(format!("unknown policy '{other}'"))),
    }
}

fn dataset(triples: &[(usize, usize, usize)]) -> TransitionDataset {
    TransitionDataset::from_triples(triples.iter().map(|&(s, a, s_next)| Transition { s, a, s_next }).collect())
}

/// `n` i.i.d. `(s, a, s')` triples from the occupancy of a named policy.
#[pyfunction]
#[pyo3(signature = (mdp, n, seed, policy = "uniform", epsilon = 0.05))]
fn sample_dataset(mdp: &PyMdp, n: usize, seed: u64, policy: &str, epsilon: f64) -> PyResult<Vec<(usize, usize, usize)>> {
    let p = policy_by_name(&mdp.inner, policy, epsilon)?;
    let d = mdp::sample_occupancy_dataset(&mdp.inner, &p, n, seed).map_err(to_py)?;
    Ok(d.primary.iter().map(|t| (t.s, t.a, t.s_next)).collect())
}

/// Rollouts of a named policy from the initial distribution.
#[pyfunction]
#[pyo3(signature = (mdp, trajectories, horizon, seed, policy = "epsilon-greedy", epsilon = 0.05))]
fn sample_trajectories(
    mdp: &PyMdp,
    trajectories: usize,
    horizon: usize,
    seed: u64,
    policy: &str,
    epsilon: f64,
) -> PyResult<Vec<(usize, usize, usize)>> {
    let p = policy_by_name(&mdp.inner, policy, epsilon)?;
    let d = mdp::sample_trajectories(&mdp.inner, &p, trajectories, horizon, seed);
    Ok(d.primary.iter().map(|t| (t.s, t.a, t.s_next)).collect())
}

#[pyfunction]
#[pyo3(signature = (mdp, data, method = "gradient", dim = None, steps = 20_000, seed = 0))]
fn learn(
    mdp: &PyMdp,
    data: Vec<(usize, usize, usize)>,
    method: &str,
    dim: Option<usize>,
    steps: usize,
    seed: u64,
) -> PyResult<PyFeatureModel> {
    let config = LearnerConfig { method: learner_method(method)?, dim, max_steps: steps, init_seed: seed, ..LearnerConfig::default() };
    let mut l = Learner::new(&config, &mdp.inner, seed).map_err(to_py)?;
    Ok(PyFeatureModel { inner: l.fit(&dataset(&data)).map_err(to_py)? })
}

/// Online run; returns the per-episode records.
#[pyfunction]
#[pyo3(signature = (mdp, episodes, seed = 0, alpha_scale = 1.0, learner = "erm"))]
fn run_online<'py>(
    py: Python<'py>,
    mdp: &PyMdp,
    episodes: usize,
    seed: u64,
    alpha_scale: f64,
    learner: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let config = BonusConfig { alpha_scale, ..BonusConfig::default() };
    let lc = LearnerConfig { method: learner_method(learner)?, ..LearnerConfig::default() };
    let run = online::run_online(&mdp.inner, &config, &lc, episodes, seed).map_err(to_py)?;
    record_to_py(py, &run.records)
}

/// Offline run on `data` collected by `behavior` (policy rows).
#[pyfunction]
#[pyo3(signature = (mdp, data, behavior, seed = 0, alpha_scale = 1.0, learner = "erm"))]
fn run_offline<'py>(
    py: Python<'py>,
    mdp: &PyMdp,
    data: Vec<(usize, usize, usize)>,
    behavior: Vec<Vec<f64>>,
    seed: u64,
    alpha_scale: f64,
    learner: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let behavior = Policy::new(matrix(&behavior)?).map_err(to_py)?;
    let config = OfflineConfig { alpha_scale, ..OfflineConfig::for_behavior(&behavior) };
    let lc = LearnerConfig { method: learner_method(learner)?, ..LearnerConfig::default() };
    let run = offline::run_offline(&mdp.inner, &dataset(&data), &behavior, &config, &lc, seed).map_err(to_py)?;
    record_to_py(py, &run.record)
}

/// Latent behavior cloning; returns the metrics dict.
#[pyfunction]
#[pyo3(signature = (mdp, model, expert, offline_data, seed = 0, epsilon = 0.05, decoder_steps = 50_000))]
fn latent_bc<'py>(
    py: Python<'py>,
    mdp: &PyMdp,
    model: &PyFeatureModel,
    expert: Vec<(usize, usize, usize)>,
    offline_data: Vec<(usize, usize, usize)>,
    seed: u64,
    epsilon: f64,
    decoder_steps: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let expert_pi = bc::expert_policy(&mdp.inner, epsilon).map_err(to_py)?;
    let config = BcConfig { seed, decoder_steps, ..BcConfig::default() };
    let (metrics, _) =
        bc::run_latent_bc(&mdp.inner, &model.inner, &expert_pi, &dataset(&expert), &dataset(&offline_data), &config)
            .map_err(to_py)?;
    record_to_py(py, &metrics)
}

/// Runs a check suite (`simlemma`, `potential`, `vnorm`, `generalization`,
/// `duality` or `all`) and returns the reports.
#[pyfunction]
#[pyo3(signature = (suite, seed = 0))]
fn verify<'py>(py: Python<'py>, suite: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let s: Suite = suite.parse().map_err(to_py)?;
    let out = diagnostics::run_suite(s, seed).map_err(to_py)?;
    record_to_py(py, &out.reports)
}

/// Runs one acceptance criterion (`A1` to `A10`); returns `(passed, summary)`.
#[pyfunction]
#[pyo3(signature = (id, seed = 0))]
fn run_criterion(id: &str, seed: u64) -> PyResult<(bool, String)> {
    let o = experiments::run_criterion(id, seed).map_err(to_py)?;
    Ok((o.passed, o.summary))
}

#[pymodule]
fn spederlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", io::VERSION)?;
    m.add_class::<PyMdp>()?;
    m.add_class::<PyFeatureModel>()?;
    m.add_function(wrap_pyfunction!(sample_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(sample_trajectories, m)?)?;
    m.add_function(wrap_pyfunction!(learn, m)?)?;
    m.add_function(wrap_pyfunction!(run_online, m)?)?;
    m.add_function(wrap_pyfunction!(run_offline, m)?)?;
    m.add_function(wrap_pyfunction!(latent_bc, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_criterion, m)?)?;
    Ok(())
}
