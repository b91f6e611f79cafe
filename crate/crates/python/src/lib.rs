//! Python bindings: scoring, events, trained models, baselines, data generation and evaluation.

use std::path::PathBuf;

use gssm::baselines::{Agent, Measure};
use gssm::data::{load_event, Event as CoreEvent};
use gssm::ekf::{reconstruct_event, EkfParams};
use gssm::error::GssmError;
use gssm::evaluation::{write_outputs, EvalOptions};
use gssm::lognormal::{js_divergence_lognormal, nll_loss, LognormalParams as CoreParams};
use gssm::model::Model as CoreModel;
use gssm::pipeline::{default_scorers, evaluate_events, risk_series};
use gssm::score;
use gssm::synth::{generate_dataset as core_generate, GeneratorSpec};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(err: GssmError) -> PyErr {
    match err {
        GssmError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

/// Conditional lognormal spacing distribution `(mu, log_var)`.
#[pyclass(frozen, from_py_object, name = "LognormalParams")]
#[derive(Clone, Copy)]
pub struct LognormalParams(CoreParams);

#[pymethods]
impl LognormalParams {
    #[new]
    fn new(mu: f64, log_var: f64) -> Self {
        Self(CoreParams::new(mu, log_var))
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.0.mu
    }

    #[getter]
    fn log_var(&self) -> f64 {
        self.0.log_var
    }

    fn variance(&self) -> f64 {
        self.0.variance()
    }

    fn median(&self) -> f64 {
        self.0.median()
    }

    fn cdf(&self, s: f64) -> f64 {
        self.0.cdf(s)
    }

    fn __repr__(&self) -> String {
        format!("LognormalParams(mu={}, log_var={})", self.0.mu, self.0.log_var)
    }
}

/// Risk level `M` of spacing `s`.
#[pyfunction]
fn gssm_score(s: f64, params: LognormalParams) -> f64 {
    score::gssm_score(s, params.0)
}

/// Probability of a conflict at intensity `10^level`.
#[pyfunction]
fn conflict_probability(s: f64, params: LognormalParams, level: f64) -> f64 {
    score::conflict_probability(s, params.0, level)
}

#[pyfunction]
fn negative_log_likelihood(params: LognormalParams, s: f64) -> PyResult<f64> {
    nll_loss(params.0, s).map_err(to_py)
}

#[pyfunction]
fn js_divergence(p: LognormalParams, q: LognormalParams) -> f64 {
    js_divergence_lognormal(p.0, q.0)
}

/// Baseline measure value for two agents given as
/// `(x, y, vx, vy, heading, length, width)`.
#[pyfunction]
fn baseline(measure: &str, subject: [f64; 7], object: [f64; 7]) -> PyResult<f64> {
    let m = Measure::ALL
        .into_iter()
        .find(|m| m.name() == measure)
        .ok_or_else(|| PyValueError::new_err(format!("unknown measure {measure:?}")))?;
    let agent = |a: [f64; 7]| Agent { position: [a[0], a[1]], velocity: [a[2], a[3]], heading: a[4], length: a[5], width: a[6] };
    Ok(m.evaluate(&agent(subject), &agent(object)).value)
}

/// One interaction event loaded from a trajectory CSV and its metadata JSON.
#[pyclass(frozen, name = "Event")]
pub struct Event(CoreEvent);

#[pymethods]
impl Event {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_event(&path).map(Self).map_err(to_py)
    }

    #[getter]
    fn event_id(&self) -> String {
        self.0.event_id.clone()
    }

    #[getter]
    fn severity(&self) -> String {
        serde_json::to_value(self.0.severity).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
    }

    #[getter]
    fn subject_id(&self) -> String {
        self.0.subject().agent_id.clone()
    }

    #[getter]
    fn object_ids(&self) -> Vec<String> {
        self.0.objects().map(|o| o.agent_id.clone()).collect()
    }

    #[getter]
    fn impact_time(&self) -> Option<f64> {
        self.0.annotations.impact_time
    }

    /// Frames of one agent as `(time, x, y, heading, speed, yaw_rate)` tuples.
    fn frames(&self, agent_id: &str) -> PyResult<Vec<(f64, f64, f64, f64, f64, f64)>> {
        let track = self.0.track(agent_id).ok_or_else(|| PyValueError::new_err(format!("unknown agent {agent_id}")))?;
        Ok(track.frames.iter().map(|f| (f.time, f.x, f.y, f.heading, f.speed, f.yaw_rate)).collect())
    }

    /// Trajectories re-estimated with the extended Kalman filters.
    #[pyo3(signature = (params_json=None))]
    fn reconstruct(&self, params_json: Option<&str>) -> PyResult<Self> {
        let params: EkfParams = from_json(params_json)?;
        reconstruct_event(&self.0, &params).map(Self).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

/// Trained density model.
#[pyclass(frozen, name = "Model")]
pub struct Model(CoreModel);

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreModel::load(&path).map(Self).map_err(to_py)
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.0.params.count()
    }

    /// `(time, M, p)` for every step where both agents are observed.
    #[pyo3(signature = (event, object_id, subject_id=None))]
    fn risk_series(&self, event: &Event, object_id: &str, subject_id: Option<&str>) -> PyResult<Vec<(f64, f64, f64)>> {
        let subject = subject_id.map(str::to_owned).unwrap_or_else(|| event.0.subject().agent_id.clone());
        let points = risk_series(&event.0, &self.0, &subject, object_id).map_err(to_py)?;
        Ok(points.into_iter().map(|p| (p.time, p.level, p.p)).collect())
    }
}

/// Writes a synthetic dataset; returns the number of events.
#[pyfunction]
#[pyo3(signature = (out, spec_json=None))]
fn generate_dataset(out: PathBuf, spec_json: Option<&str>) -> PyResult<usize> {
    let spec: GeneratorSpec = from_json(spec_json)?;
    core_generate(&spec, &out).map(|t| t.events.len()).map_err(to_py)
}

/// Runs the evaluation protocol on a directory of events; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (model, events_dir, out=None, options_json=None))]
fn evaluate(model: &Model, events_dir: PathBuf, out: Option<PathBuf>, options_json: Option<&str>) -> PyResult<String> {
    let opts: EvalOptions = from_json(options_json)?;
    let events = gssm::data::load_event_dir(&events_dir).map_err(to_py)?;
    let outcome = evaluate_events(&events, &default_scorers(&model.0), &opts).map_err(to_py)?;
    if let Some(dir) = out {
        write_outputs(&dir, &outcome).map_err(to_py)?;
    }
    let reports: std::collections::BTreeMap<_, _> = outcome.scorers.iter().map(|(k, v)| (k.clone(), &v.report)).collect();
    serde_json::to_string(&reports).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn pygssm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<LognormalParams>()?;
    m.add_class::<Event>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(gssm_score, m)?)?;
    m.add_function(wrap_pyfunction!(conflict_probability, m)?)?;
    m.add_function(wrap_pyfunction!(negative_log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(js_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
