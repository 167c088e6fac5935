//! Python bindings. Structured results cross the boundary as JSON and come
//! back as plain Python objects.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use protodetect::commands;
use protodetect::config::{LoadedConfig, RunConfig};
use protodetect::eval;
use protodetect::gradcheck::run_gradcheck;
use protodetect::inference::{
    assemble_protocol, classify_proposal, detect_scenes, Decision, ProtocolMode, ProtocolSpec,
};
use protodetect::numeric;
use protodetect::prototype::{posteriors, PrototypeBank};
use protodetect::sim::{self, BBox, Scene};
use protodetect::trainer::{self, training_support};
use protodetect::ClassId;

create_exception!(protodetect, ProtodetectError, PyException);

/// Error message plus the CLI exit code as the second argument.
fn to_py(e: protodetect::Error) -> PyErr {
    ProtodetectError::new_err((e.to_string(), e.exit_code()))
}

fn json_to_py<'py>(py: Python<'py>, s: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (s,))
}

fn to_py_obj<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| to_py(e.into()))?;
    json_to_py(py, &s)
}

fn run_config(config_json: &str, overrides: Vec<String>) -> PyResult<RunConfig> {
    RunConfig::from_json(config_json, &overrides).map_err(to_py)
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    numeric::softmax(&logits).map_err(to_py)
}

#[pyfunction]
fn sq_euclidean(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    numeric::sq_euclidean(&a, &b).map_err(to_py)
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    let a = BBox::try_from(a).map_err(to_py)?;
    let b = BBox::try_from(b).map_err(to_py)?;
    Ok(sim::iou(&a, &b))
}

/// 101-point interpolated AP of ranked TP flags; `None` without ground truth.
#[pyfunction]
fn average_precision(flags: Vec<bool>, n_gt: usize) -> Option<f64> {
    eval::average_precision(&flags, n_gt)
}

#[pyfunction]
#[pyo3(signature = (config_json = "{}", overrides = Vec::new()))]
fn config_hash(config_json: &str, overrides: Vec<String>) -> PyResult<String> {
    Ok(run_config(config_json, overrides)?.hash())
}

#[pyclass(module = "protodetect", frozen)]
struct Dataset {
    inner: sim::Dataset,
}

#[pymethods]
impl Dataset {
    /// Generates a world from the `world` section of a run config.
    #[staticmethod]
    #[pyo3(signature = (config_json = "{}", overrides = Vec::new()))]
    fn generate(config_json: &str, overrides: Vec<String>) -> PyResult<Self> {
        let cfg = run_config(config_json, overrides)?;
        let inner = sim::generate_world(&cfg.world).map_err(to_py)?;
        Ok(Dataset { inner })
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Dataset {
            inner: sim::Dataset::from_json(s).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn digest(&self) -> PyResult<String> {
        commands::dataset_digest(&self.inner).map_err(to_py)
    }

    #[getter]
    fn num_scenes(&self) -> usize {
        self.inner.scenes.len()
    }

    #[getter]
    fn seen_ids(&self) -> Vec<u32> {
        self.inner.config.seen_ids().iter().map(|c| c.0).collect()
    }

    #[getter]
    fn unseen_ids(&self) -> Vec<u32> {
        self.inner.config.unseen_ids().iter().map(|c| c.0).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(scenes={}, seen={}, unseen={})",
            self.inner.scenes.len(),
            self.inner.config.seen_classes,
            self.inner.config.unseen_classes
        )
    }
}

#[pyclass(module = "protodetect", name = "PrototypeBank", frozen)]
struct Bank {
    inner: PrototypeBank,
}

#[pymethods]
impl Bank {
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Bank {
            inner: PrototypeBank::from_json(s).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn class_ids(&self) -> Vec<u32> {
        self.inner.class_ids().iter().map(|c| c.0).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn posteriors(&self, q: Vec<f64>) -> PyResult<Vec<f64>> {
        posteriors(&q, &self.inner).map_err(to_py)
    }

    /// `(class_id, score)`, or `None` when the background prototype wins.
    fn classify(&self, q: Vec<f64>) -> PyResult<Option<(u32, f64)>> {
        Ok(match classify_proposal(&q, &self.inner).map_err(to_py)? {
            Decision::Accept { class_id, score } => Some((class_id.0, score)),
            Decision::Reject => None,
        })
    }
}

#[pyclass(module = "protodetect", frozen)]
struct TrainedModel {
    outcome: trainer::TrainOutcome,
    config: RunConfig,
}

#[pymethods]
impl TrainedModel {
    #[getter]
    fn heldout_accuracy(&self) -> Option<f64> {
        self.outcome.heldout_accuracy
    }

    #[getter]
    fn bank(&self) -> Bank {
        Bank {
            inner: self.outcome.bank.clone(),
        }
    }

    /// Run log as a list of dicts.
    fn log<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_obj(py, &self.outcome.log)
    }

    fn embed(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.outcome.model.net.embed(&v).map_err(to_py)
    }

    /// Runs one protocol on `dataset` and returns the report as a dict.
    #[pyo3(signature = (dataset, mode = "fewshot", threads = 1))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        mode: &str,
        threads: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ds = &dataset.inner;
        let spec = ProtocolSpec {
            mode: ProtocolMode::parse(mode).map_err(to_py)?,
            ..self.config.protocol.clone()
        };
        let net = &self.outcome.model.net;
        let report = (|| {
            let seen = training_support(ds, self.config.train.shots)?;
            let mut unseen = ds.support_for(&ds.config.unseen_ids())?;
            for v in unseen.values_mut() {
                v.truncate(self.config.train.shots);
            }
            let bg = self
                .outcome
                .bank
                .get(ClassId::BACKGROUND)
                .ok_or(protodetect::Error::NoBackgroundPool)?;
            let protocol = assemble_protocol(&spec, &seen, &unseen, net, bg)?;
            let scenes: Vec<&Scene> = ds.scenes_in(protocol.split).collect();
            let dets = detect_scenes(&scenes, net, &protocol.bank, threads)?;
            eval::evaluate(&dets, &scenes, &protocol)
        })()
        .map_err(to_py)?;
        to_py_obj(py, &report)
    }
}

/// Two-stage training with the `model`, `train` and `loss` sections of a
/// run config.
#[pyfunction]
#[pyo3(signature = (dataset, config_json = "{}", overrides = Vec::new()))]
fn train(
    py: Python<'_>,
    dataset: &Dataset,
    config_json: &str,
    overrides: Vec<String>,
) -> PyResult<TrainedModel> {
    let config = run_config(config_json, overrides)?;
    let ds = dataset.inner.clone();
    let outcome = py
        .detach(|| trainer::train(&ds, &config.model, &config.train, &config.loss))
        .map_err(to_py)?;
    Ok(TrainedModel { outcome, config })
}

/// Finite-difference suite; returns `(passed, table)`.
#[pyfunction]
#[pyo3(signature = (config_json = "{}", overrides = Vec::new()))]
fn gradcheck(
    py: Python<'_>,
    config_json: &str,
    overrides: Vec<String>,
) -> PyResult<(bool, String)> {
    let cfg = run_config(config_json, overrides)?;
    let report = py.detach(|| run_gradcheck(&cfg.gradcheck)).map_err(to_py)?;
    Ok((report.passed(), report.table()))
}

/// Runs a CLI command against a config file. Failures raise
/// `ProtodetectError(message, exit_code)`.
#[pyfunction]
#[pyo3(signature = (command, config_path, overrides = Vec::new(), threads = 1, mode = None))]
fn run_command(
    py: Python<'_>,
    command: &str,
    config_path: std::path::PathBuf,
    overrides: Vec<String>,
    threads: usize,
    mode: Option<&str>,
) -> PyResult<String> {
    let ctx = LoadedConfig::load(&config_path, &overrides).map_err(to_py)?;
    let mode = mode.map(ProtocolMode::parse).transpose().map_err(to_py)?;
    py.detach(|| match command {
        "gen-data" => commands::gen_data(&ctx).map(|s| s.digest),
        "train" => commands::train(&ctx).map(|s| s.checkpoint.display().to_string()),
        "eval" => commands::eval(&ctx, mode, threads).map(|s| s.json.display().to_string()),
        "gradcheck" => commands::gradcheck(&ctx, |_| {}).map(|r| r.table()),
        other => Err(protodetect::Error::Config(format!(
            "unknown command {other:?}"
        ))),
    })
    .map_err(to_py)
}

#[pymodule(name = "protodetect")]
pub fn protodetect_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ProtodetectError", m.py().get_type::<ProtodetectError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<Bank>()?;
    m.add_class::<TrainedModel>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(sq_euclidean, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
