//! Python bindings for the `dualcond` core crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dualcond::autograd::Module;
use dualcond::checkpoint::Checkpoint;
use dualcond::cli::{execute, Command, Common};
use dualcond::config::{Config as CoreConfig, Profile};
use dualcond::injection::{draw_fusion, BranchCase, FusionPolicy};
use dualcond::losses::{face_identity_loss, reg_l1, total_loss, LossTerms};
use dualcond::preprocess::{BoundingBox, Scale};
use dualcond::tensor::Matrix;
use dualcond::training::{Dataset, Trainer as CoreTrainer};
use dualcond::{rng, Error};

fn to_py(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match e {
        Error::InvalidInput(_) | Error::Config(_) => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    let text = value.to_string();
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn common(config: Option<PathBuf>, seed: Option<u64>, overrides: Vec<String>) -> Common {
    Common { config, seed, overrides }
}

fn run(py: Python<'_>, command: Command) -> PyResult<Py<PyAny>> {
    let value = py.detach(|| execute(&command)).map_err(to_py)?;
    json_to_py(py, &value)
}

fn case_name(case: BranchCase) -> &'static str {
    match case {
        BranchCase::TextOnly => "text",
        BranchCase::VisualOnly => "visual",
        BranchCase::Both => "both",
    }
}

/// Flat key/value configuration.
#[pyclass(name = "Config", module = "dualcond_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (profile = "toy"))]
    fn new(profile: &str) -> PyResult<Self> {
        let p = match profile {
            "toy" => Profile::Toy,
            "full" => Profile::Full,
            other => return Err(PyValueError::new_err(format!("unknown profile {other:?}"))),
        };
        Ok(Self { inner: CoreConfig::for_profile(p) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::load(&path).map_err(to_py)? })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::parse(text).map_err(to_py)? })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)?;
        self.inner.validate().map_err(to_py)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.to_map().remove(key).ok_or_else(|| PyValueError::new_err(format!("unknown config key {key:?}")))
    }

    fn keys(&self) -> Vec<String> {
        self.inner.to_map().into_keys().collect()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", &self.inner.hash()[..12])
    }
}

/// Training loop over a directory of images with a `bboxes.jsonl` sidecar.
#[pyclass(name = "Trainer", module = "dualcond_py", unsendable)]
struct PyTrainer {
    inner: CoreTrainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyConfig, data: PathBuf) -> PyResult<Self> {
        let dataset = Dataset::load_dir(&data, &config.inner.preprocess).map_err(to_py)?;
        Ok(Self { inner: CoreTrainer::new(config.inner.clone(), &dataset).map_err(to_py)? })
    }

    /// One optimizer step; returns the step record.
    fn step(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let rec = self.inner.train_step().map_err(to_py)?;
        json_to_py(py, &serde_json::to_value(&rec).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
    }

    /// Trains until `train.max_steps`; returns the total loss of every step.
    #[pyo3(signature = (out = None))]
    fn run(&mut self, out: Option<PathBuf>) -> PyResult<Vec<f64>> {
        let history = self.inner.run(out.as_deref(), None).map_err(to_py)?;
        Ok(history.into_iter().map(|r| r.total).collect())
    }

    /// Writes a checkpoint and returns its id.
    fn save(&self, out: PathBuf) -> PyResult<String> {
        let ckpt = self.inner.checkpoint().map_err(to_py)?;
        ckpt.save(&out).map_err(to_py)?;
        Ok(ckpt.id().to_string())
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.inner.step
    }

    fn param_hash(&self, trainable: bool) -> String {
        self.inner.model.param_hash(trainable)
    }

    fn trainable_names(&self) -> Vec<String> {
        self.inner.model.trainable_names()
    }
}

/// Id of the checkpoint stored in `path`, after verification.
#[pyfunction]
fn checkpoint_id(path: PathBuf) -> PyResult<String> {
    Ok(Checkpoint::load(&path).map_err(to_py)?.id().to_string())
}

/// Center-preserving box expansion clamped to `(width, height)`.
#[pyfunction]
fn expand_bbox(bbox: (i64, i64, i64, i64), scale: &str, dims: (usize, usize)) -> PyResult<(i64, i64, i64, i64)> {
    let b = BoundingBox::new(bbox.0, bbox.1, bbox.2, bbox.3).map_err(to_py)?;
    let s: Scale = scale.parse().map_err(to_py)?;
    let e = dualcond::preprocess::expand_bbox(b, s, dims).map_err(to_py)?;
    Ok((e.x_min, e.y_min, e.x_max, e.y_max))
}

/// `(case, gamma, sigma)` for a uniform sample under the default policy.
#[pyfunction]
#[pyo3(signature = (sample, r1 = 1.0 / 3.0, r2 = 2.0 / 3.0))]
fn fusion_case(sample: f64, r1: f64, r2: f64) -> PyResult<(&'static str, f64, f64)> {
    let policy = FusionPolicy { r1, r2, ..FusionPolicy::default() };
    policy.validate().map_err(to_py)?;
    let d = policy.case_for(sample);
    Ok((case_name(d.case), d.gamma, d.sigma))
}

/// Counts of `(text, both, visual)` over `n` seeded draws.
#[pyfunction]
#[pyo3(signature = (n, seed = 0))]
fn fusion_counts(n: usize, seed: u64) -> (usize, usize, usize) {
    let policy = FusionPolicy::default();
    let mut r = rng::stream(seed, "python-fusion");
    let mut c = (0, 0, 0);
    for _ in 0..n {
        match draw_fusion(&policy, &mut r).case {
            BranchCase::TextOnly => c.0 += 1,
            BranchCase::Both => c.1 += 1,
            BranchCase::VisualOnly => c.2 += 1,
        }
    }
    c
}

#[pyfunction(name = "reg_l1")]
fn py_reg_l1(values: Vec<f64>) -> PyResult<f64> {
    reg_l1(&Matrix::row_vector(values)).map_err(to_py)
}

#[pyfunction(name = "face_identity_loss")]
fn py_face_identity_loss(reference: Vec<f64>, generated: Vec<f64>) -> PyResult<f64> {
    face_identity_loss(&Matrix::row_vector(reference), &Matrix::row_vector(generated)).map_err(to_py)
}

/// Weighted total of the four loss terms using the weights in `config`.
#[pyfunction(name = "total_loss")]
#[pyo3(signature = (diffusion, face, reg_text, reg_visual, config = None))]
fn py_total_loss(diffusion: f64, face: f64, reg_text: f64, reg_visual: f64, config: Option<&PyConfig>) -> PyResult<f64> {
    let weights = config.map_or_else(|| CoreConfig::toy().loss, |c| c.inner.loss);
    let terms = LossTerms { diffusion, face, reg_text, reg_visual };
    Ok(total_loss(terms, &weights).map_err(to_py)?.total)
}

#[pyfunction]
#[pyo3(signature = (input, bbox, out, config = None, seed = None, overrides = Vec::new()))]
fn preprocess(
    py: Python<'_>,
    input: PathBuf,
    bbox: &str,
    out: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    overrides: Vec<String>,
) -> PyResult<Py<PyAny>> {
    let bbox: BoundingBox = bbox.parse().map_err(to_py)?;
    run(py, Command::Preprocess { input, bbox, out, common: common(config, seed, overrides) })
}

#[pyfunction]
#[pyo3(signature = (data, out, config = None, seed = None, overrides = Vec::new(), resume = None))]
fn train(
    py: Python<'_>,
    data: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    overrides: Vec<String>,
    resume: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    run(py, Command::Train { data, out, resume, log: None, common: common(config, seed, overrides) })
}

#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (image, ckpt, out, bbox = None, m_eval = None, config = None, seed = None))]
fn personalize(
    py: Python<'_>,
    image: PathBuf,
    ckpt: PathBuf,
    out: PathBuf,
    bbox: Option<&str>,
    m_eval: Option<usize>,
    config: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<Py<PyAny>> {
    let bbox = bbox.map(str::parse::<BoundingBox>).transpose().map_err(to_py)?;
    run(py, Command::Personalize { image, ckpt, out, bbox, m_eval, common: common(config, seed, Vec::new()) })
}

#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (concept, prompt, out, n = 5, seed = None, ckpt = None, img2img_t = None, guidance = None, steps = None, config = None))]
fn generate(
    py: Python<'_>,
    concept: PathBuf,
    prompt: String,
    out: PathBuf,
    n: usize,
    seed: Option<u64>,
    ckpt: Option<PathBuf>,
    img2img_t: Option<usize>,
    guidance: Option<f64>,
    steps: Option<usize>,
    config: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    run(
        py,
        Command::Generate { concept, prompt, n, out, ckpt, img2img_t, guidance, steps, common: common(config, seed, Vec::new()) },
    )
}

#[pyfunction]
#[pyo3(signature = (pairs, out, config = None))]
fn evaluate(py: Python<'_>, pairs: PathBuf, out: PathBuf, config: Option<PathBuf>) -> PyResult<Py<PyAny>> {
    run(py, Command::Evaluate { pairs, out, common: common(config, None, Vec::new()) })
}

#[pymodule]
fn dualcond_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(checkpoint_id, m)?)?;
    m.add_function(wrap_pyfunction!(expand_bbox, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_case, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_counts, m)?)?;
    m.add_function(wrap_pyfunction!(py_reg_l1, m)?)?;
    m.add_function(wrap_pyfunction!(py_face_identity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(personalize, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
