//! Python bindings: config, dataset generation and loading, model
//! construction, checkpoints, rendering, training and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use humanrf::config::{Config, ConfigError};
use humanrf::eval::{evaluate, frame_metrics};
use humanrf::model::{Checkpoint, Model};
use humanrf::synthcap::{generate_dataset, Dataset, Split};
use humanrf::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Dimension { .. } | Error::Data(_) | Error::Checkpoint(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn cfg_err(e: ConfigError) -> PyErr {
    match e {
        ConfigError::UnknownKey(k) => PyKeyError::new_err(k),
        ConfigError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Flat key=value run configuration.
#[pyclass(name = "Config", module = "pyhumanrf")]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => Config::from_text(t).map_err(cfg_err)?,
            None => Config::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Config::load(&path).map_err(cfg_err)?,
        })
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyKeyError::new_err(key.to_string()))
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(cfg_err)?;
        next.validate().map_err(cfg_err)?;
        self.inner = next;
        Ok(())
    }

    fn keys(&self) -> Vec<&'static str> {
        Config::KEYS.to_vec()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn text(&self) -> String {
        self.inner.canonical_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", self.inner.hash())
    }
}

/// A generated dataset loaded from disk.
#[pyclass(name = "Dataset", module = "pyhumanrf", unsendable)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Dataset::load(&path).map_err(|e| py_err(e.into()))?,
        })
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution
    }

    #[getter]
    fn poses(&self) -> usize {
        self.inner.poses
    }

    #[getter]
    fn views(&self) -> usize {
        self.inner.views
    }

    #[getter]
    fn num_subjects(&self) -> usize {
        self.inner.subjects.len()
    }

    /// Indices of the subjects in `split` ("train" or "test").
    fn split(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.split(parse_split(split)?))
    }

    /// Row-major RGB floats and the boolean mask of one frame.
    fn frame(&self, subject: usize, pose: usize, view: usize) -> PyResult<(Vec<f64>, Vec<bool>)> {
        self.check(subject, pose, view)?;
        let f = self.inner.frame(subject, pose, view);
        Ok((f.image.data.clone(), f.mask.data.clone()))
    }
}

impl PyDataset {
    fn check(&self, subject: usize, pose: usize, view: usize) -> PyResult<()> {
        let d = &self.inner;
        if subject >= d.subjects.len() || pose >= d.poses || view >= d.views {
            return Err(PyIndexError::new_err(format!("frame ({subject}, {pose}, {view}) out of range")));
        }
        Ok(())
    }
}

fn parse_split(s: &str) -> PyResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("unknown split {s:?}"))),
    }
}

/// Network parameters plus the config that shaped them.
#[pyclass(name = "Model", module = "pyhumanrf", unsendable)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(Self {
            inner: Model::new(&config.inner).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self {
            inner: ck.model().map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(&self.inner, 0, 0, None).save(&path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.cfg.clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.inner.store.numel()
    }

    /// Renders `(subject, target_pose, target_view)` from the input frame
    /// `(subject, input_pose, input_view)` and scores it against ground truth.
    #[pyo3(signature = (dataset, subject, input_pose, input_view, target_pose, target_view))]
    fn render<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        subject: usize,
        input_pose: usize,
        input_view: usize,
        target_pose: usize,
        target_view: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        dataset.check(subject, input_pose, input_view)?;
        dataset.check(subject, target_pose, target_view)?;
        let input = dataset.inner.frame(subject, input_pose, input_view);
        let target = dataset.inner.frame(subject, target_pose, target_view);
        let tmpl = &self.inner.template;
        let is = input.state(tmpl).map_err(|e| py_err(e.into()))?;
        let ts = target.state(tmpl).map_err(|e| py_err(e.into()))?;
        let out = self
            .inner
            .render_view(input, &is, &target.cam, &ts)
            .map_err(py_err)?;
        let m = frame_metrics("render", &out.image, &target.image, &out.rect).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("width", out.image.width)?;
        d.set_item("height", out.image.height)?;
        d.set_item("image", out.image.data)?;
        d.set_item("opacity", out.opacity)?;
        d.set_item("psnr", m.psnr)?;
        d.set_item("ssim", m.ssim)?;
        Ok(d)
    }

    /// Mean masked (psnr, ssim) of the novel-view and novel-pose protocols.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let r = evaluate(&self.inner, &dataset.inner, Split::Test).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("novel_view", r.novel_view.mean())?;
        d.set_item("novel_pose", r.novel_pose.mean())?;
        d.set_item("frames", r.novel_view.rows.len())?;
        Ok(d)
    }
}

/// Writes the synthetic dataset and returns the number of files.
#[pyfunction]
fn generate(config: &PyConfig, path: PathBuf) -> PyResult<usize> {
    let m = generate_dataset(&config.inner, &path).map_err(|e| py_err(e.into()))?;
    Ok(m.len())
}

/// Trains from scratch and returns the final model and per-step totals.
#[pyfunction]
fn train(config: &PyConfig, dataset: &PyDataset, out: PathBuf) -> PyResult<(PyModel, Vec<f64>)> {
    let s = humanrf::trainer::train(&config.inner, &dataset.inner, &out, None).map_err(py_err)?;
    let totals = s.logs.iter().map(|l| l.report.total).collect();
    Ok((PyModel { inner: s.model }, totals))
}

#[pymodule]
fn pyhumanrf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
