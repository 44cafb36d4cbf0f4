//! Python bindings. Frames and masks cross the boundary as nested lists of
//! floats (`[H][W]`), sequences as lists of frames.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use stpfnet::checkpoint::Checkpoint;
use stpfnet::config::RunConfig;
use stpfnet::data::{synth_dataset, write_dataset, Padding};
use stpfnet::experiment::{evaluate, load_data, train_run};
use stpfnet::metrics::{segmentation_metrics, FrameMetrics};
use stpfnet::model::Stpfnet;
use stpfnet::propagation::propagate_frames;
use stpfnet::train::sampler_seed;
use stpfnet::verify::{run_criterion, CRITERIA};
use stpfnet::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular [H][W] list"));
    }
    Tensor::new([1, h, w], rows.concat()).map_err(py_err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[t.rank() - 1];
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

fn metrics_dict(m: &FrameMetrics) -> HashMap<&'static str, f64> {
    HashMap::from([("dice", m.dice), ("iou", m.iou), ("recall", m.recall), ("mae", m.mae)])
}

/// Run configuration (seed, data, model, training and evaluation settings).
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses TOML text; no argument gives the defaults.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => RunConfig::from_toml(text).map_err(py_err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.train.steps
    }

    #[setter]
    fn set_steps(&mut self, v: usize) {
        self.inner.train.steps = v;
    }

    #[getter]
    fn data_root(&self) -> Option<PathBuf> {
        self.inner.data.root.clone()
    }

    #[setter]
    fn set_data_root(&mut self, v: Option<PathBuf>) {
        self.inner.data.root = v;
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, steps={}, variant={:?})", self.inner.seed, self.inner.train.steps, self.inner.model.variant_name())
    }
}

/// A network together with the run it came from.
#[pyclass(name = "Model")]
struct PyModel {
    checkpoint: Checkpoint,
    model: Stpfnet,
}

impl PyModel {
    fn from_checkpoint(checkpoint: Checkpoint) -> PyResult<Self> {
        let model = checkpoint.model().map_err(py_err)?;
        Ok(Self { checkpoint, model })
    }
}

#[pymethods]
impl PyModel {
    /// Freshly initialized network for `config`.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        let model = Stpfnet::new(&cfg.model, cfg.seed).map_err(py_err)?;
        let seed = sampler_seed(cfg.seed);
        Self::from_checkpoint(Checkpoint::new(&model, &cfg, 0, seed, 0))
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Self::from_checkpoint(Checkpoint::load(&dir).map_err(py_err)?)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.checkpoint.save(&dir).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.checkpoint.config.clone(),
        }
    }

    #[getter]
    fn step(&self) -> usize {
        self.checkpoint.step
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.num_scalars()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.checkpoint.config.model.variant_name()
    }

    /// Probability maps for frames 2..N given frame 1's mask. Frames are
    /// padded to the encoder stride internally and cropped back.
    fn propagate(&self, frames: Vec<Vec<Vec<f64>>>, first_mask: Vec<Vec<f64>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let frames = frames.iter().map(|f| to_tensor(f)).collect::<PyResult<Vec<_>>>()?;
        let mask = to_tensor(&first_mask)?;
        let (h, w) = (mask.shape()[1], mask.shape()[2]);
        let pad = Padding::to_multiple(h, w, self.model.stride());
        let padded = frames.iter().map(|f| pad.apply(f)).collect::<Result<Vec<_>, _>>().map_err(py_err)?;
        let probs = propagate_frames(&self.model, &padded, &pad.apply(&mask).map_err(py_err)?).map_err(py_err)?;
        probs
            .iter()
            .map(|p| pad.remove(p).map(|t| to_rows(&t)).map_err(py_err))
            .collect()
    }

    /// Macro metrics on a split (`"train"`, `"val"` or `"all"`) of the
    /// configured data, or of `data_root` when given.
    #[pyo3(signature = (split="val", data_root=None))]
    fn evaluate(&self, split: &str, data_root: Option<PathBuf>) -> PyResult<HashMap<&'static str, f64>> {
        let cfg = &self.checkpoint.config;
        let mut data_cfg = cfg.data.clone();
        if data_root.is_some() {
            data_cfg.root = data_root;
        }
        let data = load_data(&data_cfg, self.model.stride()).map_err(py_err)?;
        let names = match split {
            "train" => data.train.clone(),
            "val" => data.val.clone(),
            "all" => data.sequences.iter().map(|s| s.name.clone()).collect(),
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let eval = evaluate(&self.model, &data.subset(&names), cfg.eval.threshold, cfg.model.variant_name()).map_err(py_err)?;
        Ok(metrics_dict(&eval.report.mean))
    }

    fn __repr__(&self) -> String {
        format!("Model(variant={:?}, step={}, parameters={})", self.variant(), self.checkpoint.step, self.num_parameters())
    }
}

/// Trains on the configured data and returns the model and per-step losses.
#[pyfunction]
fn train(config: PyConfig) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = config.inner;
    let data = load_data(&cfg.data, cfg.model.encoder.total_stride()).map_err(py_err)?;
    let (checkpoint, report) = train_run(&cfg, &data, None).map_err(py_err)?;
    Ok((PyModel::from_checkpoint(checkpoint)?, report.losses))
}

/// Writes a synthetic dataset under `out`; returns `(train, val)` names.
#[pyfunction]
#[pyo3(signature = (out, sequences=12, val_sequences=2, seed=0))]
fn synth(out: PathBuf, sequences: usize, val_sequences: usize, seed: u64) -> PyResult<(Vec<String>, Vec<String>)> {
    let mut spec = RunConfig::default().data.synth;
    spec.sequences = sequences;
    spec.val_sequences = val_sequences;
    spec.seed = seed;
    let data = synth_dataset(&spec).map_err(py_err)?;
    write_dataset(&out, &data.sequences, &data.train, &data.val).map_err(py_err)?;
    Ok((data.train, data.val))
}

/// Dice, IoU, recall and MAE of one probability map against a binary mask.
#[pyfunction]
#[pyo3(name = "segmentation_metrics", signature = (prob, gt, threshold=0.5))]
fn py_segmentation_metrics(prob: Vec<Vec<f64>>, gt: Vec<Vec<f64>>, threshold: f64) -> PyResult<HashMap<&'static str, f64>> {
    let m = segmentation_metrics(&to_tensor(&prob)?, &to_tensor(&gt)?, threshold).map_err(py_err)?;
    Ok(metrics_dict(&m))
}

/// Runs acceptance criteria; returns `(id, name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (ids=None))]
fn verify(py: Python<'_>, ids: Option<Vec<u8>>) -> Vec<(u8, &'static str, bool, String)> {
    let ids = ids.unwrap_or_else(|| CRITERIA.iter().map(|c| c.0).collect());
    py.detach(|| {
        ids.into_iter()
            .map(|id| {
                let r = run_criterion(id);
                (r.id, r.name, r.passed, r.detail)
            })
            .collect()
    })
}

#[pymodule]
fn stpfnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(py_segmentation_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
