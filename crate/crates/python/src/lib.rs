//! Python bindings. Matrices cross the boundary as nested lists of floats and
//! structured results (metrics, configs) as plain dicts.

use std::path::PathBuf;

use hgav::data::{self, SynthMode, SynthSpec};
use hgav::graph::{self, EdgeRule, EdgeRules};
use hgav::layers::{self, FusionMode, HgnnModel, ModalityMask, ModelConfig, PoolingMode};
use hgav::metrics;
use hgav::tensor::{rng_from_seed, Tensor};
use hgav::training::{self, Checkpoint, TrainConfig};
use hgav::Error;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Path { .. } => PyOSError::new_err(e.to_string()),
        _ if e.is_numeric() => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for hgav::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Round-trips a serializable value through JSON into Python objects.
fn to_pyobject<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Reads an optional dict (or None) into a serde type, defaults filling gaps.
fn from_dict<T: serde::de::DeserializeOwned + Default>(py: Python<'_>, value: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    match value {
        None => Ok(T::default()),
        Some(v) if v.is_none() => Ok(T::default()),
        Some(v) => {
            let text: String = py.import("json")?.call_method1("dumps", (v,))?.extract()?;
            serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
        }
    }
}

type Matrix = Vec<Vec<f64>>;
type HistoryTuple = (u64, f64, f64, Option<f64>, Option<f64>);

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f32>> {
    let t = Tensor::<f64>::from_rows(&rows).py()?;
    Ok(t.cast())
}

fn nested(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&x| x as f64).collect()).collect()
}

fn parse_enum<T: serde::de::DeserializeOwned>(kind: &str, name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_owned()))
        .map_err(|_| PyValueError::new_err(format!("unknown {kind} `{name}`")))
}

#[pyfunction]
#[pyo3(signature = (n, span, dilation=1))]
fn temporal_edges(n: usize, span: usize, dilation: usize) -> PyResult<Vec<(usize, usize)>> {
    let rule = EdgeRule::new(span, dilation);
    rule.validate().py()?;
    Ok(graph::temporal_edges(n, rule).undirected_edges())
}

#[pyfunction]
#[pyo3(signature = (n_audio, n_video, span, dilation=1))]
fn cross_modal_edges(n_audio: usize, n_video: usize, span: usize, dilation: usize) -> PyResult<Vec<(usize, usize)>> {
    let rule = EdgeRule::new(span, dilation);
    rule.validate().py()?;
    Ok(graph::cross_modal_edges(n_audio, n_video, rule).edges())
}

/// `D^-1/2 (A + I) D^-1/2` for an undirected edge list on `n` nodes.
#[pyfunction]
fn normalize_adjacency(n: usize, edges: Vec<(usize, usize)>) -> PyResult<Vec<Vec<f64>>> {
    if let Some(&(i, j)) = edges.iter().find(|(i, j)| *i >= n || *j >= n) {
        return Err(PyValueError::new_err(format!("edge ({i}, {j}) out of range for {n} nodes")));
    }
    let adj = graph::BinaryAdjacency::from_edges(n, n, edges.iter().flat_map(|&(i, j)| [(i, j), (j, i)]));
    let t = graph::normalize_adjacency::<f64>(&adj).py()?;
    Ok((0..n).map(|i| t.row(i).to_vec()).collect())
}

#[pyfunction]
#[pyo3(signature = (probs, targets, gamma=2.0))]
fn focal_loss(probs: Vec<f64>, targets: Vec<bool>, gamma: f64) -> PyResult<f64> {
    if probs.len() != targets.len() {
        return Err(PyValueError::new_err("probs and targets differ in length"));
    }
    training::focal_loss_value(&probs, &targets, gamma).py()
}

#[pyfunction]
#[pyo3(signature = (iteration, config=None))]
fn lr_at(py: Python<'_>, iteration: u64, config: Option<&Bound<'_, PyAny>>) -> PyResult<f64> {
    let cfg: TrainConfig = from_dict(py, config)?;
    Ok(training::lr_at(iteration, &cfg))
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(metrics::average_precision(&scores, &labels))
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(metrics::roc_auc(&scores, &labels))
}

#[pyfunction]
fn write_container(path: PathBuf, audio: Vec<Vec<f64>>, video: Vec<Vec<f64>>) -> PyResult<()> {
    let c = data::FeatureContainer::new(matrix(audio)?, matrix(video)?).py()?;
    data::write_container(&path, &c).py()
}

#[pyfunction]
fn read_container(path: PathBuf) -> PyResult<(Matrix, Matrix)> {
    let c = data::read_container(&path).py()?;
    Ok((nested(&c.audio), nested(&c.video)))
}

/// Writes a synthetic dataset to `out_dir`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, spec=None))]
fn generate_synthetic(py: Python<'_>, out_dir: PathBuf, spec: Option<&Bound<'_, PyAny>>) -> PyResult<PathBuf> {
    let spec: SynthSpec = from_dict(py, spec)?;
    data::generate_synthetic(&spec).py()?.write(&out_dir).py()
}

/// Per-audio-node attention summary (max incoming weight, min-max rescaled).
#[pyfunction]
fn attention_node_scores(alpha: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(layers::attention_node_scores(&matrix(alpha)?))
}

/// In-memory dataset of clip graphs.
#[pyclass(frozen)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    /// Loads a manifest; `edges` is a dict shaped like the config's `edges`.
    #[staticmethod]
    #[pyo3(signature = (manifest, edges=None))]
    fn load(py: Python<'_>, manifest: PathBuf, edges: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let rules: EdgeRules = from_dict(py, edges)?;
        Ok(Dataset {
            inner: data::load_dataset(&manifest, &rules).py()?,
        })
    }

    /// Generates a synthetic dataset in memory.
    #[staticmethod]
    #[pyo3(signature = (spec=None, edges=None))]
    fn synthetic(py: Python<'_>, spec: Option<&Bound<'_, PyAny>>, edges: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let spec: SynthSpec = from_dict(py, spec)?;
        let rules: EdgeRules = from_dict(py, edges)?;
        Ok(Dataset {
            inner: data::generate_synthetic(&spec).py()?.to_dataset(&rules).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.samples.iter().map(|s| s.id.clone()).collect()
    }

    fn labels(&self, id: &str) -> PyResult<Vec<bool>> {
        let s = self
            .inner
            .find(id)
            .ok_or_else(|| PyValueError::new_err(format!("no item `{id}`")))?;
        Ok(s.labels.clone())
    }
}

#[pyclass(frozen)]
struct Model {
    inner: HgnnModel<f32>,
    edges: EdgeRules,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (d_audio, d_video, n_audio, n_video, num_classes, hidden=512, layers=4, pooling="learned", fusion="attention", modality="both", seed=0, edges=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        py: Python<'_>,
        d_audio: usize,
        d_video: usize,
        n_audio: usize,
        n_video: usize,
        num_classes: usize,
        hidden: usize,
        layers: usize,
        pooling: &str,
        fusion: &str,
        modality: &str,
        seed: u64,
        edges: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            d_audio,
            d_video,
            n_audio,
            n_video,
            hidden,
            layers,
            num_classes,
            pooling: parse_enum::<PoolingMode>("pooling mode", pooling)?,
            fusion: parse_enum::<FusionMode>("fusion mode", fusion)?,
            modality: parse_enum::<ModalityMask>("modality", modality)?,
        };
        Ok(Model {
            inner: HgnnModel::new(config, &mut rng_from_seed(seed)).py()?,
            edges: from_dict(py, edges)?,
        })
    }

    /// Loads the model stored in a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).py()?;
        Ok(Model {
            inner: ck.model,
            edges: ck.train.edges,
        })
    }

    fn count_params(&self) -> usize {
        self.inner.count_params()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    /// Class probabilities and per-layer attention matrices for one clip.
    fn predict(&self, audio: Vec<Vec<f64>>, video: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Matrix>)> {
        let g = graph::build_hetero_graph(matrix(audio)?, matrix(video)?, &self.edges).py()?;
        let pred = self.inner.predict(&g).py()?;
        Ok((
            pred.probs.iter().map(|&p| p as f64).collect(),
            pred.attention.iter().map(nested).collect(),
        ))
    }

    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset) -> PyResult<Bound<'py, PyAny>> {
        let r = metrics::evaluate(&self.inner, &dataset.inner.samples).py()?;
        to_pyobject(py, &r)
    }
}

#[pyclass]
struct Trainer {
    inner: training::Trainer,
    dataset: Py<Dataset>,
}

#[pymethods]
impl Trainer {
    /// `config` is a dict of training options; missing keys take defaults.
    #[new]
    #[pyo3(signature = (dataset, config=None))]
    fn new(py: Python<'_>, dataset: Py<Dataset>, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: TrainConfig = from_dict(py, config)?;
        let inner = training::Trainer::new(&dataset.get().inner, &cfg).py()?;
        Ok(Trainer { inner, dataset })
    }

    #[staticmethod]
    fn resume(dataset: Py<Dataset>, checkpoint: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&checkpoint).py()?;
        let inner = training::Trainer::resume(&dataset.get().inner, ck).py()?;
        Ok(Trainer { inner, dataset })
    }

    /// One optimizer step; returns the loss.
    fn step(&mut self) -> PyResult<f64> {
        let row = self.inner.step(&self.dataset.get().inner).py()?;
        Ok(row.loss)
    }

    #[pyo3(signature = (until=None))]
    fn run(&mut self, until: Option<u64>) -> PyResult<()> {
        self.inner.run(&self.dataset.get().inner, until).py()
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration
    }

    /// Loss history since construction as `(iter, loss, lr, map, roc_auc)`.
    #[getter]
    fn history(&self) -> Vec<HistoryTuple> {
        self.inner
            .history
            .iter()
            .map(|r| (r.iter, r.loss, r.lr, r.map, r.roc_auc))
            .collect()
    }

    /// Metrics on the held-out split.
    fn evaluate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let r = self.inner.evaluate(&self.dataset.get().inner).py()?;
        to_pyobject(py, &r)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).py()
    }

    fn model(&self) -> Model {
        Model {
            inner: self.inner.model.clone(),
            edges: self.inner.config.edges,
        }
    }
}

/// Trains one model per seed and returns the aggregate summary dict.
#[pyfunction]
#[pyo3(signature = (dataset, seeds, config=None))]
fn run_seeds<'py>(py: Python<'py>, dataset: &Dataset, seeds: Vec<u64>, config: Option<&Bound<'_, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TrainConfig = from_dict(py, config)?;
    let summary = training::run_seeds(&dataset.inner, &cfg, &seeds, |_, _| Ok(())).py()?;
    to_pyobject(py, &summary)
}

/// Default training configuration as a dict.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_pyobject(py, &TrainConfig::default())
}

#[pyfunction]
fn synth_modes() -> Vec<&'static str> {
    SynthMode::NAMES.to_vec()
}

#[pymodule]
fn hgav_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(temporal_edges, m)?)?;
    m.add_function(wrap_pyfunction!(cross_modal_edges, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_adjacency, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(write_container, m)?)?;
    m.add_function(wrap_pyfunction!(read_container, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(attention_node_scores, m)?)?;
    m.add_function(wrap_pyfunction!(run_seeds, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(synth_modes, m)?)?;
    Ok(())
}
