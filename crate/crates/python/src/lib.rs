//! Python bindings: galleries, training, evaluation and one-off dialogs.

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gotcha_core::dialog_model::ModelDims;
use gotcha_core::evaluator;
use gotcha_core::feedback_sim::{self, DisclosureMode, DisclosureSchedule};
use gotcha_core::gallery::{self, GalleryRecord, SyntheticSpec};
use gotcha_core::retriever::{self, FeatureMatrix};
use gotcha_core::trainer::{self, EpisodeSeeds, Policy, TrainConfig, TrainError};
use gotcha_core::{Error, SeedStream};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::UnknownId(id) => PyKeyError::new_err(id),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::Other(e) => py_err(e),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Round-trip through JSON so Python receives plain dicts and lists.
fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_mode(mode: Option<&str>) -> PyResult<Option<DisclosureMode>> {
    mode.map(|m| m.parse().map_err(py_err)).transpose()
}

/// Searchable collection of faces: id, ±1 attributes and a feature vector.
#[pyclass(module = "gotcha", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Gallery {
    inner: gallery::Gallery,
}

#[pymethods]
impl Gallery {
    #[staticmethod]
    #[pyo3(signature = (n, attrs = 40, feat_dim = 256, noise = 0.1, seed = 0))]
    fn synthetic(n: usize, attrs: usize, feat_dim: usize, noise: f64, seed: u64) -> PyResult<Self> {
        let inner = gallery::gen_synthetic(SyntheticSpec {
            n,
            attrs,
            feat_dim,
            noise,
            seed,
        })
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Load a packed or `.jsonl` gallery.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: gallery::load_any(path).map_err(py_err)?,
        })
    }

    /// Build from a list of `{"id", "attributes", "features"}` dicts.
    #[staticmethod]
    fn from_records(py: Python<'_>, records: &Bound<'_, PyAny>) -> PyResult<Self> {
        let records: Vec<GalleryRecord> = from_py(py, records)?;
        let first = records
            .first()
            .ok_or_else(|| PyValueError::new_err("at least one record is required"))?;
        let (attrs, feat_dim) = (first.attributes.len(), first.features.len());
        Ok(Self {
            inner: gallery::Gallery::from_records(attrs, feat_dim, records).map_err(py_err)?,
        })
    }

    /// Write the packed format, or JSON lines for a `.jsonl` path.
    fn save(&self, path: &str) -> PyResult<()> {
        if path.ends_with(".jsonl") {
            gallery::write_jsonl(&self.inner, path).map_err(py_err)
        } else {
            gallery::save_packed(&self.inner, path).map_err(py_err)
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn attrs(&self) -> usize {
        self.inner.attrs()
    }

    #[getter]
    fn feat_dim(&self) -> usize {
        self.inner.feat_dim()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.inner.index_of(id)
    }

    fn record<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyAny>> {
        let r = self.inner.get(index).map_err(py_err)?;
        to_py(py, &r.to_record())
    }

    /// Leading `train_fraction` of the records and the remainder.
    #[pyo3(signature = (train_fraction = 0.9))]
    fn split(&self, train_fraction: f64) -> PyResult<(Gallery, Gallery)> {
        let (a, b) = gallery::split(&self.inner, train_fraction).map_err(py_err)?;
        Ok((Gallery { inner: a }, Gallery { inner: b }))
    }

    /// Nearest records to `query` as `(index, distance)` pairs.
    #[pyo3(signature = (query, k = 10, excluded = Vec::new()))]
    fn scan(&self, query: Vec<f64>, k: usize, excluded: Vec<usize>) -> PyResult<Vec<(usize, f64)>> {
        let r = retriever::scan_top_k(FeatureMatrix::of(&self.inner), &query, k, &excluded).map_err(py_err)?;
        Ok(r.neighbors.iter().map(|n| (n.index, n.distance)).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Gallery(len={}, attrs={}, feat_dim={})",
            self.inner.len(),
            self.inner.attrs(),
            self.inner.feat_dim()
        )
    }
}

/// Model parameters, optimizer state and the configuration that produced them.
#[pyclass(module = "gotcha", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: trainer::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    /// Freshly initialised model; `config` holds training settings by name.
    #[staticmethod]
    #[pyo3(signature = (attrs, features, hidden, config = None))]
    fn fresh(py: Python<'_>, attrs: usize, features: usize, hidden: usize, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = config_from(py, config)?;
        let dims = ModelDims::new(attrs, features, hidden).map_err(py_err)?;
        Ok(Self {
            inner: trainer::Checkpoint::fresh(cfg, dims).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::load_checkpoint(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        trainer::save_checkpoint(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    #[getter]
    fn dims<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.params.dims())
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.params.as_slice().to_vec()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let d = self.inner.params.dims();
        format!(
            "Checkpoint(attrs={}, features={}, hidden={}, epoch={})",
            d.attrs, d.features, d.hidden, self.inner.epoch
        )
    }
}

fn config_from(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<TrainConfig> {
    let cfg: TrainConfig = match config {
        Some(d) => from_py(py, d.as_any())?,
        None => TrainConfig::default(),
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Train on the leading split of `gallery`; returns the checkpoint and the
/// per-epoch metrics.
#[pyfunction]
#[pyo3(signature = (gallery, hidden = None, config = None, resume = None))]
fn train<'py>(
    py: Python<'py>,
    gallery: &Gallery,
    hidden: Option<usize>,
    config: Option<&Bound<'py, PyDict>>,
    resume: Option<&Checkpoint>,
) -> PyResult<(Checkpoint, Bound<'py, PyAny>)> {
    let cfg = config_from(py, config)?;
    let g = &gallery.inner;
    let state = match resume {
        Some(c) => c.inner.clone(),
        None => {
            let dims = ModelDims::new(g.attrs(), g.feat_dim(), hidden.unwrap_or(g.feat_dim())).map_err(py_err)?;
            trainer::Checkpoint::fresh(cfg.clone(), dims).map_err(py_err)?
        }
    };
    let epochs = cfg.epochs;
    let (state, metrics) = py.detach(|| -> Result<_, TrainError> {
        let (train_g, test_g) = gallery::split(g, state.config.train_fraction)?;
        let mut t = trainer::Trainer::new(state, &train_g, &test_g)?;
        let metrics = t.run(epochs, |_| {})?;
        Ok((t.into_checkpoint(), metrics))
    })
    .map_err(train_err)?;
    Ok((Checkpoint { inner: state }, to_py(py, &metrics)?))
}

/// Greedy held-out dialogs; `mode` overrides the checkpoint's disclosure mode.
#[pyfunction]
#[pyo3(signature = (checkpoint, gallery, episodes = 1000, seed = 0, mode = None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    gallery: &Gallery,
    episodes: usize,
    seed: u64,
    mode: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = parse_mode(mode)?;
    let report = py
        .detach(|| evaluator::eval_rounds(&checkpoint.inner, &gallery.inner, episodes, mode, seed))
        .map_err(py_err)?;
    to_py(py, &report)
}

/// One greedy dialog against the simulated witness.
#[pyfunction]
#[pyo3(signature = (checkpoint, gallery, seed = 0, target_id = None))]
fn simulate<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    gallery: &Gallery,
    seed: u64,
    target_id: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let g = &gallery.inner;
    let target = target_id
        .map(|id| g.index_of(id).ok_or_else(|| PyKeyError::new_err(id.to_owned())))
        .transpose()?;
    let cfg = &checkpoint.inner.config;
    let policy = Policy::Greedy {
        exclude_shown: !cfg.allow_repeats,
    };
    let rollout = trainer::run_dialog(
        &checkpoint.inner.params,
        g,
        &cfg.dialog(policy),
        EpisodeSeeds::new(SeedStream::new(seed)),
        target,
        g.len() >= 2,
    )
    .map_err(py_err)?;
    to_py(py, &rollout.transcript)
}

/// Percentile of `target` when `features` rows are ranked by distance to `query`.
#[pyfunction]
fn ranking_percentile(query: Vec<f64>, features: Vec<Vec<f32>>, target: usize) -> PyResult<f64> {
    let dim = features.first().map_or(query.len(), Vec::len);
    if features.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("feature rows differ in length"));
    }
    let flat: Vec<f32> = features.concat();
    let fm = FeatureMatrix::new(dim.max(1), &flat).map_err(py_err)?;
    evaluator::ranking_percentile(&query, fm, target).map_err(py_err)
}

/// `(upper, lower, expectation)` for the attribute-matching baseline.
#[pyfunction]
#[pyo3(signature = (gallery, target, flip_prob = 0.0, seed = 0))]
fn baseline_bounds(gallery: &Gallery, target: usize, flip_prob: f64, seed: u64) -> PyResult<(f64, f64, f64)> {
    let b = evaluator::baseline_bounds(&gallery.inner, target, flip_prob, seed).map_err(py_err)?;
    Ok((b.upper, b.lower, b.expectation))
}

/// Element-wise product of two ±1 attribute vectors.
#[pyfunction]
fn compute_relevance(candidate: Vec<i8>, target: Vec<i8>) -> PyResult<Vec<i8>> {
    Ok(feedback_sim::compute_relevance(&candidate, &target)
        .map_err(py_err)?
        .into_inner())
}

/// Hidden relevance entries per round for a comma-separated schedule.
#[pyfunction]
#[pyo3(signature = (attrs = 40, schedule = "0.5,0.3,0.2,0.1,0.0"))]
fn masked_counts(attrs: usize, schedule: &str) -> PyResult<Vec<usize>> {
    let s: DisclosureSchedule = schedule.parse().map_err(py_err)?;
    (0..s.rounds())
        .map(|t| s.masked_count(t, attrs).map_err(py_err))
        .collect()
}

#[pymodule]
fn gotcha(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Gallery>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_percentile, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(compute_relevance, m)?)?;
    m.add_function(wrap_pyfunction!(masked_counts, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
