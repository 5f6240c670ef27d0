//! Python bindings for the collectivekv core crate.
//!
//! Matrices cross the boundary as lists of rows. Errors map to `ValueError`,
//! except cache misses (`KeyError`) and I/O failures (`OSError`).

use std::path::PathBuf;

use collectivekv::attention::{self, AttentionMode, CtrModel, ModelConfig, PredictionBatch};
use collectivekv::cachesim::{self, StorageWidths};
use collectivekv::collective::{CollectiveConfig, Mode};
use collectivekv::config::RunConfig;
use collectivekv::numkit::{self, Matrix, Rng};
use collectivekv::synthdata::{self, SynthConfig};
use collectivekv::{analysis, checkpoint, experiment, Error};
use pyo3::exceptions::{PyKeyError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::CacheMiss(_) => PyKeyError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPyErr<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for collectivekv::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// `cols` is used when `rows` is empty.
fn to_matrix(rows: &[Vec<f64>], cols: usize) -> PyResult<Matrix> {
    let width = rows.first().map_or(cols, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Matrix::from_vec(rows.len(), width, rows.concat()).py()
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn batch(
    probabilities: Vec<f64>,
    labels: Vec<f64>,
    users: Option<Vec<u32>>,
) -> PyResult<PredictionBatch> {
    match users {
        Some(u) => PredictionBatch::new(probabilities, labels, u),
        None => PredictionBatch::single_user(probabilities, labels),
    }
    .py()
}

fn apply_settings(config: &mut RunConfig, settings: Option<&Bound<'_, PyDict>>) -> PyResult<()> {
    if let Some(d) = settings {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            config.set(&key, &v.str()?.to_cow()?).py()?;
        }
    }
    Ok(())
}

/// Run configuration built from `key=value` settings, as in the CLI.
#[pyclass(name = "RunConfig", module = "collectivekv")]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (**settings))]
    fn new(settings: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        apply_settings(&mut inner, settings)?;
        inner.validate().py()?;
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).py()
    }

    fn entries(&self) -> Vec<(String, String)> {
        self.inner.entries()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(hash={})", self.inner.hash())
    }
}

#[pyclass(name = "SynthDataset", module = "collectivekv")]
struct PySynthDataset {
    inner: synthdata::SynthDataset,
}

#[pymethods]
impl PySynthDataset {
    /// Generates a dataset; keyword arguments override the default settings.
    #[staticmethod]
    #[pyo3(signature = (**settings))]
    fn generate(settings: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = SynthConfig::default();
        if let Some(d) = settings {
            for (k, v) in d.iter() {
                let key: String = k.extract()?;
                if !cfg.set(&key, &v.str()?.to_cow()?).py()? {
                    return Err(PyValueError::new_err(format!(
                        "unknown dataset key '{key}'"
                    )));
                }
            }
        }
        Ok(Self {
            inner: synthdata::generate(&cfg).py()?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: synthdata::SynthDataset::load(&dir).py()?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).py()
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.users.len()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.item_embeddings.cols()
    }

    fn item_embeddings(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.item_embeddings)
    }

    /// `(group, history, targets, labels)` for one user.
    fn user(&self, id: u32) -> PyResult<(u32, Vec<u32>, Vec<u32>, Vec<u8>)> {
        let u = self
            .inner
            .user(id)
            .ok_or_else(|| PyKeyError::new_err(format!("unknown user {id}")))?;
        Ok((
            u.group,
            u.history.clone(),
            u.targets.clone(),
            u.labels.clone(),
        ))
    }

    fn history_matrix(&self, id: u32) -> PyResult<Vec<Vec<f64>>> {
        let u = self
            .inner
            .user(id)
            .ok_or_else(|| PyKeyError::new_err(format!("unknown user {id}")))?;
        Ok(to_rows(&self.inner.history_matrix(u)))
    }

    /// `(train_ids, eval_ids)`.
    fn split(&self, train_fraction: f64) -> PyResult<(Vec<u32>, Vec<u32>)> {
        let s = synthdata::split(&self.inner, train_fraction).py()?;
        Ok((s.train, s.eval))
    }
}

#[pyclass(name = "CtrModel", module = "collectivekv")]
struct PyCtrModel {
    inner: CtrModel,
}

impl PyCtrModel {
    fn history(&self, history: &[Vec<f64>]) -> PyResult<Matrix> {
        to_matrix(history, self.inner.embed_dim())
    }
}

#[pymethods]
impl PyCtrModel {
    /// Fresh model; `d_u=0` with `pool_size=0` is not allowed, use
    /// [`CtrModel.baseline`] for a full-KV host.
    #[new]
    #[pyo3(signature = (embed_dim, d_u, d_g, pool_size, attention="target", seed=0))]
    fn new(
        embed_dim: usize,
        d_u: usize,
        d_g: usize,
        pool_size: usize,
        attention: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let cc = CollectiveConfig::new(embed_dim, d_u, d_g, pool_size);
        let cfg = ModelConfig::new(cc, AttentionMode::parse(attention).py()?);
        Ok(Self {
            inner: CtrModel::init(cfg, &mut Rng::new(seed)).py()?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (embed_dim, attn_dim, attention="target", seed=0))]
    fn baseline(embed_dim: usize, attn_dim: usize, attention: &str, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::new(
            CollectiveConfig::baseline(embed_dim, attn_dim),
            AttentionMode::parse(attention).py()?,
        );
        Ok(Self {
            inner: CtrModel::init(cfg, &mut Rng::new(seed)).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).py()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    #[getter]
    fn attn_dim(&self) -> usize {
        self.inner.attn_dim()
    }

    /// Inference-mode `(keys, values, key_indices, value_indices)` of a history.
    /// Index lists are empty on sides without sharing.
    fn history_kv(
        &self,
        history: Vec<Vec<f64>>,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> {
        use collectivekv::collective::Side;
        let out = self
            .inner
            .history_kv(&self.history(&history)?, Mode::Inference)
            .py()?;
        let idx = |s| {
            out.trace
                .routing(s)
                .map(|m| m.indices.clone())
                .unwrap_or_default()
        };
        Ok((
            to_rows(&out.keys),
            to_rows(&out.values),
            idx(Side::Keys),
            idx(Side::Values),
        ))
    }

    /// Click probability of each target given one history.
    fn predict(&self, history: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let h = self.history(&history)?;
        let kv = self.inner.history_kv(&h, Mode::Inference).py()?;
        targets
            .iter()
            .map(|t| {
                self.inner
                    .score_target(t, &kv.keys, &kv.values, Mode::Inference)
                    .map(|s| s.probability)
                    .py()
            })
            .collect()
    }

    /// Encoded cache entry bytes for one user.
    #[pyo3(signature = (user_id, history, elem_width=4, idx_width=2))]
    fn prefill(
        &self,
        user_id: &str,
        history: Vec<Vec<f64>>,
        elem_width: u8,
        idx_width: u8,
    ) -> PyResult<Vec<u8>> {
        let widths = StorageWidths {
            elem: cachesim::ElemWidth::from_bytes(elem_width).py()?,
            idx: cachesim::IdxWidth::from_bytes(idx_width).py()?,
        };
        let entry =
            cachesim::prefill(user_id, &self.history(&history)?, &self.inner, widths).py()?;
        Ok(entry.encode())
    }

    /// Scores a target against an encoded cache entry.
    fn decode(&self, entry: Vec<u8>, target: Vec<f64>) -> PyResult<f64> {
        let e = cachesim::CacheEntry::decode_bytes(&entry).py()?;
        let (k, v) = cachesim::gather_entry(&e, &self.inner).py()?;
        let s = self
            .inner
            .score_target(&target, &k, &v, Mode::Inference)
            .py()?;
        Ok(s.probability)
    }
}

/// Trains one arm on a freshly generated dataset. Returns the model and its
/// eval metrics.
#[pyfunction]
#[pyo3(signature = (config=None, **settings))]
fn train(
    config: Option<PyRunConfig>,
    settings: Option<&Bound<'_, PyDict>>,
) -> PyResult<(PyCtrModel, std::collections::BTreeMap<String, f64>)> {
    let mut cfg = config.map(|c| c.inner).unwrap_or_default();
    apply_settings(&mut cfg, settings)?;
    cfg.validate().py()?;
    let data = experiment::prepare_data(&cfg).py()?;
    let run_id = cfg.resolved_run_id("train");
    let arm = experiment::run_arm(&cfg, &data, 0, &run_id, |_| {}).py()?;
    let r = &arm.report;
    let metrics = [
        ("auc", r.auc),
        ("gauc", r.gauc),
        ("logloss", r.logloss),
        ("compression_rate", r.compression_rate),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok((PyCtrModel { inner: arm.model }, metrics))
}

#[pyfunction]
#[pyo3(signature = (probabilities, labels))]
fn auc(probabilities: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    attention::auc(&batch(probabilities, labels, None)?).py()
}

#[pyfunction]
fn gauc(probabilities: Vec<f64>, labels: Vec<f64>, users: Vec<u32>) -> PyResult<f64> {
    attention::gauc(&batch(probabilities, labels, Some(users))?).py()
}

#[pyfunction]
fn logloss(probabilities: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    attention::bce_loss(&batch(probabilities, labels, None)?).py()
}

/// Storage ratio of a collective entry to a full-KV entry of the same length.
#[pyfunction]
#[pyo3(signature = (d_u, attn_dim, elem_width=4, idx_width=2))]
fn compression_rate(d_u: usize, attn_dim: usize, elem_width: u8, idx_width: u8) -> PyResult<f64> {
    let widths = StorageWidths {
        elem: cachesim::ElemWidth::from_bytes(elem_width).py()?,
        idx: cachesim::IdxWidth::from_bytes(idx_width).py()?,
    };
    Ok(cachesim::compression_rate_for(d_u, attn_dim, widths))
}

/// Descending singular values of a tall matrix.
#[pyfunction]
fn singular_values(rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(numkit::svd(&to_matrix(&rows, 0)?, false)
        .py()?
        .singular_values)
}

/// `(principal, residual, retained_fraction)` of a rank-`k` split.
#[pyfunction]
fn principal_residual(
    rows: Vec<Vec<f64>>,
    k: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    let s = analysis::principal_residual_split(&to_matrix(&rows, 0)?, k).py()?;
    Ok((
        to_rows(&s.principal),
        to_rows(&s.residual),
        s.retained_fraction,
    ))
}

#[pyfunction]
fn overlap_ratio(a: Vec<u32>, b: Vec<u32>) -> PyResult<f64> {
    analysis::overlap_ratio(&a, &b).py()
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("vectors differ in length"));
    }
    numkit::cosine(&a, &b)
        .ok_or_else(|| PyValueError::new_err("cosine is undefined for a zero vector"))
}

#[pymodule]
#[pyo3(name = "collectivekv")]
fn collectivekv_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PySynthDataset>()?;
    m.add_class::<PyCtrModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(gauc, m)?)?;
    m.add_function(wrap_pyfunction!(logloss, m)?)?;
    m.add_function(wrap_pyfunction!(compression_rate, m)?)?;
    m.add_function(wrap_pyfunction!(singular_values, m)?)?;
    m.add_function(wrap_pyfunction!(principal_residual, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    Ok(())
}
