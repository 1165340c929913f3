//! Python bindings: load a model, fuse sets of features, stream probes.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use setfuse_core::io::{load_checkpoint, load_features, save_checkpoint, save_features, FeatureLayout};
use setfuse_core::model::FusionModel;
use setfuse_core::numeric::Tensor;
use setfuse_core::stream::FusionSession;
use setfuse_core::style::FeatureRecord;
use setfuse_core::train::TrainConfig;

/// `(subject, feature, style)` as seen from Python.
type RawRecord = (u32, Vec<f32>, Vec<f32>);

fn err(e: setfuse_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn records(features: Vec<Vec<f32>>, styles: Vec<Vec<f32>>) -> PyResult<Vec<FeatureRecord>> {
    if features.len() != styles.len() {
        return Err(PyValueError::new_err(format!(
            "{} features but {} style rows",
            features.len(),
            styles.len()
        )));
    }
    Ok(features
        .into_iter()
        .zip(styles)
        .map(|(f, s)| FeatureRecord::new(0, f, s))
        .collect())
}

/// A fusion model.
#[pyclass(frozen)]
struct Model {
    inner: FusionModel,
}

#[pymethods]
impl Model {
    /// Untrained model with the default training architecture.
    #[staticmethod]
    #[pyo3(signature = (seed=0, num_centers=None, feature_dim=None))]
    fn random(seed: u64, num_centers: Option<usize>, feature_dim: Option<usize>) -> PyResult<Self> {
        let mut cfg = TrainConfig::default().model;
        cfg.num_centers = num_centers.unwrap_or(cfg.num_centers);
        cfg.feature_dim = feature_dim.unwrap_or(cfg.feature_dim);
        Ok(Self {
            inner: FusionModel::new_random(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn num_centers(&self) -> usize {
        self.inner.config.num_centers
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.config.feature_dim
    }

    /// Style values per record: taps × (μ, σ) × channels.
    #[getter]
    fn style_len(&self) -> usize {
        self.inner.config.style_len()
    }

    #[getter]
    fn max_batch(&self) -> usize {
        self.inner.config.max_batch
    }

    /// Fuses one batch. Returns `(fused, weights, assignment)` with weights
    /// `[M][C_f]` and assignment `[M][N]`.
    #[allow(clippy::type_complexity)]
    fn fuse(
        &self,
        features: Vec<Vec<f32>>,
        styles: Vec<Vec<f32>>,
    ) -> PyResult<(Vec<f32>, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let out = self.inner.fuse(&records(features, styles)?).map_err(err)?;
        Ok((out.fused, rows(&out.weights.p), rows(&out.assignment.a)))
    }

    #[pyo3(signature = (id=None))]
    fn session(&self, id: Option<u64>) -> Session {
        Session {
            inner: FusionSession::open(id.unwrap_or(0), &self.inner.config),
        }
    }
}

/// Streaming state of one probe.
#[pyclass]
struct Session {
    inner: FusionSession,
}

#[pymethods]
impl Session {
    /// Adds a batch; returns its assignment map `[M][N]`.
    fn push(&mut self, model: &Model, features: Vec<Vec<f32>>, styles: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let a = self.inner.update(&records(features, styles)?, &model.inner).map_err(err)?;
        Ok(rows(&a.a))
    }

    /// Fused feature and per-channel weights `[M][C_f]` of everything pushed so far.
    fn finalize(&self, model: &Model) -> PyResult<(Vec<f32>, Vec<Vec<f32>>)> {
        let out = self.inner.finalize(&model.inner).map_err(err)?;
        Ok((out.fused, rows(&out.weights.p)))
    }

    #[getter]
    fn items_seen(&self) -> u64 {
        self.inner.items_seen()
    }

    #[getter]
    fn state_bytes(&self) -> usize {
        self.inner.state_bytes()
    }

    fn snapshot<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_snapshot())
    }

    #[staticmethod]
    fn restore(bytes: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: FusionSession::from_snapshot(bytes).map_err(err)?,
        })
    }
}

/// Reads a CAFF file as a list of `(subject, feature, style)`.
#[pyfunction]
fn read_features(path: PathBuf) -> PyResult<Vec<RawRecord>> {
    let file = load_features(&path).map_err(err)?;
    Ok(file
        .records
        .into_iter()
        .map(|r| (r.subject, r.feature, r.style_stats))
        .collect())
}

#[pyfunction]
fn write_features(
    path: PathBuf,
    records: Vec<RawRecord>,
    style_channels: usize,
    num_taps: usize,
) -> PyResult<()> {
    let feature_dim = records.first().map_or(0, |r| r.1.len());
    let layout = FeatureLayout {
        feature_dim,
        style_channels,
        num_taps,
    };
    let records: Vec<FeatureRecord> = records
        .into_iter()
        .map(|(s, f, st)| FeatureRecord::new(s, f, st))
        .collect();
    save_features(&path, &layout, &records).map_err(err)
}

#[pymodule]
fn setfuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    Ok(())
}
