//! Python bindings: synthetic videos, backbones, the distillation loop and the
//! precision metric. Tensors cross the boundary as flat lists of floats in
//! row-major order, with shapes reported alongside.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tdino::checkpoint::{Checkpoint, RngState};
use tdino::distill::{self, DistillConfig, LossVariant, MomentumSchedule};
use tdino::downstream;
use tdino::models::{self, BackboneSpec, Family};
use tdino::numerics::{Tape, Tensor};
use tdino::synthdata::{self, SyntheticVideo, CHANNELS, FRAME_LEN, FRAME_SIZE};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A procedurally generated driving clip with one action label per frame.
#[pyclass(name = "Video", module = "tdino_py", frozen)]
struct PyVideo {
    inner: SyntheticVideo,
}

#[pymethods]
impl PyVideo {
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn fps(&self) -> u32 {
        self.inner.fps
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Per-frame action ids in `0..7`.
    fn labels(&self) -> Vec<u8> {
        self.inner.labels().to_vec()
    }

    /// One frame as a flat `3 × 32 × 32` list.
    fn frame(&self, index: usize) -> PyResult<Vec<f32>> {
        if index >= self.inner.len() {
            return Err(PyValueError::new_err(format!("frame {index} out of range for {} frames", self.inner.len())));
        }
        Ok(self.inner.frame(index).to_vec())
    }

    /// `length` consecutive frames starting at `start`, flattened.
    fn clip(&self, start: usize, length: usize) -> PyResult<Vec<f64>> {
        if length == 0 || start + length > self.inner.len() {
            return Err(PyValueError::new_err(format!("clip [{start}, {}) exceeds {} frames", start + length, self.inner.len())));
        }
        Ok(self.inner.clip_tensor(start, length).into_data())
    }

    fn __repr__(&self) -> String {
        format!("Video(seed={}, frames={})", self.inner.seed, self.inner.len())
    }
}

/// A video encoder mapping `frames × 3 × 32 × 32` clips to fixed-size embeddings.
#[pyclass(name = "Backbone", module = "tdino_py")]
struct PyBackbone {
    inner: models::Backbone,
}

#[pymethods]
impl PyBackbone {
    #[new]
    #[pyo3(signature = (family, frames, seed = 0, embed_dim = None))]
    fn new(family: &str, frames: usize, seed: u64, embed_dim: Option<usize>) -> PyResult<Self> {
        let family: Family = family.parse().map_err(value_err)?;
        let mut spec = BackboneSpec::new(family, frames);
        if let Some(d) = embed_dim {
            spec.embed_dim = d;
        }
        Ok(Self { inner: models::build_backbone(&spec, seed).map_err(value_err)? })
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.spec.family.name()
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.spec.frames
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.spec.embed_dim
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// SHA-256 over parameter names, shapes and values, as hex.
    fn fingerprint(&self) -> String {
        self.inner.params.fingerprint().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Embeds a batch of flattened clips; returns one list per clip.
    fn embed(&self, py: Python<'_>, clips: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let shape = [self.inner.spec.frames, CHANNELS, FRAME_SIZE, FRAME_SIZE];
        let tensors = clips
            .into_iter()
            .map(|c| Tensor::new(shape.to_vec(), c).map_err(value_err))
            .collect::<PyResult<Vec<_>>>()?;
        let backbone = &self.inner;
        let z = py.detach(|| {
            let refs: Vec<&Tensor> = tensors.iter().collect();
            backbone.embed_batch(&refs)
        });
        let z = z.map_err(value_err)?;
        Ok(z.data().chunks(self.inner.spec.embed_dim).map(<[f64]>::to_vec).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let zero = RngState { seed: [0; 32], stream: 0, word_pos: 0 };
        Checkpoint::from_backbone(&self.inner, 0, zero, [0; 32])
            .save(&path)
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner: ck.backbone().map_err(value_err)? })
    }

    fn __repr__(&self) -> String {
        format!("Backbone({}, frames={}, embed_dim={})", self.family(), self.frames(), self.embed_dim())
    }
}

#[pyfunction]
fn generate_video(seed: u64, length: usize) -> PyResult<PyVideo> {
    Ok(PyVideo { inner: synthdata::generate_video(seed, length).map_err(value_err)? })
}

#[pyfunction]
fn generate_dataset(master_seed: u64, n_videos: usize, length: usize) -> PyResult<Vec<PyVideo>> {
    let videos = synthdata::generate_dataset(master_seed, n_videos, length).map_err(value_err)?;
    Ok(videos.into_iter().map(|inner| PyVideo { inner }).collect())
}

/// Frame indices the teacher keeps from its `t + t_pred` window.
#[pyfunction]
fn downsample_indices(t: usize, t_pred: usize) -> PyResult<Vec<usize>> {
    if t == 0 {
        return Err(PyValueError::new_err("t must be positive"));
    }
    Ok(distill::downsample_indices(t, t_pred))
}

#[pyfunction]
fn momentum_at(m_start: f64, m_end: f64, total_steps: usize, step: usize) -> PyResult<f64> {
    let schedule = MomentumSchedule::new(m_start, m_end, total_steps).map_err(value_err)?;
    Ok(distill::momentum_at(&schedule, step))
}

/// Distillation loss between student and teacher embedding batches.
#[pyfunction]
#[pyo3(signature = (student, teacher, variant = "cosine"))]
fn fpd_loss(student: Vec<Vec<f64>>, teacher: Vec<Vec<f64>>, variant: &str) -> PyResult<f64> {
    let loss: LossVariant = variant.parse().map_err(value_err)?;
    let dim = student.first().map(Vec::len).unwrap_or(0);
    let to_tensor = |rows: Vec<Vec<f64>>| {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(PyValueError::new_err("rows must share one length"));
        }
        Tensor::new(vec![n, dim], rows.concat()).map_err(value_err)
    };
    let (s, t) = (to_tensor(student)?, to_tensor(teacher)?);
    let cfg = DistillConfig { loss, ..DistillConfig::default() };
    let mut tape = Tape::new();
    let sv = tape.constant(&s);
    let l = distill::fpd_loss(&mut tape, sv, &t, &cfg, &Tensor::zeros(&[dim])).map_err(value_err)?;
    Ok(tape.value(l)[0])
}

/// Macro precision plus per-class scores and the confusion matrix.
#[pyfunction]
#[pyo3(signature = (predictions, labels, classes = synthdata::NUM_ACTIONS))]
fn evaluate_precision<'py>(py: Python<'py>, predictions: Vec<usize>, labels: Vec<usize>, classes: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = downstream::evaluate_precision(&predictions, &labels, classes).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("macro_precision", r.macro_precision)?;
    d.set_item("per_class", r.per_class)?;
    d.set_item("confusion", r.confusion)?;
    d.set_item("n_frames", r.n_frames)?;
    Ok(d)
}

/// Pretrains a student on the given videos; returns the student and the per-step log.
#[pyfunction]
#[pyo3(signature = (videos, family, t, t_pred, loss = "cosine", steps = 50, batch_size = 8, learning_rate = 0.05, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn pretrain<'py>(
    py: Python<'py>,
    videos: Vec<PyRef<'py, PyVideo>>,
    family: &str,
    t: usize,
    t_pred: usize,
    loss: &str,
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> PyResult<(PyBackbone, Vec<Bound<'py, PyDict>>)> {
    let spec = BackboneSpec::new(family.parse().map_err(value_err)?, t);
    let cfg = DistillConfig {
        t,
        t_pred,
        loss: loss.parse().map_err(value_err)?,
        batch_size,
        learning_rate,
        epochs: 1,
        steps_per_epoch: steps,
        ..DistillConfig::default()
    };
    let schedule = MomentumSchedule::new(0.996, 1.0, steps).map_err(value_err)?;
    let owned: Vec<SyntheticVideo> = videos.iter().map(|v| v.inner.clone()).collect();
    let outcome = py.detach(|| distill::pretrain(&spec, &owned, &cfg, &schedule, seed)).map_err(value_err)?;
    let log = outcome
        .log
        .iter()
        .map(|row| {
            let d = PyDict::new(py);
            d.set_item("step", row.step)?;
            d.set_item("loss", row.loss)?;
            d.set_item("momentum", row.momentum)?;
            d.set_item("embed_std", row.embed_std)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyBackbone { inner: outcome.pair.student }, log))
}

#[pymodule]
fn tdino_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVideo>()?;
    m.add_class::<PyBackbone>()?;
    m.add_function(wrap_pyfunction!(generate_video, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(downsample_indices, m)?)?;
    m.add_function(wrap_pyfunction!(momentum_at, m)?)?;
    m.add_function(wrap_pyfunction!(fpd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_precision, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add("NUM_ACTIONS", synthdata::NUM_ACTIONS)?;
    m.add("FRAME_LEN", FRAME_LEN)?;
    m.add("FAMILIES", Family::ALL.iter().map(|f| f.name()).collect::<Vec<_>>())?;
    Ok(())
}
