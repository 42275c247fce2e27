//! Python bindings: tensors and core ops, metrics, frame sampling, synthetic
//! clips and the detector model.

use std::path::PathBuf;

use cast_core::config::KvSection;
use cast_core::model::{CastConfig, CastModel, EvalLogitMode, ModelOutput, Variant};
use cast_core::preprocess::{self, FrameClip, Label, Manifest};
use cast_core::runner::{self, EvalSplit};
use cast_core::synth::{self, ArtifactSpec, SynthConfig};
use cast_core::train::{self, EvalReport};
use cast_core::{CastError as CoreError, DType, Graph, Real, Tensor as CoreTensor};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(cast_py, CastError, PyException, "Any error raised by the core library.");

fn err(e: CoreError) -> PyErr {
    CastError::new_err(e.to_string())
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for cast_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(|e: String| CastError::new_err(e))
}

/// Dense row-major f64 tensor.
#[pyclass(module = "cast_py", from_py_object)]
#[derive(Clone)]
pub struct Tensor {
    inner: CoreTensor<f64>,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: CoreTensor::from_vec(&shape, data).py()? })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self { inner: CoreTensor::zeros(&shape) }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn t(x: &Tensor) -> CoreTensor<f64> {
    x.inner.clone()
}

fn wrap(inner: CoreTensor<f64>) -> Tensor {
    Tensor { inner }
}

/// Runs a one-op graph over constant inputs and returns its value.
fn eval_op(
    inputs: &[&Tensor],
    op: impl FnOnce(&mut Graph<f64>, &[cast_core::Var]) -> cast_core::Result<cast_core::Var>,
) -> PyResult<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.constant(t(x))).collect();
    let out = op(&mut g, &vars).py()?;
    Ok(wrap(g.value(out).clone()))
}

#[pyfunction]
fn matmul(a: &Tensor, b: &Tensor) -> PyResult<Tensor> {
    eval_op(&[a, b], |g, v| g.matmul(v[0], v[1]))
}

#[pyfunction]
fn relu(x: &Tensor) -> PyResult<Tensor> {
    eval_op(&[x], |g, v| g.relu(v[0]))
}

/// Softmax over the last axis.
#[pyfunction]
fn softmax(x: &Tensor) -> PyResult<Tensor> {
    eval_op(&[x], |g, v| g.softmax_last(v[0]))
}

#[pyfunction]
#[pyo3(signature = (x, gamma, beta, eps = cast_core::nn::LAYER_NORM_EPS))]
fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> PyResult<Tensor> {
    eval_op(&[x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], eps))
}

/// `x` is `[C, H, W]`, `kernel` is `[C_out, C, k, k]`.
#[pyfunction]
#[pyo3(signature = (x, kernel, bias, stride = 1, pad = 0))]
fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> PyResult<Tensor> {
    eval_op(&[x, kernel, bias], |g, v| g.conv2d(v[0], v[1], v[2], stride, pad))
}

/// Mean binary cross-entropy of logits against 0/1 targets.
#[pyfunction]
fn bce_with_logits(logits: Vec<f64>, targets: Vec<f64>) -> PyResult<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(CastError::new_err(format!("{} logits vs {} targets", logits.len(), targets.len())));
    }
    Ok(logits.iter().zip(&targets).map(|(&z, &y)| train::bce_with_logits(z, y)).sum::<f64>() / logits.len() as f64)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(train::roc_auc(&scores, &labels).py()?.auc)
}

/// Fraction correct at threshold 0.5.
#[pyfunction]
fn accuracy(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(train::accuracy(&scores, &labels).py()?.accuracy)
}

#[pyfunction]
fn compute_interval(f_orig: f64, r: f64) -> PyResult<usize> {
    preprocess::compute_interval(f_orig, r).py()
}

#[pyfunction]
fn select_frames(length: usize, delta: usize, target_count: usize) -> PyResult<Vec<usize>> {
    preprocess::select_frames(length, delta, target_count).py()
}

/// A normalized clip of `[frames, 3, height, width]` pixels.
#[pyclass(module = "cast_py", from_py_object)]
#[derive(Clone)]
pub struct Clip {
    inner: FrameClip,
}

#[pymethods]
impl Clip {
    /// One synthetic clip with the default flicker artifact when `fake`.
    #[staticmethod]
    #[pyo3(signature = (seed, fake, frames = 16, height = 32, width = 32))]
    fn synthetic(seed: u64, fake: bool, frames: usize, height: usize, width: usize) -> PyResult<Self> {
        let label = if fake { Label::Fake } else { Label::Real };
        let spec = ArtifactSpec::default();
        Ok(Self { inner: synth::generate_clip(seed, label, &spec, frames, height, width).py()? })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: preprocess::read_clip(&path).py()? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        preprocess::write_clip(&path, &self.inner).py()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.frames.shape().to_vec()
    }

    /// `True` for fake, `False` for real, `None` when unlabeled.
    #[getter]
    fn fake(&self) -> Option<bool> {
        self.inner.label.map(|l| l == Label::Fake)
    }

    #[getter]
    fn source_id(&self) -> String {
        self.inner.source_id.clone()
    }

    fn frames(&self) -> Tensor {
        wrap(self.inner.frames.cast())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

enum Net {
    F32(CastModel<f32>),
    F64(CastModel<f64>),
}

/// The spatio-temporal detector.
#[pyclass(module = "cast_py")]
pub struct Model {
    net: Net,
}

fn output_dict<'py, T: Real>(py: Python<'py>, o: ModelOutput<T>) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("clip_logit", o.clip_logit.f64())?;
    d.set_item("frame_logits", o.frame_logits.to_f64_vec())?;
    d.set_item("score", o.score(EvalLogitMode::FrameMean))?;
    let attention = o.attention.map(|a| wrap(a.cast()));
    d.set_item("attention", attention)?;
    d.set_item("pooled", o.pooled.to_f64_vec())?;
    Ok(d)
}

impl Model {
    fn config_ref(&self) -> &CastConfig {
        match &self.net {
            Net::F32(m) => &m.config,
            Net::F64(m) => &m.config,
        }
    }
}

#[pymethods]
impl Model {
    /// `config` is the text of a `[model]` section; empty means defaults.
    #[new]
    #[pyo3(signature = (config = "", seed = 0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg = if config.trim().is_empty() { CastConfig::default() } else { CastConfig::parse(config).py()? };
        let net = match cfg.precision {
            DType::F32 => Net::F32(CastModel::init(cfg, seed).py()?),
            DType::F64 => Net::F64(CastModel::init(cfg, seed).py()?),
        };
        Ok(Self { net })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let net = match cast_core::model::read_checkpoint_config(&path).py()?.precision {
            DType::F32 => Net::F32(CastModel::load(&path).py()?),
            DType::F64 => Net::F64(CastModel::load(&path).py()?),
        };
        Ok(Self { net })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        match &self.net {
            Net::F32(m) => m.save(&path),
            Net::F64(m) => m.save(&path),
        }
        .py()
    }

    #[getter]
    fn variant(&self) -> String {
        self.config_ref().variant.to_string()
    }

    /// The model configuration as `[model]` section text.
    #[getter]
    fn config(&self) -> String {
        self.config_ref().render()
    }

    /// Parameter names in checkpoint order.
    fn parameter_names(&self) -> Vec<String> {
        match &self.net {
            Net::F32(m) => m.params.names().map(str::to_string).collect(),
            Net::F64(m) => m.params.names().map(str::to_string).collect(),
        }
    }

    fn parameter(&self, name: &str) -> PyResult<Tensor> {
        let found = match &self.net {
            Net::F32(m) => m.params.get(name).map(|x| x.cast()),
            Net::F64(m) => m.params.get(name).cloned(),
        };
        found.map(wrap).ok_or_else(|| CastError::new_err(format!("no parameter `{name}`")))
    }

    fn set_parameter(&mut self, name: &str, value: &Tensor) -> PyResult<()> {
        let shape_err = |have: &[usize]| {
            CastError::new_err(format!("parameter `{name}` is {have:?}, got {:?}", value.inner.shape()))
        };
        match &mut self.net {
            Net::F32(m) => {
                let slot = m.params.get_mut(name).ok_or_else(|| CastError::new_err(format!("no parameter `{name}`")))?;
                if slot.shape() != value.inner.shape() {
                    return Err(shape_err(slot.shape()));
                }
                *slot = value.inner.cast();
            }
            Net::F64(m) => {
                let slot = m.params.get_mut(name).ok_or_else(|| CastError::new_err(format!("no parameter `{name}`")))?;
                if slot.shape() != value.inner.shape() {
                    return Err(shape_err(slot.shape()));
                }
                *slot = value.inner.clone();
            }
        }
        Ok(())
    }

    /// Eval-mode forward pass. Returns a dict with `clip_logit`,
    /// `frame_logits`, `score`, `attention` (a `[F, N]` tensor or `None`)
    /// and `pooled`.
    fn forward<'py>(&self, py: Python<'py>, clip: &Clip) -> PyResult<Bound<'py, PyDict>> {
        match &self.net {
            Net::F32(m) => output_dict(py, m.forward(&clip.inner).py()?),
            Net::F64(m) => output_dict(py, m.forward(&clip.inner).py()?),
        }
    }

    /// `[H, W]` greyscale heatmap of one frame's attention, as a flat list
    /// of bytes in row-major order.
    fn heatmap(&self, clip: &Clip, frame: usize) -> PyResult<Vec<u8>> {
        let cfg = self.config_ref().clone();
        let attention = match &self.net {
            Net::F32(m) => m.forward(&clip.inner).py()?.attention.map(|a| a.cast::<f64>()),
            Net::F64(m) => m.forward(&clip.inner).py()?.attention,
        };
        let a = attention.ok_or_else(|| err(CoreError::UnsupportedVariant(cfg.variant.to_string())))?;
        let row = a.index_first(frame).py()?.to_f64_vec();
        runner::heatmap_pixels(&row, cfg.feature_hw(), (cfg.height, cfg.width)).py()
    }

    fn __repr__(&self) -> String {
        let c = self.config_ref();
        format!("Model(variant={}, d={}, clip_len={}, {}x{})", c.variant, c.d, c.clip_len, c.height, c.width)
    }
}

/// Writes a synthetic dataset from `[synth]` section text and returns the
/// manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, config = ""))]
fn generate_dataset(out_dir: PathBuf, config: &str) -> PyResult<PathBuf> {
    let cfg = if config.trim().is_empty() { SynthConfig::default() } else { SynthConfig::parse(config).py()? };
    synth::generate_dataset(&cfg, &out_dir).py()?;
    Ok(out_dir.join(synth::MANIFEST_FILE))
}

/// Scores a manifest with a checkpoint. Returns a dict with `accuracy`,
/// `auc` and `scores` (source id to video score).
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, mode = "frame_mean", split = "auto"))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    manifest: PathBuf,
    mode: &str,
    split: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let mode: EvalLogitMode = parse(mode)?;
    let split: EvalSplit = parse(split)?;
    let m = Manifest::read(&manifest).py()?;
    let report: EvalReport = match cast_core::model::read_checkpoint_config(&checkpoint).py()?.precision {
        DType::F32 => train::evaluate::<f32>(&checkpoint, &m, split.resolve(&m), mode),
        DType::F64 => train::evaluate::<f64>(&checkpoint, &m, split.resolve(&m), mode),
    }
    .py()?;
    let d = PyDict::new(py);
    d.set_item("accuracy", report.accuracy())?;
    d.set_item("auc", report.auc())?;
    let scores = PyDict::new(py);
    for v in &report.videos {
        scores.set_item(&v.source_id, v.score)?;
    }
    d.set_item("scores", scores)?;
    Ok(d)
}

/// Names of the model variants.
#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.name()).collect()
}

#[pymodule]
fn cast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CastError", m.py().get_type::<CastError>())?;
    m.add_class::<Tensor>()?;
    m.add_class::<Clip>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add_function(wrap_pyfunction!(relu, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(layer_norm, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(bce_with_logits, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(compute_interval, m)?)?;
    m.add_function(wrap_pyfunction!(select_frames, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    Ok(())
}
