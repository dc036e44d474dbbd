//! Python bindings: tensors, grouped codebooks, the trainer and a few metrics.

use std::path::PathBuf;

use groupvq::analysis;
use groupvq::cli::checkpoint_file::{read_checkpoint_file, write_checkpoint_file};
use groupvq::cli::config::apply_override;
use groupvq::cli::data::{synthetic_dataset as synth, SyntheticSpec};
use groupvq::cli::tensor_file::{read_tensor_file, write_tensor_file};
use groupvq::codebook::{
    init_grouped_codebook, projector_param_count as param_count, uniform_specs, CodebookStreams, GroupedCodebook,
    MlpSpec, ProjectorVariant,
};
use groupvq::numerics::{RngStream, StreamPurpose, Tensor};
use groupvq::quantizer::quantize;
use groupvq::resampler::{extension_sweep, resample_codebook, ResampleMode, ResampleRequest};
use groupvq::trainer::{CodebookState, TrainConfig, Trainer};
use groupvq::Error;
use pyo3::buffer::PyBuffer;
use pyo3::exceptions::{PyArithmeticError, PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn to_py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Index { .. } => PyIndexError::new_err(msg),
        Error::Numeric(_) => PyArithmeticError::new_err(msg),
        Error::Contract(_) => PyRuntimeError::new_err(msg),
        Error::Shape(_) | Error::Config(_) | Error::Format { .. } => PyValueError::new_err(msg),
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for groupvq::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// Round-trips a serializable value through `json.loads`.
fn to_py_value<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn parse_projector(name: &str) -> PyResult<ProjectorVariant> {
    match name {
        "linear" => Ok(ProjectorVariant::Linear),
        "mlp" => Ok(ProjectorVariant::Mlp(MlpSpec::default())),
        "linear-plus-mlp" => Ok(ProjectorVariant::LinearPlusMlp(MlpSpec::default())),
        other => Err(PyValueError::new_err(format!(
            "projector must be linear, mlp or linear-plus-mlp, got {other:?}"
        ))),
    }
}

fn parse_mode(name: &str) -> PyResult<ResampleMode> {
    match name {
        "resample" => Ok(ResampleMode::Resample),
        "self-extend" => Ok(ResampleMode::SelfExtend),
        other => Err(PyValueError::new_err(format!("mode must be resample or self-extend, got {other:?}"))),
    }
}

/// Dense float32 tensor, row-major.
#[pyclass(name = "Tensor", module = "groupvq_py", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: Tensor::from_vec(&shape, data).or_py()?,
        })
    }

    /// Copies any C-contiguous float32 buffer, e.g. a numpy array.
    #[staticmethod]
    fn from_buffer(obj: &Bound<'_, PyAny>) -> PyResult<Self> {
        let buf = PyBuffer::<f32>::get(obj)?;
        if !buf.is_c_contiguous() {
            return Err(PyValueError::new_err("buffer must be C-contiguous"));
        }
        Self::new(buf.shape().to_vec(), buf.to_vec(obj.py())?)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_tensor_file(&path).or_py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_tensor_file(&path, &self.inner).or_py()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.len()
    }

    /// Flat list of values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    /// Little-endian float32 bytes; `numpy.frombuffer(t.tobytes(), "<f4")`.
    fn tobytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        let bytes: Vec<u8> = self.inner.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        PyBytes::new(py, &bytes)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner.bit_eq(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Grouped codebook with frozen cores and trainable projectors.
#[pyclass(name = "Codebook", module = "groupvq_py", from_py_object)]
#[derive(Clone)]
pub struct PyCodebook {
    inner: GroupedCodebook<f32>,
}

#[pymethods]
impl PyCodebook {
    #[new]
    #[pyo3(signature = (n, d, k, rank, projector = "linear", seed = 0))]
    fn new(n: usize, d: usize, k: usize, rank: usize, projector: &str, seed: u64) -> PyResult<Self> {
        let variant = parse_projector(projector)?;
        let specs = uniform_specs(n, k, rank).or_py()?;
        Ok(Self {
            inner: init_grouped_codebook(d, &specs, variant, &mut CodebookStreams::from_seed(seed)).or_py()?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn group_sizes(&self) -> Vec<usize> {
        self.inner.groups().iter().map(|g| g.size()).collect()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.trainable_param_count()
    }

    /// All codes, `n × d`.
    fn materialize(&self) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.materialize().or_py()?,
        })
    }

    fn materialize_group(&self, j: usize) -> PyResult<PyTensor> {
        if j >= self.inner.k() {
            return Err(PyIndexError::new_err(format!("group {j} out of range for k={}", self.inner.k())));
        }
        Ok(PyTensor {
            inner: self.inner.materialize_group(j).or_py()?,
        })
    }

    /// Nearest-code assignment of a `[..., d]` feature map.
    /// Returns `(indices, quantized, group_counts)`.
    fn quantize(&self, z: &PyTensor) -> PyResult<(Vec<usize>, PyTensor, Vec<usize>)> {
        let res = quantize(&z.inner, &self.inner.materialized().or_py()?).or_py()?;
        Ok((res.indices, PyTensor { inner: res.quantized }, res.group_counts))
    }

    /// Returns the new codebook and the `(old, new)` index pairs kept by self-extension.
    #[pyo3(signature = (mode = "resample", sizes = None, multiple = None, seed = 0))]
    fn resample(
        &self,
        mode: &str,
        sizes: Option<Vec<usize>>,
        multiple: Option<usize>,
        seed: u64,
    ) -> PyResult<(PyCodebook, Vec<(usize, usize)>)> {
        let mode = parse_mode(mode)?;
        let rng = RngStream::derive(seed, StreamPurpose::Resample, 0);
        let req = match (sizes, multiple) {
            (Some(target_sizes), None) => ResampleRequest {
                mode,
                target_sizes,
                rng,
            },
            (None, Some(m)) => ResampleRequest::scaled(&self.inner, mode, m, rng),
            _ => return Err(PyValueError::new_err("give exactly one of sizes or multiple")),
        };
        let (inner, remap) = resample_codebook(&self.inner, &req).or_py()?;
        Ok((PyCodebook { inner }, remap.pairs))
    }

    fn __repr__(&self) -> String {
        format!(
            "Codebook(n={}, d={}, k={}, projector={})",
            self.inner.n(),
            self.inner.d(),
            self.inner.k(),
            self.inner.variant().label()
        )
    }
}

fn train_config(toml_text: &str, overrides: &[String]) -> PyResult<TrainConfig> {
    let mut table: toml::Table = toml_text.parse().map_err(|e: toml::de::Error| PyValueError::new_err(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o).or_py()?;
    }
    let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| PyValueError::new_err(e.to_string()))?;
    cfg.validate().or_py()?;
    Ok(cfg)
}

/// Autoencoder plus codebook under one of the training modes.
#[pyclass(name = "Trainer", module = "groupvq_py")]
pub struct PyTrainer {
    inner: Trainer<f32>,
}

#[pymethods]
impl PyTrainer {
    /// `config` is TOML for the training section; `overrides` are `key=value` strings.
    #[new]
    #[pyo3(signature = (config = None, overrides = Vec::new()))]
    fn new(config: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: Trainer::new(train_config(config.unwrap_or(""), &overrides)?).or_py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = read_checkpoint_file(&path).or_py()?;
        Ok(Self {
            inner: Trainer::from_checkpoint(&ckpt).or_py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_checkpoint_file(&path, &self.inner.checkpoint()).or_py()
    }

    fn config_toml(&self) -> PyResult<String> {
        toml::to_string(self.inner.config()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step_count()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.is_finished()
    }

    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_value(py, &self.inner.history())
    }

    fn init_features(&mut self, data: &PyTensor) -> PyResult<()> {
        self.inner.init_features(&data.inner).or_py()
    }

    /// One optimizer step; returns the loss terms and per-group counts.
    fn train_step<'py>(&mut self, py: Python<'py>, images: &PyTensor) -> PyResult<Bound<'py, PyDict>> {
        let out = self.inner.train_step(&images.inner).or_py()?;
        let d = PyDict::new(py);
        d.set_item("recon", out.losses.recon)?;
        d.set_item("codebook", out.losses.codebook_term)?;
        d.set_item("commit", out.losses.commit_term)?;
        d.set_item("total", out.losses.total)?;
        d.set_item("group_counts", out.result.group_counts)?;
        Ok(d)
    }

    /// Trains until done or `max_steps` more steps; returns finished epochs' metrics.
    #[pyo3(signature = (data, eval = None, max_steps = None))]
    fn run<'py>(
        &mut self,
        py: Python<'py>,
        data: &PyTensor,
        eval: Option<&PyTensor>,
        max_steps: Option<u64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (trainer, data, eval) = (&mut self.inner, &data.inner, eval.map(|e| &e.inner));
        let done = py.detach(|| trainer.run(data, eval, max_steps)).or_py()?;
        to_py_value(py, &done)
    }

    fn evaluate<'py>(&self, py: Python<'py>, images: &PyTensor) -> PyResult<Bound<'py, PyAny>> {
        let m = py.detach(|| self.inner.evaluate(&images.inner)).or_py()?;
        to_py_value(py, &m)
    }

    /// Current materialized codes, `n × d`.
    fn codes(&self) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.codebook().materialized().or_py()?.codes,
        })
    }

    /// The grouped codebook, or `None` in vanilla mode.
    fn codebook(&self) -> Option<PyCodebook> {
        match self.inner.codebook() {
            CodebookState::Grouped(gc) => Some(PyCodebook { inner: gc.clone() }),
            CodebookState::Free { .. } => None,
        }
    }

    /// Self-extends the current codebook by each multiple and evaluates on `eval`.
    #[pyo3(signature = (multiples, eval, batch_size = 64))]
    fn extension_sweep<'py>(
        &self,
        py: Python<'py>,
        multiples: Vec<usize>,
        eval: &PyTensor,
        batch_size: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ckpt = self.inner.checkpoint();
        let rows = py.detach(|| extension_sweep(&ckpt, &multiples, &eval.inner, batch_size)).or_py()?;
        to_py_value(py, &rows)
    }
}

/// Procedural `[count, height, width, 3]` images in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (count, height = 32, width = 32, seed = 0))]
fn synthetic_dataset(count: usize, height: usize, width: usize, seed: u64) -> PyResult<PyTensor> {
    let spec = SyntheticSpec {
        count,
        height,
        width,
        seed,
        ..Default::default()
    };
    Ok(PyTensor {
        inner: synth(&spec).or_py()?,
    })
}

#[pyfunction]
fn projector_param_count(projector: &str, rank: usize, d: usize) -> PyResult<usize> {
    Ok(param_count(parse_projector(projector)?, rank, d))
}

#[pyfunction]
#[pyo3(signature = (mse, max_value = 1.0))]
fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    analysis::psnr_from_mse(mse, max_value)
}

#[pyfunction]
fn ssim(image: &PyTensor, recon: &PyTensor) -> PyResult<f64> {
    analysis::ssim(&image.inner, &recon.inner).or_py()
}

#[pyfunction]
fn utilization(counts: Vec<usize>, n: usize) -> f64 {
    analysis::utilization(&counts, n)
}

#[pymodule]
pub fn groupvq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(projector_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_from_mse, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(utilization, m)?)?;
    Ok(())
}
