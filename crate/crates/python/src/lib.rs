//! Python bindings: configuration presets, static cost analysis, retrieval
//! scoring, dataset generation, gradient checks and a small autodiff tape.
//!
//! Structured results cross the boundary as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use bicnet_tks::analysis;
use bicnet_tks::autodiff::{Gradients, Tape as CoreTape, Var};
use bicnet_tks::bicnet::ModelConfig;
use bicnet_tks::config::RunConfig;
use bicnet_tks::dao::{self, AttentionMap, Similarity};
use bicnet_tks::gradsuite;
use bicnet_tks::synthdata::{self, GeneratorConfig};
use bicnet_tks::tensor::Tensor as CoreTensor;
use bicnet_tks::traineval;
use bicnet_tks::Error;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image(_) => PyIOError::new_err(e.to_string()),
        Error::Verification(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPyResult<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPyResult<T> for bicnet_tks::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// Serializes through JSON and rebuilds the value with Python's `json`.
fn to_python<'py, S: Serialize>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_python<T: serde::de::DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn model_config(preset: &str, overrides: Option<&Bound<'_, PyAny>>) -> PyResult<ModelConfig> {
    match overrides {
        Some(cfg) => {
            let cfg: ModelConfig = from_python(cfg.py(), cfg)?;
            cfg.validate().py()?;
            Ok(cfg)
        }
        None => ModelConfig::preset(preset).py(),
    }
}

/// Full run configuration (model, data, train, seed) of a preset.
#[pyfunction]
#[pyo3(signature = (preset = "mini"))]
fn run_config<'py>(py: Python<'py>, preset: &str) -> PyResult<Bound<'py, PyAny>> {
    to_python(py, &RunConfig::preset(preset).py()?)
}

/// Checks a run configuration dict; raises `ValueError` when invalid.
#[pyfunction]
fn validate_config(py: Python<'_>, config: &Bound<'_, PyAny>) -> PyResult<()> {
    let cfg: RunConfig = from_python(py, config)?;
    cfg.validate().py()
}

/// Fraction of the single-branch cost kept with `alpha` small frames per big frame.
#[pyfunction]
fn cost_fraction(alpha: usize) -> f64 {
    analysis::cost_fraction(alpha)
}

/// Static backbone FLOPs at `resolution` (`(H, W)`).
#[pyfunction]
#[pyo3(signature = (preset = "resnet50", resolution = None, config = None))]
fn count_flops<'py>(
    py: Python<'py>,
    preset: &str,
    resolution: Option<(usize, usize)>,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = model_config(preset, config)?;
    let res = resolution.map_or(cfg.big_res, |(h, w)| [h, w]);
    to_python(py, &analysis::count_flops(&cfg.backbone, res))
}

#[pyfunction]
#[pyo3(signature = (preset = "resnet50", config = None))]
fn count_params<'py>(py: Python<'py>, preset: &str, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    to_python(py, &analysis::count_params(&model_config(preset, config)?))
}

/// Per-frame segment cost with the cross-scale, attention and kernel-selection overheads itemized.
#[pyfunction]
#[pyo3(signature = (preset = "resnet50", alpha = None, config = None))]
fn avg_flops_per_frame<'py>(
    py: Python<'py>,
    preset: &str,
    alpha: Option<usize>,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = model_config(preset, config)?;
    if let Some(a) = alpha {
        cfg.alpha = a;
    }
    to_python(py, &analysis::avg_flops_per_frame(&cfg))
}

/// Divergence loss of equally sized attention maps, frame 1 first.
#[pyfunction]
#[pyo3(signature = (maps, similarity = "cosine"))]
fn divergence_loss(maps: Vec<Vec<f64>>, similarity: &str) -> PyResult<f64> {
    let similarity = match similarity {
        "cosine" => Similarity::Cosine,
        "dot" => Similarity::Dot,
        other => return Err(PyValueError::new_err(format!("unknown similarity `{other}`"))),
    };
    let maps = maps
        .into_iter()
        .enumerate()
        .map(|(k, m)| {
            Ok(AttentionMap {
                values: CoreTensor::from_vec(&[m.len()], m)?,
                frame_index: k,
                branch: bicnet_tks::backbone::Branch::Detail,
            })
        })
        .collect::<bicnet_tks::Result<Vec<_>>>()
        .py()?;
    dao::divergence_loss(&maps, similarity).py()
}

/// mAP, CMC and per-query AP under cosine distance.
#[pyfunction]
fn evaluate_retrieval<'py>(
    py: Python<'py>,
    query: Vec<Vec<f32>>,
    query_labels: Vec<usize>,
    gallery: Vec<Vec<f32>>,
    gallery_labels: Vec<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    to_python(py, &traineval::evaluate_retrieval(&query, &query_labels, &gallery, &gallery_labels).py()?)
}

#[pyfunction]
fn expected_random_ap(relevant: usize, total: usize) -> f64 {
    traineval::expected_random_ap(relevant, total)
}

/// Renders the synthetic dataset under `out` and returns its index.
#[pyfunction]
#[pyo3(signature = (out, num_ids = 20, cams_per_id = 2, tracklets_per_cam = 2, tracklet_len = 64, frame_size = (64, 32), seed = 7))]
#[allow(clippy::too_many_arguments)]
fn generate_dataset<'py>(
    py: Python<'py>,
    out: PathBuf,
    num_ids: usize,
    cams_per_id: usize,
    tracklets_per_cam: usize,
    tracklet_len: usize,
    frame_size: (usize, usize),
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = GeneratorConfig {
        num_ids,
        cams_per_id,
        tracklets_per_cam,
        tracklet_len,
        frame_size: [frame_size.0, frame_size.1],
        seed,
    };
    let index = py.detach(|| synthdata::generate_dataset(&cfg, &out)).py()?;
    to_python(py, &index)
}

/// Names accepted by [`gradcheck`].
#[pyfunction]
fn gradcheck_blocks() -> Vec<&'static str> {
    gradsuite::BLOCKS.to_vec()
}

/// Finite-difference check of one registered block at one seed.
#[pyfunction]
#[pyo3(signature = (block, seed = 0))]
fn gradcheck<'py>(py: Python<'py>, block: String, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let result = py.detach(|| gradsuite::run_block(&block, seed)).py()?;
    to_python(py, &result)
}

/// Dense float64 tensor.
#[pyclass(name = "Tensor", module = "bicnet_tks", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: CoreTensor<f64>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: CoreTensor::from_vec(&shape, data).py()?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: CoreTensor::zeros(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn item(&self) -> PyResult<f64> {
        if self.inner.numel() != 1 {
            return Err(PyValueError::new_err("item() needs a single-element tensor"));
        }
        Ok(self.inner.item())
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Reverse-mode tape; values are referred to by the integer handles its
/// methods return.
#[pyclass(name = "Tape", module = "bicnet_tks", unsendable)]
struct PyTape {
    tape: CoreTape<f64>,
    vars: Vec<Var>,
    grads: Option<Gradients<f64>>,
}

impl PyTape {
    fn var(&self, handle: usize) -> PyResult<Var> {
        self.vars
            .get(handle)
            .copied()
            .ok_or_else(|| PyIndexError::new_err(format!("no value with handle {handle}")))
    }

    fn push(&mut self, v: Var) -> usize {
        self.grads = None;
        self.vars.push(v);
        self.vars.len() - 1
    }

    fn binary(&mut self, a: usize, b: usize, op: fn(&mut CoreTape<f64>, Var, Var) -> bicnet_tks::Result<Var>) -> PyResult<usize> {
        let (a, b) = (self.var(a)?, self.var(b)?);
        let v = op(&mut self.tape, a, b).py()?;
        Ok(self.push(v))
    }
}

#[pymethods]
impl PyTape {
    #[new]
    fn new() -> Self {
        Self {
            tape: CoreTape::new(),
            vars: Vec::new(),
            grads: None,
        }
    }

    /// A value that receives a gradient.
    fn leaf(&mut self, value: &PyTensor) -> usize {
        let v = self.tape.leaf(value.inner.clone());
        self.push(v)
    }

    fn constant(&mut self, value: &PyTensor) -> usize {
        let v = self.tape.constant(value.inner.clone());
        self.push(v)
    }

    fn value(&self, handle: usize) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.tape.value(self.var(handle)?).clone(),
        })
    }

    fn add(&mut self, a: usize, b: usize) -> PyResult<usize> {
        self.binary(a, b, CoreTape::add)
    }

    fn sub(&mut self, a: usize, b: usize) -> PyResult<usize> {
        self.binary(a, b, CoreTape::sub)
    }

    fn mul(&mut self, a: usize, b: usize) -> PyResult<usize> {
        self.binary(a, b, CoreTape::mul)
    }

    fn matmul(&mut self, a: usize, b: usize) -> PyResult<usize> {
        self.binary(a, b, CoreTape::matmul)
    }

    fn scale(&mut self, a: usize, factor: f64) -> PyResult<usize> {
        let v = self.tape.scale(self.var(a)?, factor);
        Ok(self.push(v))
    }

    fn relu(&mut self, a: usize) -> PyResult<usize> {
        let v = self.tape.relu(self.var(a)?);
        Ok(self.push(v))
    }

    fn softmax(&mut self, a: usize, axis: usize) -> PyResult<usize> {
        let v = self.tape.softmax(self.var(a)?, axis).py()?;
        Ok(self.push(v))
    }

    fn l2_normalize(&mut self, a: usize, axis: usize) -> PyResult<usize> {
        let v = self.tape.l2_normalize(self.var(a)?, axis).py()?;
        Ok(self.push(v))
    }

    fn reshape(&mut self, a: usize, shape: Vec<usize>) -> PyResult<usize> {
        let v = self.tape.reshape(self.var(a)?, &shape).py()?;
        Ok(self.push(v))
    }

    #[pyo3(signature = (x, weight, stride = 1, padding = 0))]
    fn conv2d(&mut self, x: usize, weight: usize, stride: usize, padding: usize) -> PyResult<usize> {
        let (x, w) = (self.var(x)?, self.var(weight)?);
        let v = self.tape.conv2d(x, w, stride, padding).py()?;
        Ok(self.push(v))
    }

    #[pyo3(signature = (x, weight, dilation = 1))]
    fn temporal_conv1d(&mut self, x: usize, weight: usize, dilation: usize) -> PyResult<usize> {
        let (x, w) = (self.var(x)?, self.var(weight)?);
        let v = self.tape.temporal_conv1d(x, w, dilation).py()?;
        Ok(self.push(v))
    }

    #[pyo3(signature = (x, kernel, stride, padding = 0))]
    fn max_pool2d(&mut self, x: usize, kernel: usize, stride: usize, padding: usize) -> PyResult<usize> {
        let v = self.tape.max_pool2d(self.var(x)?, kernel, stride, padding).py()?;
        Ok(self.push(v))
    }

    fn sum(&mut self, a: usize) -> PyResult<usize> {
        let v = self.tape.sum_all(self.var(a)?);
        Ok(self.push(v))
    }

    fn mean(&mut self, a: usize) -> PyResult<usize> {
        let v = self.tape.mean_all(self.var(a)?);
        Ok(self.push(v))
    }

    fn cross_entropy(&mut self, logits: usize, labels: Vec<usize>) -> PyResult<usize> {
        let v = self.tape.cross_entropy(self.var(logits)?, &labels).py()?;
        Ok(self.push(v))
    }

    #[pyo3(signature = (features, labels, margin = 0.3))]
    fn batch_hard_triplet(&mut self, features: usize, labels: Vec<usize>, margin: f64) -> PyResult<usize> {
        let v = self.tape.batch_hard_triplet(self.var(features)?, &labels, margin).py()?;
        Ok(self.push(v))
    }

    /// Back-propagates from a scalar; gradients are then read with `grad`.
    fn backward(&mut self, loss: usize) -> PyResult<()> {
        self.grads = Some(self.tape.backward(self.var(loss)?).py()?);
        Ok(())
    }

    fn grad(&self, handle: usize) -> PyResult<PyTensor> {
        let v = self.var(handle)?;
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("call backward() first"))?;
        Ok(PyTensor {
            inner: grads.get_or_zeros(&self.tape, v),
        })
    }

    fn __len__(&self) -> usize {
        self.vars.len()
    }
}

#[pymodule]
#[pyo3(name = "bicnet_tks")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyTape>()?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(cost_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(avg_flops_per_frame, m)?)?;
    m.add_function(wrap_pyfunction!(divergence_loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_retrieval, m)?)?;
    m.add_function(wrap_pyfunction!(expected_random_ap, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_blocks, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("GRADCHECK_TOLERANCE", gradsuite::TOLERANCE)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_functions_from_python() {
        Python::initialize();
        Python::attach(|py| {
            let m = PyModule::new(py, "bicnet_tks").unwrap();
            init_module(&m).unwrap();
            let f = m.getattr("cost_fraction").unwrap().call1((1,)).unwrap();
            assert_eq!(f.extract::<f64>().unwrap(), 0.625);
            let cfg = m.getattr("run_config").unwrap().call1(("mini",)).unwrap();
            assert!(m.getattr("validate_config").unwrap().call1((cfg.clone(),)).is_ok());
            cfg.get_item("model").unwrap().set_item("segment_len", 9).unwrap();
            let err = m.getattr("validate_config").unwrap().call1((cfg,)).unwrap_err();
            assert!(err.is_instance_of::<PyValueError>(py));
        });
    }

    #[test]
    fn tape_gradients() {
        Python::initialize();
        Python::attach(|_py| {
            let mut tape = PyTape::new();
            let x = tape.leaf(&PyTensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
            let w = tape.constant(&PyTensor::new(vec![3], vec![2.0, 2.0, 2.0]).unwrap());
            let y = tape.mul(x, w).unwrap();
            let s = tape.sum(y).unwrap();
            assert!(tape.grad(x).is_err());
            tape.backward(s).unwrap();
            assert_eq!(tape.grad(x).unwrap().tolist(), vec![2.0, 2.0, 2.0]);
            assert!(tape.var(99).is_err());
        });
    }

    #[test]
    fn divergence_arguments() {
        assert_eq!(divergence_loss(vec![vec![1.0, 0.0], vec![0.0, 1.0]], "cosine").unwrap(), -1.0);
        Python::initialize();
        Python::attach(|_py| {
            assert!(divergence_loss(vec![vec![1.0]], "euclid").is_err());
        });
    }
}
