//! Python bindings. Tensors cross the boundary as a small `Tensor` class
//! holding a shape and flat row-major data; probability masks are `[C, H, W]`
//! tensors.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dmsa::decoder::{self, ClassEmbeddings, PseudoLabelMask};
use dmsa::loss::{self, LossParts, LossWeights};
use dmsa::par::{self, ParParams};
use dmsa::pipeline::{self, checkpoint, EvalReport, StepMetrics, TrainConfig};
use dmsa::{ConvGeometry, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for dmsa::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "Tensor", module = "dmsa", from_py_object)]
#[derive(Clone)]
pub struct PyTensor(pub dmsa::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self(dmsa::Tensor::new(shape, data).py()?))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

fn mask(t: &PyTensor) -> PyResult<PseudoLabelMask> {
    PseudoLabelMask::new(t.0.clone()).py()
}

/// Output extent of a dilated convolution.
#[pyfunction]
#[pyo3(signature = (input_size, padding, kernel_size, dilation, stride))]
fn output_size(input_size: usize, padding: usize, kernel_size: usize, dilation: usize, stride: usize) -> PyResult<usize> {
    ConvGeometry { input_size, padding, kernel_size, dilation, stride }.output_size().py()
}

/// ASPP dilation rates used in a 1-based epoch.
#[pyfunction]
fn dilation_schedule(epoch: u64) -> [usize; 4] {
    dmsa::aspp::dilation_schedule(epoch)
}

#[pyfunction]
fn softmax(x: &PyTensor, axis: usize) -> PyResult<PyTensor> {
    Ok(PyTensor(dmsa::kernels::softmax(&x.0, axis).py()?))
}

/// Token-level class masks `[N, C]` from tokens `[N, D]` and class embeddings `[C, D]`.
#[pyfunction]
fn decode_masks(z: &PyTensor, classes: &PyTensor) -> PyResult<PyTensor> {
    let c = ClassEmbeddings::new(classes.0.clone()).py()?;
    Ok(PyTensor(decoder::decode_masks(&z.0, &c).py()?))
}

#[pyfunction]
fn masks_to_full_res(token_masks: &PyTensor, height: usize, width: usize) -> PyResult<PyTensor> {
    Ok(PyTensor(decoder::masks_to_full_res(&token_masks.0, height, width).py()?.into_probs()))
}

#[pyfunction]
fn cam(features: &PyTensor, alpha: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor(decoder::cam(&features.0, &alpha.0).py()?))
}

#[pyfunction]
fn cam_to_initial_labels(cam_maps: &PyTensor, threshold: f64) -> PyResult<PyTensor> {
    Ok(PyTensor(decoder::cam_to_initial_labels(&cam_maps.0, threshold).py()?.into_probs()))
}

#[pyfunction]
fn fuse_masks(cam_mask: &PyTensor, teacher_mask: &PyTensor, beta: f64) -> PyResult<PyTensor> {
    Ok(PyTensor(decoder::fuse_masks(&mask(cam_mask)?, &mask(teacher_mask)?, beta).py()?.into_probs()))
}

/// PAR refinement of a `[C, H, W]` mask against a `[3, H, W]` image.
#[pyfunction]
#[pyo3(signature = (mask_probs, image, iterations=10, omega3=0.01, dilations=vec![1, 2, 4, 8], w1=0.3, w2=0.01))]
fn par_refine(
    mask_probs: &PyTensor,
    image: &PyTensor,
    iterations: usize,
    omega3: f64,
    dilations: Vec<usize>,
    w1: f64,
    w2: f64,
) -> PyResult<PyTensor> {
    let params = ParParams { dilation_list: dilations, w1, w2, omega3, iterations };
    Ok(PyTensor(par::par_refine(&mask(mask_probs)?, &image.0, &params).py()?.into_probs()))
}

#[pyfunction]
fn ce_loss(student: &PyTensor, pseudo: &PyTensor) -> PyResult<f64> {
    loss::ce_loss(&student.0, &mask(pseudo)?).py()
}

#[pyfunction]
fn seg_loss(student: &PyTensor, pseudo: &PyTensor) -> PyResult<f64> {
    loss::seg_loss(&student.0, &mask(pseudo)?).py()
}

#[pyfunction]
fn uncertainty_loss(logits: &PyTensor) -> PyResult<f64> {
    loss::uncertainty_loss(&logits.0).py()
}

#[pyfunction]
fn cls_loss(student: &PyTensor) -> PyResult<f64> {
    loss::cls_loss(&student.0).py()
}

#[pyfunction]
#[pyo3(signature = (seg, ce, un, cls, weights=(1.0, 1.0, 0.1, 0.1)))]
fn total_loss(seg: f64, ce: f64, un: f64, cls: f64, weights: (f64, f64, f64, f64)) -> PyResult<f64> {
    let w = LossWeights { seg: weights.0, ce: weights.1, un: weights.2, cls: weights.3 };
    loss::total_loss(&LossParts { seg, ce, un, cls }, &w).py()
}

/// Maximum-weight assignment; `result[row]` is the matched column.
#[pyfunction]
fn hungarian_match(weights: Vec<Vec<u64>>) -> PyResult<Vec<usize>> {
    let n = weights.len();
    if weights.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("weight matrix must be square"));
    }
    Ok(pipeline::hungarian_match(&weights))
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("miou", r.miou)?;
    d.set_item("acc", r.acc)?;
    d.set_item("per_class_iou", r.per_class_iou.clone())?;
    d.set_item("permutation", r.permutation.clone())?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, classes, use_matching=false))]
fn evaluate<'py>(py: Python<'py>, pred: Vec<u8>, gt: Vec<u8>, classes: usize, use_matching: bool) -> PyResult<Bound<'py, PyDict>> {
    let r = pipeline::evaluate(&pred, &gt, classes, use_matching).py()?;
    report_dict(py, &r)
}

/// List of `(image, labels)` pairs.
#[pyfunction]
fn synth_dataset(seed: u64, n_images: usize, height: usize, width: usize, classes: usize) -> PyResult<Vec<(PyTensor, Vec<u8>)>> {
    let data = pipeline::synth_dataset(seed, n_images, height, width, classes).py()?;
    Ok(data.into_iter().map(|s| (PyTensor(s.image), s.labels)).collect())
}

fn metrics_dict<'py>(py: Python<'py>, m: &StepMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", m.step)?;
    d.set_item("epoch", m.epoch)?;
    d.set_item("seg", m.seg)?;
    d.set_item("ce", m.ce)?;
    d.set_item("un", m.un)?;
    d.set_item("cls", m.cls)?;
    d.set_item("total", m.total)?;
    d.set_item("miou", m.miou)?;
    d.set_item("acc", m.acc)?;
    Ok(d)
}

/// Teacher-student trainer over the synthetic dataset described by a JSON config.
#[pyclass(name = "Trainer", module = "dmsa", unsendable)]
pub struct PyTrainer(pipeline::Trainer);

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config_json="{}"))]
    fn new(config_json: &str) -> PyResult<Self> {
        let cfg = TrainConfig::from_json(config_json).py()?;
        Ok(Self(pipeline::Trainer::new(cfg).py()?))
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.0.state.step
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.0.state.epoch
    }

    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = self.0.step().py()?;
        metrics_dict(py, &m)
    }

    #[pyo3(signature = (teacher=false))]
    fn evaluate<'py>(&self, py: Python<'py>, teacher: bool) -> PyResult<Bound<'py, PyDict>> {
        let r = self.0.evaluate(teacher).py()?;
        report_dict(py, &r)
    }

    /// Argmax label maps for every dataset image.
    #[pyo3(signature = (teacher=false))]
    fn predict(&self, teacher: bool) -> PyResult<Vec<Vec<u8>>> {
        self.0.predict(teacher).py()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.0.state, path).py()
    }

    fn checkpoint_bytes(&self) -> PyResult<Vec<u8>> {
        checkpoint::to_bytes(&self.0.state).py()
    }
}

#[pymodule]
#[pyo3(name = "dmsa")]
fn dmsa_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(output_size, m)?)?;
    m.add_function(wrap_pyfunction!(dilation_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(decode_masks, m)?)?;
    m.add_function(wrap_pyfunction!(masks_to_full_res, m)?)?;
    m.add_function(wrap_pyfunction!(cam, m)?)?;
    m.add_function(wrap_pyfunction!(cam_to_initial_labels, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_masks, m)?)?;
    m.add_function(wrap_pyfunction!(par_refine, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(seg_loss, m)?)?;
    m.add_function(wrap_pyfunction!(uncertainty_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cls_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian_match, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    Ok(())
}
