//! Python bindings: tensors, networks, box convolution, metrics and the
//! scene generator. Arrays cross the boundary as flat lists plus a shape;
//! images and masks as `bytes`.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use segforge_core::architectures::{boxenet_spec, enet_spec, Arch, BuildConfig, Network};
use segforge_core::data::{self, DatasetConfig, SceneConfig};
use segforge_core::metrics::{self, Mask};
use segforge_core::{boxconv, checkpoint, training, Error, Tape, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numeric(m) => PyArithmeticError::new_err(m),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn arch(name: &str) -> PyResult<Arch> {
    name.parse().map_err(to_py)
}

/// Dense row-major array of float64.
#[pyclass(name = "Tensor", frozen)]
struct PyTensor {
    inner: Tensor<f64>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: Tensor::new(&shape, data).map_err(to_py)? })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self { inner: Tensor::zeros(&shape) }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn sum(&self) -> f64 {
        self.inner.data().iter().sum()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// UNet, ENet or BoxENet with float32 parameters.
#[pyclass(name = "Network")]
struct PyNetwork {
    inner: Network<f32>,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (arch_name, width_mult = 1.0, input_size = 256, seed = 0))]
    fn new(arch_name: &str, width_mult: f64, input_size: usize, seed: u64) -> PyResult<Self> {
        let cfg = BuildConfig { arch: arch(arch_name)?, width_mult, input_size, seed };
        Ok(Self { inner: Network::build(cfg).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _, _) = checkpoint::load::<f32>(&path).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.inner, None).map_err(to_py)
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.arch().to_string()
    }

    fn parameter_count(&self) -> usize {
        self.inner.count_parameters()
    }

    fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        self.inner.parameter_breakdown()
    }

    fn spec_hash(&self) -> String {
        self.inner.spec_hash()
    }

    /// Eval-mode logits `(N, 2, H, W)` for an `(N, 3, H, W)` input.
    fn predict(&self, x: &PyTensor) -> PyResult<PyTensor> {
        let y = self.inner.predict(&x.inner.cast::<f32>()).map_err(to_py)?;
        Ok(PyTensor { inner: y.cast() })
    }

    /// Binary masks (one `bytes` of 0/1 per sample) for an input batch.
    fn segment<'py>(&self, py: Python<'py>, x: &PyTensor) -> PyResult<Vec<Bound<'py, PyBytes>>> {
        let y = self.inner.predict(&x.inner.cast::<f32>()).map_err(to_py)?;
        let masks = metrics::binarize(&y).map_err(to_py)?;
        Ok(masks.iter().map(|m| PyBytes::new(py, &m.data)).collect())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Network({}, width_mult={}, input_size={}, parameters={})", c.arch, c.width_mult, c.input_size, self.inner.count_parameters())
    }
}

/// Layer table of `enet` or `boxenet`, one row per line.
#[pyfunction]
fn architecture_table(arch_name: &str) -> PyResult<String> {
    match arch(arch_name)? {
        Arch::ENet => Ok(enet_spec().to_text()),
        Arch::BoxENet => Ok(boxenet_spec().to_text()),
        Arch::UNet => Err(PyValueError::new_err("unet has no layer table")),
    }
}

/// Box-average filter of `(N, C, H, W)` input with `(C * B, 4)` boxes
/// `[x_min, x_max, y_min, y_max]`.
#[pyfunction]
fn box_convolution(x: &PyTensor, boxes: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor { inner: boxconv::boxconv_forward(&x.inner, &boxes.inner).map_err(to_py)? })
}

/// Soft Dice loss of `(N, 2, H, W)` logits against a `(N, H, W)` 0/1 target,
/// with its gradient with respect to the logits.
#[pyfunction]
fn soft_dice_loss(logits: &PyTensor, target: &PyTensor) -> PyResult<(f64, PyTensor)> {
    let tape = Tape::new();
    let x = tape.leaf(logits.inner.clone());
    let loss = training::soft_dice_loss(&tape, &x, &target.inner, training::DICE_SMOOTHING).map_err(to_py)?;
    let grads = tape.backward(&loss).map_err(to_py)?;
    Ok((loss.value().item(), PyTensor { inner: grads.get_or_zeros(&x) }))
}

fn mask(h: usize, w: usize, data: Vec<u8>) -> PyResult<Mask> {
    Mask::new(h, w, data).map_err(to_py)
}

/// DSC, IoU, pixel F1 and object F1 of a predicted mask against the truth.
#[pyfunction]
fn score_pair<'py>(py: Python<'py>, h: usize, w: usize, pred: Vec<u8>, truth: Vec<u8>) -> PyResult<Bound<'py, PyDict>> {
    let s = metrics::score_pair(&mask(h, w, pred)?, &mask(h, w, truth)?);
    let d = PyDict::new(py);
    d.set_item("dsc", s.dsc)?;
    d.set_item("iou", s.iou)?;
    d.set_item("pixel_f1", s.pixel_f1)?;
    d.set_item("object_f1", s.object_f1)?;
    Ok(d)
}

/// Mean, median, max and 10th percentile of a score list.
#[pyfunction]
fn summarize(scores: Vec<f64>) -> PyResult<(f64, f64, f64, f64)> {
    let s = metrics::summarize(&scores).map_err(to_py)?;
    Ok((s.mean, s.median, s.max, s.percentile_10))
}

/// Renders one synthetic scene.
#[pyfunction]
#[pyo3(signature = (seed, height = 1024, width = 1280))]
fn generate_scene<'py>(py: Python<'py>, seed: u64, height: usize, width: usize) -> PyResult<Bound<'py, PyDict>> {
    let s = data::generate_scene(seed, &SceneConfig::with_size(height, width)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("height", s.rgb.h)?;
    d.set_item("width", s.rgb.w)?;
    d.set_item("rgb", PyBytes::new(py, &s.rgb.data))?;
    d.set_item("mask", PyBytes::new(py, &s.mask.data))?;
    let stages: Vec<String> = s.meta.cells.iter().map(|c| format!("{:?}", c.stage).to_lowercase()).collect();
    d.set_item("stages", stages)?;
    d.set_item("adjacency", s.meta.adjacency)?;
    Ok(d)
}

/// `(3, H, W)` tensor in `[0, 1]` from interleaved 8-bit RGB.
#[pyfunction]
fn normalize(height: usize, width: usize, rgb: Vec<u8>) -> PyResult<PyTensor> {
    let img = data::RgbImage::new(height, width, rgb).map_err(to_py)?;
    Ok(PyTensor { inner: data::normalize(&img) })
}

/// Writes a tiled, split dataset and returns its manifest as JSON.
#[pyfunction]
#[pyo3(signature = (out, scenes = 10, seed = 0, height = 1024, width = 1280, tile_size = 256))]
fn generate_dataset(out: PathBuf, scenes: usize, seed: u64, height: usize, width: usize, tile_size: usize) -> PyResult<String> {
    let cfg = DatasetConfig { scenes, seed, tile_size, scene: SceneConfig::with_size(height, width), ..DatasetConfig::default() };
    data::generate_dataset(&out, &cfg).and_then(|m| m.to_json()).map_err(to_py)
}

#[pymodule]
fn segforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(architecture_table, m)?)?;
    m.add_function(wrap_pyfunction!(box_convolution, m)?)?;
    m.add_function(wrap_pyfunction!(soft_dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(score_pair, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    Ok(())
}
