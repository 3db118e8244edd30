//! Python bindings.
//!
//! Images and feature maps cross the boundary as [`PyTensor`] objects,
//! which convert to and from flat float lists or little-endian `float32`
//! bytes (`numpy.frombuffer(t.to_bytes(), numpy.float32)`). Long-running
//! calls release the GIL.

use std::collections::BTreeMap;

use neural_mrf::mrf::{self, AugmentationSet};
use neural_mrf::objective::Objective;
use neural_mrf::synthesis::{self, Blend};
use neural_mrf::vgg::{self, NetworkDef, WidthScale};
use neural_mrf::{EnergyConfig, Error, InvertJob, PyramidSchedule, SynthesisJob, Tensor};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Input(_) => PyValueError::new_err(e.to_string()),
        Error::Load { .. } | Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn width_scale(name: &str) -> PyResult<WidthScale> {
    match name {
        "full" => Ok(WidthScale::Full),
        "half" => Ok(WidthScale::Half),
        "quarter" => Ok(WidthScale::Quarter),
        "eighth" => Ok(WidthScale::Eighth),
        _ => Err(PyValueError::new_err(format!(
            "width must be full, half, quarter or eighth, not {name:?}"
        ))),
    }
}

/// Channel-major float32 array of shape `(channels, height, width)`.
#[pyclass(name = "Tensor", module = "neural_mrf", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor,
}

impl From<Tensor> for PyTensor {
    fn from(inner: Tensor) -> Self {
        PyTensor { inner }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Tensor::new(channels, height, width, data)
            .map_err(to_py)?
            .into())
    }

    #[staticmethod]
    fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor::zeros(channels, height, width).into()
    }

    /// From little-endian float32 bytes.
    #[staticmethod]
    fn from_bytes(channels: usize, height: usize, width: usize, data: &[u8]) -> PyResult<Self> {
        if !data.len().is_multiple_of(4) {
            return Err(PyValueError::new_err("byte length is not a multiple of 4"));
        }
        let values = data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(channels, height, width, values)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        let bytes: Vec<u8> = self
            .inner
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        PyBytes::new(py, &bytes)
    }

    fn get(&self, channel: usize, y: usize, x: usize) -> PyResult<f32> {
        let (c, h, w) = self.inner.shape();
        if channel >= c || y >= h || x >= w {
            return Err(PyValueError::new_err(format!(
                "index ({channel}, {y}, {x}) out of range for shape ({c}, {h}, {w})"
            )));
        }
        Ok(self.inner.get(channel, y, x))
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f32> {
        if !self.inner.same_shape(&other.inner) {
            return Err(PyValueError::new_err("shapes differ"));
        }
        Ok(self.inner.max_abs_diff(&other.inner))
    }

    fn resize(&self, height: usize, width: usize) -> PyResult<Self> {
        Ok(
            neural_mrf::tensor::bilinear_resize(&self.inner, height, width)
                .map_err(to_py)?
                .into(),
        )
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &PyTensor) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let (c, h, w) = self.inner.shape();
        format!("Tensor(shape=({c}, {h}, {w}))")
    }
}

/// VGG-19 trunk through relu5_1.
#[pyclass(name = "Network", module = "neural_mrf", frozen)]
pub struct PyNetwork {
    inner: NetworkDef,
}

#[pymethods]
impl PyNetwork {
    /// Randomly initialized network for tests and demos.
    #[staticmethod]
    #[pyo3(signature = (seed, width = "eighth"))]
    fn test(seed: u64, width: &str) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: vgg::make_test_network(seed, width_scale(width)?),
        })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: vgg::load_weights(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        vgg::save_weights(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> &'static str {
        match self.inner.width_scale() {
            WidthScale::Full => "full",
            WidthScale::Half => "half",
            WidthScale::Quarter => "quarter",
            WidthScale::Eighth => "eighth",
        }
    }

    fn layer_names(&self) -> Vec<String> {
        self.inner.layers().iter().map(|l| l.name.clone()).collect()
    }

    fn has_tap(&self, name: &str) -> bool {
        self.inner.has_tap(name)
    }

    fn tap_dims(&self, name: &str, height: usize, width: usize) -> PyResult<(usize, usize)> {
        self.inner.tap_dims(name, height, width).map_err(to_py)
    }

    fn cumulative_stride(&self, name: &str) -> PyResult<usize> {
        self.inner.cumulative_stride(name).map_err(to_py)
    }

    /// Activations of an RGB image in `[0, 255]` at each requested tap.
    fn forward(
        &self,
        py: Python<'_>,
        image: &PyTensor,
        taps: Vec<String>,
    ) -> PyResult<BTreeMap<String, PyTensor>> {
        let net = &self.inner;
        let image = &image.inner;
        py.detach(|| {
            let acts = vgg::forward_tapped(net, image, &taps)?;
            Ok(taps
                .iter()
                .map(|t| (t.clone(), acts.get(net, t).expect("tapped").clone().into()))
                .collect())
        })
        .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Network(width={:?})", self.width())
    }
}

/// Energy weights and patch settings; defaults are the reference settings.
#[pyclass(
    name = "EnergyConfig",
    module = "neural_mrf",
    get_all,
    set_all,
    skip_from_py_object
)]
#[derive(Clone)]
pub struct PyEnergyConfig {
    alpha_content: f32,
    alpha_tv: f32,
    mrf_layers: Vec<String>,
    mrf_layer_weights: Vec<f32>,
    content_layer: String,
    patch_size: usize,
    stride: usize,
    scales: Vec<f32>,
    rotations: Vec<f32>,
    enabled_rotations: bool,
    normalize: bool,
}

impl From<&EnergyConfig> for PyEnergyConfig {
    fn from(c: &EnergyConfig) -> Self {
        PyEnergyConfig {
            alpha_content: c.alpha_content,
            alpha_tv: c.alpha_tv,
            mrf_layers: c.mrf_layers.clone(),
            mrf_layer_weights: c.mrf_layer_weights.clone(),
            content_layer: c.content_layer.clone(),
            patch_size: c.patch_size,
            stride: c.stride,
            scales: c.augmentation.scales.clone(),
            rotations: c.augmentation.rotations.clone(),
            enabled_rotations: c.augmentation.enabled_rotations,
            normalize: c.normalize,
        }
    }
}

impl PyEnergyConfig {
    fn to_core(&self) -> EnergyConfig {
        EnergyConfig {
            alpha_content: self.alpha_content,
            alpha_tv: self.alpha_tv,
            mrf_layers: self.mrf_layers.clone(),
            mrf_layer_weights: self.mrf_layer_weights.clone(),
            content_layer: self.content_layer.clone(),
            patch_size: self.patch_size,
            stride: self.stride,
            augmentation: AugmentationSet {
                scales: self.scales.clone(),
                rotations: self.rotations.clone(),
                enabled_rotations: self.enabled_rotations,
            },
            normalize: self.normalize,
        }
    }
}

#[pymethods]
impl PyEnergyConfig {
    #[new]
    fn new() -> Self {
        (&EnergyConfig::default()).into()
    }

    /// Default settings with a single unscaled, unrotated style copy.
    #[staticmethod]
    fn identity_augmentation() -> Self {
        let mut c = Self::new();
        c.scales = vec![1.0];
        c.rotations = vec![0.0];
        c.enabled_rotations = false;
        c
    }

    fn validate(&self) -> PyResult<()> {
        self.to_core().validate().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "EnergyConfig(alpha_content={}, alpha_tv={}, mrf_layers={:?}, content_layer={:?}, patch_size={}, stride={})",
            self.alpha_content, self.alpha_tv, self.mrf_layers, self.content_layer, self.patch_size, self.stride
        )
    }
}

fn config_or_default(config: Option<&PyEnergyConfig>) -> EnergyConfig {
    config.map(PyEnergyConfig::to_core).unwrap_or_default()
}

/// `[(height, width, iterations), ...]`, coarse to fine.
#[pyfunction]
#[pyo3(signature = (height, width, iterations = 200))]
fn pyramid_schedule(
    height: usize,
    width: usize,
    iterations: usize,
) -> PyResult<Vec<(usize, usize, usize)>> {
    let s = PyramidSchedule::new(height, width, iterations).map_err(to_py)?;
    Ok(s.levels
        .iter()
        .map(|l| (l.height, l.width, l.iterations))
        .collect())
}

/// Seeded uniform noise in `[0, 255]`.
#[pyfunction]
fn noise_image(channels: usize, height: usize, width: usize, seed: u64) -> PyTensor {
    synthesis::noise_image(channels, height, width, seed).into()
}

/// For each `k×k` patch of `query` (row-major, by `stride`), the index of
/// the best patch of `style` by normalized cross-correlation, and its score.
#[pyfunction]
#[pyo3(signature = (query, style, k = 3, stride = 1))]
fn match_patches(
    py: Python<'_>,
    query: &PyTensor,
    style: &PyTensor,
    k: usize,
    stride: usize,
) -> PyResult<Vec<(usize, f32)>> {
    let (q, s) = (&query.inner, &style.inner);
    py.detach(|| {
        let qb = mrf::extract_patches(q, k, stride)?;
        let sb = mrf::extract_patches(s, k, stride)?;
        mrf::match_patches_scored(&qb, &sb)
    })
    .map(|ms| ms.into_iter().map(|m| (m.index, m.ncc)).collect())
    .map_err(to_py)
}

/// Energy terms and gradient of `image` under `config`.
///
/// Returns a dict with `total`, `style` (per MRF layer, unweighted),
/// `content`, `tv`, `grad` and `assignments`.
#[pyfunction]
#[pyo3(signature = (network, image, style = None, content = None, config = None))]
fn evaluate_energy<'py>(
    py: Python<'py>,
    network: &PyNetwork,
    image: &PyTensor,
    style: Option<&PyTensor>,
    content: Option<&PyTensor>,
    config: Option<&PyEnergyConfig>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config_or_default(config);
    let net = &network.inner;
    let (img, style, content) = (
        &image.inner,
        style.map(|t| &t.inner),
        content.map(|t| &t.inner),
    );
    let report = py
        .detach(|| Objective::new(net, &cfg, style, content)?.evaluate(img))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("total", report.total)?;
    d.set_item("style", report.style)?;
    d.set_item("content", report.content)?;
    d.set_item("tv", report.tv)?;
    d.set_item("grad", PyTensor::from(report.grad))?;
    d.set_item("assignments", report.assignments)?;
    Ok(d)
}

/// Coarse-to-fine style transfer.
///
/// Returns `(image, trace)` where `trace` holds one dict per accepted
/// iterate with `level`, `iteration`, `total`, `style`, `content`, `tv`.
#[pyfunction]
#[pyo3(signature = (network, style, content = None, config = None, seed = 0, size = None, iterations = 200, lbfgs_memory = 10))]
#[allow(clippy::too_many_arguments)]
fn run_transfer<'py>(
    py: Python<'py>,
    network: &PyNetwork,
    style: &PyTensor,
    content: Option<&PyTensor>,
    config: Option<&PyEnergyConfig>,
    seed: u64,
    size: Option<(usize, usize)>,
    iterations: usize,
    lbfgs_memory: usize,
) -> PyResult<(PyTensor, Vec<Bound<'py, PyDict>>)> {
    let mut job = SynthesisJob::new(
        style.inner.clone(),
        content.map(|t| t.inner.clone()),
        config_or_default(config),
    );
    job.seed = seed;
    job.output_size = size;
    job.iterations_per_level = iterations;
    job.lbfgs_memory = lbfgs_memory;
    let net = &network.inner;
    let result = py
        .detach(|| synthesis::run_transfer(net, &job))
        .map_err(to_py)?;
    let mut trace = Vec::new();
    for r in result.levels.iter().flat_map(|l| &l.records) {
        let d = PyDict::new(py);
        d.set_item("level", r.level)?;
        d.set_item("iteration", r.iteration)?;
        d.set_item("total", r.total)?;
        d.set_item("style", r.style)?;
        d.set_item("content", r.content)?;
        d.set_item("tv", r.tv)?;
        trace.push(d);
    }
    Ok((result.image.into(), trace))
}

/// Reconstructs an image from its activations at `taps`, optionally
/// blended (`lam * image + (1 - lam) * blend_with`) with another image's.
///
/// Returns a dict with `image`, `trace`, `initial_feature_energy` and
/// `final_feature_energy`.
#[pyfunction]
#[pyo3(signature = (network, image, taps, alpha_tv = 0.001, iterations = 200, seed = 0, blend_with = None, lam = 0.5, lbfgs_memory = 10))]
#[allow(clippy::too_many_arguments)]
fn run_invert<'py>(
    py: Python<'py>,
    network: &PyNetwork,
    image: &PyTensor,
    taps: Vec<String>,
    alpha_tv: f32,
    iterations: usize,
    seed: u64,
    blend_with: Option<&PyTensor>,
    lam: f32,
    lbfgs_memory: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let mut job = InvertJob::new(image.inner.clone(), taps);
    job.alpha_tv = alpha_tv;
    job.iterations = iterations;
    job.seed = seed;
    job.lbfgs_memory = lbfgs_memory;
    job.blend = blend_with.map(|b| Blend {
        other: b.inner.clone(),
        lambda: lam,
    });
    let net = &network.inner;
    let r = py
        .detach(|| synthesis::run_invert(net, &job))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("image", PyTensor::from(r.image))?;
    d.set_item("trace", r.trace)?;
    d.set_item("initial_feature_energy", r.initial_feature_energy)?;
    d.set_item("final_feature_energy", r.final_feature_energy)?;
    Ok(d)
}

/// Best-matching patch in `b` for each `(y, x)` pixel of `a`, per layer.
#[pyfunction]
#[pyo3(signature = (network, a, b, coords, layers, k = 3))]
fn run_match_report<'py>(
    py: Python<'py>,
    network: &PyNetwork,
    a: &PyTensor,
    b: &PyTensor,
    coords: Vec<(usize, usize)>,
    layers: Vec<String>,
    k: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let net = &network.inner;
    let (ia, ib) = (&a.inner, &b.inner);
    let rows = py
        .detach(|| synthesis::run_match_report(net, ia, ib, &coords, &layers, k))
        .map_err(to_py)?;
    rows.into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("layer", r.layer)?;
            d.set_item("query", r.query)?;
            d.set_item("query_pixel", r.query_pixel)?;
            d.set_item("match_pixel", r.match_pixel)?;
            d.set_item("ncc", r.ncc)?;
            Ok(d)
        })
        .collect()
}

#[pymodule(name = "neural_mrf")]
fn neural_mrf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyEnergyConfig>()?;
    m.add_function(wrap_pyfunction!(pyramid_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(noise_image, m)?)?;
    m.add_function(wrap_pyfunction!(match_patches, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_energy, m)?)?;
    m.add_function(wrap_pyfunction!(run_transfer, m)?)?;
    m.add_function(wrap_pyfunction!(run_invert, m)?)?;
    m.add_function(wrap_pyfunction!(run_match_report, m)?)?;
    Ok(())
}
