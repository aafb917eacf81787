//! Python bindings: Gaussian tensors and their closed-form arithmetic,
//! moment-matched activations, the uncertainty-aware smoothing probability,
//! the evaluation metrics, the log-Mel front-end, and moment propagation
//! through a full network.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use varprop::activations;
use varprop::audio::{log_mel, FrontendConfig};
use varprop::config::RunConfig;
use varprop::error::Error;
use varprop::losses;
use varprop::metrics::{self, ScoredSet};
use varprop::network::{ArchitectureConfig, PoolKind, SeResNet};
use varprop::tensor::Tensor;

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A tensor of elementwise-independent normal random variables.
#[pyclass(name = "GaussianTensor", from_py_object)]
#[derive(Clone)]
struct PyGaussianTensor {
    inner: varprop::GaussianTensor,
}

#[pymethods]
impl PyGaussianTensor {
    /// Build from flat mean and variance data with an explicit shape.
    #[new]
    fn new(shape: Vec<usize>, mean: Vec<f64>, variance: Vec<f64>) -> PyResult<Self> {
        let m = Tensor::new(shape.clone(), mean);
        let v = Tensor::new(shape, variance);
        Ok(PyGaussianTensor {
            inner: varprop::GaussianTensor::new(m, v).map_err(err)?,
        })
    }

    /// Lift a deterministic tensor (variance exactly zero).
    #[staticmethod]
    fn lift(shape: Vec<usize>, values: Vec<f64>) -> PyResult<Self> {
        let t = Tensor::new(shape, values);
        Ok(PyGaussianTensor {
            inner: varprop::GaussianTensor::lift(t).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean().data().to_vec()
    }

    #[getter]
    fn variance(&self) -> Vec<f64> {
        self.inner.variance().data().to_vec()
    }

    /// Sum of independent Gaussians.
    fn add(&self, other: &PyGaussianTensor) -> PyResult<Self> {
        Ok(PyGaussianTensor {
            inner: self.inner.add(&other.inner).map_err(err)?,
        })
    }

    /// Deterministic elementwise scaling.
    fn scale(&self, factors: Vec<f64>) -> PyResult<Self> {
        let c = Tensor::new(self.inner.shape().to_vec(), factors);
        Ok(PyGaussianTensor {
            inner: self.inner.scale(&c).map_err(err)?,
        })
    }

    /// Product of independent Gaussians (exact product variance).
    fn product(&self, other: &PyGaussianTensor) -> PyResult<Self> {
        Ok(PyGaussianTensor {
            inner: self.inner.product(&other.inner).map_err(err)?,
        })
    }

    /// Elementwise second moment `V + E^2`.
    fn second_moment(&self) -> Vec<f64> {
        self.inner.second_moment().data().to_vec()
    }

    /// Exact Gaussian-ReLU moments.
    fn relu_moments(&self) -> Self {
        PyGaussianTensor {
            inner: activations::relu_moments(&self.inner),
        }
    }

    /// Fast-dropout sigmoid moments.
    fn sigmoid_moments(&self) -> Self {
        PyGaussianTensor {
            inner: activations::sigmoid_moments(&self.inner),
        }
    }

    fn __repr__(&self) -> String {
        format!("GaussianTensor(shape={:?})", self.inner.shape())
    }
}

/// Data-specific smoothing probability `|sig(E) - E[sig(.)]|`.
#[pyfunction]
fn smoothing_alpha(logit_mean: f64, logit_var: f64) -> f64 {
    losses::smoothing_alpha(logit_mean, logit_var)
}

/// Interpolate a binary label toward 0.5; returns (y_smooth, alpha).
#[pyfunction]
fn smooth_labels(y_true: f64, alpha: f64) -> (f64, f64) {
    let t = losses::smooth_labels(y_true, alpha);
    (t.y_smooth, t.alpha)
}

#[pyfunction]
fn relu_moments(mean: f64, variance: f64) -> (f64, f64) {
    activations::relu_moments_scalar(mean, variance)
}

#[pyfunction]
fn sigmoid_moments(mean: f64, variance: f64) -> (f64, f64) {
    activations::sigmoid_moments_scalar(mean, variance)
}

fn scored(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<ScoredSet> {
    ScoredSet::new(scores, labels, 0).map_err(err)
}

/// Non-interpolated area under the precision-recall curve.
#[pyfunction]
fn au_pr(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Option<f64>> {
    Ok(metrics::au_pr(&scored(scores, labels)?))
}

/// Area under the ROC curve (Mann-Whitney, ties half-credited).
#[pyfunction]
fn au_roc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Option<f64>> {
    Ok(metrics::au_roc(&scored(scores, labels)?))
}

/// Unweighted mean of positive- and negative-class F1 at threshold 0.5.
#[pyfunction]
fn macro_f1(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(metrics::macro_f1(&scored(scores, labels)?, 0.5))
}

/// Expected calibration error with ten confidence buckets.
#[pyfunction]
fn ece(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(metrics::ece(&scored(scores, labels)?, 10))
}

/// Log-Mel spectrogram of a 16 kHz mono clip; returns (frames, mels, data).
#[pyfunction]
fn log_mel_spectrogram(samples: Vec<f64>, sample_rate: u32) -> PyResult<(usize, usize, Vec<f64>)> {
    let cfg = FrontendConfig::default();
    let spec = log_mel(&samples, sample_rate, &cfg).map_err(err)?;
    Ok((cfg.frames, cfg.n_mels, spec.into_data()))
}

/// Stage shapes of a preset architecture, plus the sequence embedding shape
/// and the pooled vector length.
#[pyfunction]
fn shape_trace(
    preset: &str,
    pooling: &str,
    tasks: usize,
) -> PyResult<(Vec<(usize, usize, usize)>, (usize, usize), usize)> {
    let cfg = arch(preset, pooling, tasks, 1e-4)?;
    let trace = cfg.shape_trace().map_err(err)?;
    Ok((trace.stage_shapes, trace.embedding, trace.pooled))
}

fn arch(preset: &str, pooling: &str, tasks: usize, rho_init: f64) -> PyResult<ArchitectureConfig> {
    let pool = match pooling {
        "max" => PoolKind::Max,
        "attentive" => PoolKind::Attentive,
        other => return Err(PyValueError::new_err(format!("unknown pooling '{other}'"))),
    };
    let mut cfg = match preset {
        "canonical" => ArchitectureConfig::canonical(tasks, pool),
        "miniature" => ArchitectureConfig::miniature(tasks, pool),
        "micro" => ArchitectureConfig::micro(tasks, pool),
        other => return Err(PyValueError::new_err(format!("unknown preset '{other}'"))),
    };
    cfg.rho_init = rho_init;
    Ok(cfg)
}

/// A moment-propagating network with randomly initialized variational
/// parameters, for driving the forward pass from Python.
#[pyclass(name = "Network")]
struct PyNetwork {
    net: SeResNet,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (preset="miniature", pooling="max", tasks=1, seed=0, rho_init=1e-4))]
    fn new(preset: &str, pooling: &str, tasks: usize, seed: u64, rho_init: f64) -> PyResult<Self> {
        let cfg = arch(preset, pooling, tasks, rho_init)?;
        Ok(PyNetwork {
            net: SeResNet::init(cfg, seed).map_err(err)?,
        })
    }

    /// Input spectrogram shape (frames, mels).
    #[getter]
    fn input_shape(&self) -> (usize, usize) {
        self.net.config.input_shape
    }

    #[getter]
    fn tasks(&self) -> usize {
        self.net.config.tasks
    }

    /// Propagate a deterministic spectrogram; returns one (mean, variance)
    /// logit pair per task.
    fn logit_moments(&self, spectrogram: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
        let (h, w) = self.net.config.input_shape;
        if spectrogram.len() != h * w {
            return Err(PyValueError::new_err(format!(
                "expected {}x{} = {} values, got {}",
                h,
                w,
                h * w,
                spectrogram.len()
            )));
        }
        let input = Tensor::new(vec![h, w], spectrogram);
        self.net.logit_moments(&input).map_err(err)
    }

    /// Bayes-output probabilities (sigmoid-moment means of the logits).
    fn predict(&self, spectrogram: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self
            .logit_moments(spectrogram)?
            .into_iter()
            .map(|(m, v)| activations::sigmoid_moments_scalar(m, v).0)
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(input={:?}, tasks={}, stages={})",
            self.net.config.input_shape,
            self.net.config.tasks,
            self.net.config.stages.len()
        )
    }
}

/// Default run configuration as a TOML string.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml()
}

#[pymodule]
fn varprop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGaussianTensor>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(smoothing_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_labels, m)?)?;
    m.add_function(wrap_pyfunction!(relu_moments, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid_moments, m)?)?;
    m.add_function(wrap_pyfunction!(au_pr, m)?)?;
    m.add_function(wrap_pyfunction!(au_roc, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(log_mel_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(shape_trace, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
