//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use mqmha::harness::{
    evaluate, generate_dataset, nearest_centroid_accuracy, train, Dataset, EncoderConfig, PoolingChoice,
    SyntheticSpeakerSpec, TrainConfig,
};
use mqmha::loss::{LossConfig, PenaltyMode};
use mqmha::pooling::{self, PoolingParams, WeightMode};
use mqmha::{gradcheck, loss, metrics, Error, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Dimension(_) | Error::EmptyInput(_) | Error::Config { .. } | Error::Input(_) | Error::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(to_py)
}

type FrameAndParamGrads = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = t.dims2().expect("two-dimensional tensor");
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

fn penalty_mode(mode: &str) -> PyResult<PenaltyMode> {
    match mode {
        "additive" => Ok(PenaltyMode::Additive),
        "angular" => Ok(PenaltyMode::Angular),
        other => Err(PyValueError::new_err(format!(
            "mode must be 'additive' or 'angular', got {other:?}"
        ))),
    }
}

/// Shape of an attentive pooling layer.
#[pyclass(name = "PoolingConfig", from_py_object)]
#[derive(Clone)]
struct PyPoolingConfig {
    inner: pooling::PoolingConfig,
}

#[pymethods]
impl PyPoolingConfig {
    #[new]
    #[pyo3(signature = (channels, heads=1, queries=1, depth=1, hidden=pooling::DEFAULT_HIDDEN, unique=false))]
    fn new(channels: usize, heads: usize, queries: usize, depth: usize, hidden: usize, unique: bool) -> PyResult<Self> {
        let mode = if unique { WeightMode::Unique } else { WeightMode::Shared };
        let inner = pooling::PoolingConfig::new(channels, heads, queries, depth)
            .with_hidden(hidden)
            .with_weight_mode(mode);
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.heads
    }

    #[getter]
    fn queries(&self) -> usize {
        self.inner.queries
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    fn output_len(&self) -> usize {
        self.inner.output_len()
    }

    fn label(&self) -> String {
        self.inner.label()
    }

    fn __repr__(&self) -> String {
        format!("PoolingConfig({})", self.inner.label())
    }
}

/// A pooling layer with its parameters.
#[pyclass(name = "Pooling")]
struct PyPooling {
    config: pooling::PoolingConfig,
    params: PoolingParams,
}

#[pymethods]
impl PyPooling {
    /// Glorot-initialized parameters, or all zeros with `zero=True`.
    #[new]
    #[pyo3(signature = (config, seed=0, zero=false))]
    fn new(config: PyPoolingConfig, seed: u64, zero: bool) -> PyResult<Self> {
        let params = if zero {
            PoolingParams::zeros(&config.inner)
        } else {
            pooling::init_pooling_params(&config.inner, seed)
        }
        .map_err(to_py)?;
        Ok(Self {
            config: config.inner,
            params,
        })
    }

    fn forward(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let o = matrix(&frames)?;
        Ok(pooling::mqmha_forward(&o, &self.params, &self.config)
            .map_err(to_py)?
            .value
            .into_data())
    }

    /// Gradients of `⟨grad, forward(frames)⟩` w.r.t. the frames and each
    /// parameter tensor (flattened, in storage order).
    fn backward(&self, frames: Vec<Vec<f64>>, grad: Vec<f64>) -> PyResult<FrameAndParamGrads> {
        let o = matrix(&frames)?;
        let fwd = pooling::mqmha_forward(&o, &self.params, &self.config).map_err(to_py)?;
        let g = Tensor::vector(grad).map_err(to_py)?;
        let (go, gp) = pooling::mqmha_backward(&g, &fwd.cache).map_err(to_py)?;
        Ok((rows(&go), gp.tensors().iter().map(|t| t.data().to_vec()).collect()))
    }

    /// Weights indexed `[t][h][q][s]`.
    fn attention_weights(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<Vec<Vec<Vec<f64>>>>> {
        let o = matrix(&frames)?;
        let w = pooling::attention_weights(&o, &self.params, &self.config).map_err(to_py)?;
        let [t, h, q, s] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        Ok((0..t)
            .map(|ti| {
                (0..h)
                    .map(|hi| {
                        (0..q)
                            .map(|qi| {
                                let start = ((ti * h + hi) * q + qi) * s;
                                w.data()[start..start + s].to_vec()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect())
    }

    fn parameters(&self) -> Vec<Vec<f64>> {
        self.params.tensors().iter().map(|t| t.data().to_vec()).collect()
    }
}

#[pyfunction]
#[pyo3(signature = (frames, epsilon=pooling::DEFAULT_EPSILON))]
fn statistics_pool(frames: Vec<Vec<f64>>, epsilon: f64) -> PyResult<Vec<f64>> {
    let o = matrix(&frames)?;
    Ok(pooling::statistics_pool(&o, epsilon).map_err(to_py)?.value.into_data())
}

/// Mean loss over rows and its gradient w.r.t. the cosine matrix.
#[pyfunction]
#[pyo3(signature = (cos, labels, scale=35.0, margin=0.2, margin_prime=0.06, k_top=5, mode="additive", m_current=None))]
#[allow(clippy::too_many_arguments)]
fn inter_topk_loss(
    cos: Vec<Vec<f64>>,
    labels: Vec<usize>,
    scale: f64,
    margin: f64,
    margin_prime: f64,
    k_top: usize,
    mode: &str,
    m_current: Option<f64>,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let cos = matrix(&cos)?;
    let config = LossConfig {
        scale,
        margin,
        margin_prime,
        k_top,
        sub_centers: 1,
        penalty_mode: penalty_mode(mode)?,
        classes: cos.shape()[1],
        ramp_margin_prime: false,
    };
    let out = loss::inter_topk_loss(&cos, &labels, &config, m_current.unwrap_or(margin)).map_err(to_py)?;
    Ok((out.loss, rows(&out.grad)))
}

#[pyfunction]
fn averaged_margin(m: f64, m_prime: f64, k: usize, classes: usize) -> PyResult<f64> {
    loss::averaged_margin(m, m_prime, k, classes).map_err(to_py)
}

#[pyfunction]
fn cosine_score(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::cosine_score(&a, &b).map_err(to_py)
}

/// `(eer, threshold)`.
#[pyfunction]
fn compute_eer(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<(f64, f64)> {
    metrics::compute_eer(&scores, &labels).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (scores, labels, p_target, c_miss=1.0, c_fa=1.0))]
fn compute_min_dcf(scores: Vec<f64>, labels: Vec<bool>, p_target: f64, c_miss: f64, c_fa: f64) -> PyResult<f64> {
    metrics::compute_min_dcf(&scores, &labels, p_target, c_miss, c_fa).map_err(to_py)
}

/// `(name, instances, max_rel_error, tolerance)` per gradient family.
#[pyfunction]
#[pyo3(signature = (seed=7, instances=100))]
fn gradient_suite(seed: u64, instances: usize) -> PyResult<Vec<(String, usize, f64, f64)>> {
    Ok(gradcheck::run_suite(seed, instances)
        .map_err(to_py)?
        .into_iter()
        .map(|r| (r.name, r.instances, r.max_rel_error, r.tolerance))
        .collect())
}

/// Synthetic speakers with held-out trials.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (num_speakers=20, utterances_per_speaker=24, heldout_per_speaker=6, frames=20, feature_dim=16, center_scale=1.0, noise_scale=0.5, seed=2021))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        num_speakers: usize,
        utterances_per_speaker: usize,
        heldout_per_speaker: usize,
        frames: usize,
        feature_dim: usize,
        center_scale: f64,
        noise_scale: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SyntheticSpeakerSpec {
            num_speakers,
            utterances_per_speaker,
            heldout_per_speaker,
            frames,
            feature_dim,
            center_scale,
            noise_scale,
            seed,
        };
        Ok(Self {
            inner: generate_dataset(&spec).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Dataset::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.utterances.len()
    }

    fn utterance_ids(&self) -> Vec<String> {
        self.inner.utterances.iter().map(|u| u.id.clone()).collect()
    }

    fn features(&self, id: &str) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .utterances
            .iter()
            .find(|u| u.id == id)
            .map(|u| rows(&u.features))
            .ok_or_else(|| PyValueError::new_err(format!("unknown utterance {id:?}")))
    }

    /// `(target, enroll_id, test_id)` triples.
    fn trials(&self) -> Vec<(bool, String, String)> {
        self.inner
            .trials
            .entries
            .iter()
            .map(|t| (t.target, t.enroll.clone(), t.test.clone()))
            .collect()
    }

    fn nearest_centroid_accuracy(&self) -> f64 {
        nearest_centroid_accuracy(&self.inner)
    }

    /// Trains the default encoder with `pooling` (statistics pooling when
    /// `None`) and the inter-topK loss, then scores the held-out trials.
    #[pyo3(signature = (pooling=None, max_steps=200, seed=7, margin_prime=0.06, k_top=5))]
    fn train_and_evaluate(
        &self,
        pooling: Option<PyPoolingConfig>,
        max_steps: usize,
        seed: u64,
        margin_prime: f64,
        k_top: usize,
    ) -> PyResult<(Vec<f64>, f64, f64, f64)> {
        let encoder = EncoderConfig::default();
        let choice = match pooling {
            Some(p) => PoolingChoice::Mqmha(p.inner),
            None => PoolingChoice::statistics(),
        };
        let loss = LossConfig {
            margin_prime,
            k_top,
            ..LossConfig::inter_topk(self.inner.spec.num_speakers)
        };
        let cfg = TrainConfig {
            max_steps,
            seed,
            validate_every: (max_steps / 5).max(1),
            margin_warmup_steps: (max_steps / 4).max(1),
            ..TrainConfig::default()
        };
        let out = train(&self.inner, &encoder, &choice, &loss, &cfg).map_err(to_py)?;
        let report = evaluate(&out.model, &self.inner, &self.inner.trials).map_err(to_py)?;
        Ok((
            out.trace.losses,
            report.eer,
            report.min_dcf_at(0.01).unwrap_or(f64::NAN),
            report.min_dcf_at(0.05).unwrap_or(f64::NAN),
        ))
    }
}

#[pymodule]
fn pymqmha(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPoolingConfig>()?;
    m.add_class::<PyPooling>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(statistics_pool, m)?)?;
    m.add_function(wrap_pyfunction!(inter_topk_loss, m)?)?;
    m.add_function(wrap_pyfunction!(averaged_margin, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_score, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(compute_min_dcf, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    Ok(())
}
