//! Python bindings: models, calibration samples, pruning, the drift export
//! and the pathway probe. Reports come back as plain dicts.

use atv_core::error::AtvError;
use atv_core::evalgen::{self, SynthSpec, ToyModelSpec};
use atv_core::io::checkpoint::{read_checkpoint, write_checkpoint};
use atv_core::io::config::RunConfig;
use atv_core::io::jsonl::{read_calibration, write_calibration};
use atv_core::io::report::{to_report_json, ProbeRunReport, PruneRunReport};
use atv_core::model::{LayerKind, Modality, Model, ModelConfig, TokenSequence};
use atv_core::mot::{run_probe_grid, ProbeConfig};
use atv_core::numerics::Matrix;
use atv_core::pruner::run_atv_pipeline;
use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

create_exception!(atv_prune, EmptyCalibrationError, PyValueError);

fn err(e: AtvError) -> PyErr {
    match e {
        AtvError::Io(e) => PyIOError::new_err(e.to_string()),
        AtvError::EmptyCalibration(_) | AtvError::EmptyPathwayCalibration(_) => {
            EmptyCalibrationError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_owned()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} `{value}`")))
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn layer_kind(name: &str) -> PyResult<LayerKind> {
    LayerKind::from_name(name).ok_or_else(|| PyValueError::new_err(format!("unknown layer `{name}`")))
}

/// A toy multimodal transformer.
#[pyclass(name = "Model", module = "atv_prune", frozen, from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: read_checkpoint(path).map_err(err)?,
        })
    }

    /// Random toy weights, deterministic in `seed`.
    #[staticmethod]
    #[pyo3(signature = (d_model=32, n_blocks=8, n_heads=4, d_ffn=None, seed=0, weight_scale=1.0))]
    fn toy(
        d_model: usize,
        n_blocks: usize,
        n_heads: usize,
        d_ffn: Option<usize>,
        seed: u64,
        weight_scale: f64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            d_model,
            n_blocks,
            n_heads,
            d_ffn: d_ffn.unwrap_or(4 * d_model),
        };
        config.validate().map_err(err)?;
        Ok(Self {
            inner: evalgen::toy_model(&ToyModelSpec {
                config,
                seed,
                weight_scale,
            }),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        write_checkpoint(path, &self.inner).map_err(err)
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.config.d_model
    }

    #[getter]
    fn n_blocks(&self) -> usize {
        self.inner.config.n_blocks
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.config.n_heads
    }

    #[getter]
    fn d_ffn(&self) -> usize {
        self.inner.config.d_ffn
    }

    /// Rows of one weight matrix (out x in).
    fn weight(&self, block: usize, layer: &str) -> PyResult<Vec<Vec<f32>>> {
        let b = self
            .inner
            .blocks
            .get(block)
            .ok_or_else(|| PyValueError::new_err(format!("block {block} out of range")))?;
        Ok(b.layer(layer_kind(layer)?).row_iter().map(<[f32]>::to_vec).collect())
    }

    /// Fraction of exactly-zero weights over the six prunable layers.
    fn sparsity(&self) -> f64 {
        let (mut zeros, mut total) = (0usize, 0usize);
        for b in &self.inner.blocks {
            for l in LayerKind::ALL {
                let w = b.layer(l);
                zeros += w.data().iter().filter(|&&x| x == 0.0).count();
                total += w.len();
            }
        }
        zeros as f64 / total as f64
    }

    /// Final hidden states of one sample.
    fn forward(&self, py: Python<'_>, sample: &PySample) -> PyResult<Vec<Vec<f32>>> {
        let out = py.detach(|| self.inner.output(&sample.inner)).map_err(err)?;
        Ok(out.row_iter().map(<[f32]>::to_vec).collect())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config;
        format!(
            "Model(d_model={}, n_blocks={}, n_heads={}, d_ffn={})",
            c.d_model, c.n_blocks, c.n_heads, c.d_ffn
        )
    }
}

/// One calibration sequence with per-token modality labels.
#[pyclass(name = "Sample", module = "atv_prune", frozen, from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: TokenSequence,
}

#[pymethods]
impl PySample {
    #[new]
    fn new(id: String, modality: Vec<String>, embeddings: Vec<Vec<f32>>) -> PyResult<Self> {
        let modality = modality
            .iter()
            .map(|m| parse::<Modality>("modality", m))
            .collect::<PyResult<Vec<_>>>()?;
        let emb = Matrix::from_rows(&embeddings).map_err(err)?;
        Ok(Self {
            inner: TokenSequence::new(id, emb, modality).map_err(err)?,
        })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn modality(&self) -> Vec<&'static str> {
        self.inner
            .modality
            .iter()
            .map(|m| match m {
                Modality::Text => "text",
                Modality::Visual => "visual",
            })
            .collect()
    }

    #[getter]
    fn embeddings(&self) -> Vec<Vec<f32>> {
        self.inner.embeddings.row_iter().map(<[f32]>::to_vec).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample(id={:?}, tokens={}, text={})",
            self.inner.id,
            self.inner.len(),
            self.inner.count(Modality::Text)
        )
    }
}

fn unwrap_samples(samples: Vec<PySample>) -> Vec<TokenSequence> {
    samples.into_iter().map(|s| s.inner).collect()
}

fn wrap_samples(samples: Vec<TokenSequence>) -> Vec<PySample> {
    samples.into_iter().map(|inner| PySample { inner }).collect()
}

#[pyfunction]
#[pyo3(signature = (path, d_model=None))]
fn load_calibration(path: &str, d_model: Option<usize>) -> PyResult<Vec<PySample>> {
    Ok(wrap_samples(read_calibration(path, d_model).map_err(err)?))
}

#[pyfunction]
fn save_calibration(path: &str, samples: Vec<PySample>) -> PyResult<()> {
    write_calibration(path, &unwrap_samples(samples)).map_err(err)
}

/// Synthetic bimodal data, split into calibration and held-out lists.
#[pyfunction]
#[pyo3(signature = (
    seed=0, n_samples=80, n_visual=64, n_text=32, d_model=32,
    separation=10.0, sigma_text=1.0, sigma_visual=1.0, hot_fraction=0.25,
))]
#[allow(clippy::too_many_arguments)]
fn generate_synth(
    seed: u64,
    n_samples: usize,
    n_visual: usize,
    n_text: usize,
    d_model: usize,
    separation: f64,
    sigma_text: f64,
    sigma_visual: f64,
    hot_fraction: f64,
) -> PyResult<(Vec<PySample>, Vec<PySample>)> {
    let data = evalgen::generate(&SynthSpec {
        seed,
        n_samples,
        n_visual,
        n_text,
        d_model,
        separation,
        sigma_text,
        sigma_visual,
        hot_fraction,
    })
    .map_err(err)?;
    Ok((wrap_samples(data.calibration), wrap_samples(data.heldout)))
}

#[allow(clippy::too_many_arguments)]
fn run_config(
    sparsity: Option<f64>,
    pattern: Option<String>,
    alpha: f64,
    signal: &str,
    policy: &str,
    group: &str,
    propagation: &str,
    text_keep_ratio: f64,
    fixed_budget: bool,
    seed: Option<u64>,
) -> PyResult<RunConfig> {
    let c = RunConfig {
        alpha,
        sparsity,
        pattern,
        signal: signal.parse().map_err(err)?,
        policy: parse("policy", policy)?,
        comparison_group: parse("comparison group", group)?,
        propagation: parse("propagation", propagation)?,
        text_keep_ratio,
        fixed_budget,
        seed,
    };
    c.validate().map_err(err)?;
    Ok(c)
}

/// Prunes every block. Returns the pruned model and the report dict that
/// `atv-prune prune` writes.
#[pyfunction]
#[pyo3(signature = (
    model, samples, sparsity=None, pattern=None, alpha=1.0, signal="drift", policy="atv",
    group="per_output_row", propagation="sequential", text_keep_ratio=1.0,
    fixed_budget=false, seed=None,
))]
#[allow(clippy::too_many_arguments)]
fn prune(
    py: Python<'_>,
    model: &PyModel,
    samples: Vec<PySample>,
    sparsity: Option<f64>,
    pattern: Option<String>,
    alpha: f64,
    signal: &str,
    policy: &str,
    group: &str,
    propagation: &str,
    text_keep_ratio: f64,
    fixed_budget: bool,
    seed: Option<u64>,
) -> PyResult<(PyModel, Py<PyAny>)> {
    let config = run_config(
        sparsity,
        pattern,
        alpha,
        signal,
        policy,
        group,
        propagation,
        text_keep_ratio,
        fixed_budget,
        seed,
    )?;
    let data = unwrap_samples(samples);
    let (out, report) = py
        .detach(|| {
            let out = run_atv_pipeline(&model.inner, &data, &config.to_pipeline()?)?;
            let report = to_report_json(&PruneRunReport::new(config, &out.report, None))?;
            Ok((out.model, report))
        })
        .map_err(err)?;
    Ok((PyModel { inner: out }, json_to_py(py, &report)?))
}

/// Block-wise mean visual saliency and budgets, one dict per block.
#[pyfunction]
#[pyo3(signature = (
    model, samples, alpha=1.0, sparsity=0.0, signal="drift", policy="atv",
    group="per_output_row", propagation="sequential",
))]
#[allow(clippy::too_many_arguments)]
fn drift_stats(
    py: Python<'_>,
    model: &PyModel,
    samples: Vec<PySample>,
    alpha: f64,
    sparsity: f64,
    signal: &str,
    policy: &str,
    group: &str,
    propagation: &str,
) -> PyResult<Py<PyAny>> {
    let config = run_config(
        Some(sparsity),
        None,
        alpha,
        signal,
        policy,
        group,
        propagation,
        1.0,
        false,
        None,
    )?;
    let data = unwrap_samples(samples);
    let text = py
        .detach(|| to_report_json(&evalgen::drift_report(&model.inner, &data, &config.to_pipeline()?)?))
        .map_err(err)?;
    json_to_py(py, &text)
}

/// The pathway x pool sensitivity grid plus IoU summaries.
#[pyfunction]
#[pyo3(signature = (model, calibration, heldout, sparsities=vec![0.5, 0.6], iou_pools=("text_only".to_owned(), "visual_only".to_owned())))]
fn probe_mot(
    py: Python<'_>,
    model: &PyModel,
    calibration: Vec<PySample>,
    heldout: Vec<PySample>,
    sparsities: Vec<f64>,
    iou_pools: (String, String),
) -> PyResult<Py<PyAny>> {
    let config = ProbeConfig {
        sparsities,
        iou_pools: (parse("pool", &iou_pools.0)?, parse("pool", &iou_pools.1)?),
        ..ProbeConfig::default()
    };
    let (calibration, heldout) = (unwrap_samples(calibration), unwrap_samples(heldout));
    let text = py
        .detach(|| {
            let grid = run_probe_grid(&model.inner, &calibration, &heldout, &config)?;
            to_report_json(&ProbeRunReport {
                cells: grid.cells,
                iou: grid.summaries,
            })
        })
        .map_err(err)?;
    json_to_py(py, &text)
}

/// Relative output error of `pruned` against `dense` on held-out samples,
/// per token class.
#[pyfunction]
fn evaluate(py: Python<'_>, dense: &PyModel, pruned: &PyModel, heldout: Vec<PySample>) -> PyResult<Py<PyAny>> {
    let data = unwrap_samples(heldout);
    let e = py
        .detach(|| evalgen::evaluate_outputs(&dense.inner, &pruned.inner, &data))
        .map_err(err)?;
    let text = serde_json::to_string(&e).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

#[pymodule]
fn atv_prune(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PySample>()?;
    m.add_function(wrap_pyfunction!(load_calibration, m)?)?;
    m.add_function(wrap_pyfunction!(save_calibration, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synth, m)?)?;
    m.add_function(wrap_pyfunction!(prune, m)?)?;
    m.add_function(wrap_pyfunction!(drift_stats, m)?)?;
    m.add_function(wrap_pyfunction!(probe_mot, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("EmptyCalibrationError", m.py().get_type::<EmptyCalibrationError>())?;
    Ok(())
}
