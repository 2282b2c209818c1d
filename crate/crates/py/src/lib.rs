//! Python bindings: configs, training, checkpoints, sampling, metrics and
//! report comparison. Images cross the boundary as flat `[3·32·32]` lists
//! in channel-major order.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use vllm_lab::checkpoint::Checkpoint;
use vllm_lab::config::RunConfig;
use vllm_lab::flow::sample_batch;
use vllm_lab::model::{hybrid_mask, MaskMode};
use vllm_lab::pipeline::{eval_set, evaluate, reference_for, sample_tokens, train_run, Trainer};
use vllm_lab::report::{compare as compare_tables, load_table, Metric};
use vllm_lab::Tensor;

create_exception!(vllm_lab_py, VllmLabError, PyException);

const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];

/// Converts a library error into `VllmLabError("CODE: message")`.
fn py_err(e: vllm_lab::Error) -> PyErr {
    VllmLabError::new_err(format!("{}: {}", e.code(), e))
}

fn image(data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(IMAGE_SHAPE.to_vec(), data).map_err(py_err)
}

/// Run configuration in `key = value` form.
#[pyclass(name = "RunConfig", module = "vllm_lab_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Parses `text`; unspecified keys keep their defaults.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig { inner: RunConfig::parse(text).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig { inner: RunConfig::load(&path).map_err(py_err)? })
    }

    /// Every key in canonical order.
    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn as_dict(&self) -> Vec<(String, String)> {
        self.inner
            .to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(hash={})", &self.inner.hash()[..12])
    }
}

/// Evaluation report: ordered metrics, `None` for absent ones.
#[pyclass(name = "MetricsReport", module = "vllm_lab_py", skip_from_py_object)]
#[derive(Clone)]
struct PyMetricsReport {
    inner: vllm_lab::report::MetricsReport,
}

#[pymethods]
impl PyMetricsReport {
    #[staticmethod]
    fn from_kv(text: &str) -> PyResult<Self> {
        Ok(PyMetricsReport { inner: vllm_lab::report::MetricsReport::from_kv(text).map_err(py_err)? })
    }

    fn get(&self, key: &str) -> Option<f64> {
        self.inner.get(key).and_then(Metric::value)
    }

    fn keys(&self) -> Vec<String> {
        self.inner.values.iter().map(|(k, _)| k.clone()).collect()
    }

    fn meta(&self, key: &str) -> Option<String> {
        self.inner.meta(key).map(str::to_string)
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv()
    }
}

/// A trained state: token model, tokenizer and optional flow.
#[pyclass(name = "Model", module = "vllm_lab_py")]
struct PyModel {
    trainer: Trainer,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyModel { trainer: Trainer::for_inference(&ckpt).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.trainer.checkpoint().save(&path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig { inner: self.trainer.config.clone() }
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.trainer.model.params.count()
    }

    #[getter]
    fn has_flow(&self) -> bool {
        self.trainer.flow.is_some()
    }

    #[getter]
    fn token_steps(&self) -> u64 {
        self.trainer.token_step
    }

    /// Token-pathway image for `caption`.
    #[pyo3(signature = (caption, seed = 0))]
    fn sample(&self, caption: &str, seed: u64) -> PyResult<Vec<f64>> {
        let t = &self.trainer;
        Ok(sample_tokens(&t.model, &t.vocab, &t.config, caption, seed).map_err(py_err)?.image.into_data())
    }

    /// Flow-pathway images for `caption`, clamped to [0, 1].
    #[pyo3(signature = (caption, count = 1, seed = 0))]
    fn sample_flow(&self, caption: &str, count: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let t = &self.trainer;
        let flow = t
            .flow
            .as_ref()
            .ok_or_else(|| VllmLabError::new_err("E_CONFIG: checkpoint has no flow pathway"))?;
        let text = t.vocab.encode_text(caption).map_err(py_err)?;
        let cond = t.model.embed_text(&t.vocab, &text).map_err(py_err)?;
        let out = sample_batch(&flow.net, &vec![cond; count], t.config.flow_steps, t.config.flow_integrator, seed)
            .map_err(py_err)?;
        Ok(out.into_iter().map(|s| s.clamped).collect())
    }

    /// Metrics on the generated eval set `(eval_seed, eval_count)`.
    #[pyo3(signature = (eval_seed = 1000, eval_count = 32))]
    fn evaluate(&self, eval_seed: u64, eval_count: usize) -> PyResult<PyMetricsReport> {
        let mut cfg = self.trainer.config.clone();
        cfg.eval_seed = eval_seed;
        cfg.eval_count = eval_count;
        let mut report = evaluate(&self.trainer, &eval_set(&cfg).map_err(py_err)?).map_err(py_err)?;
        report.derive_headline(None);
        Ok(PyMetricsReport { inner: report })
    }
}

/// Trains both pathways for `config`; returns the model and per-step
/// token losses.
#[pyfunction]
fn train(py: Python<'_>, config: &PyRunConfig) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = config.inner.clone();
    let outcome = py.detach(move || train_run(&cfg, &mut |_| {})).map_err(py_err)?;
    let losses = outcome.token_losses.iter().map(|l| l.total).collect();
    Ok((PyModel { trainer: outcome.trainer }, losses))
}

/// Clean render of the scene a caption describes.
#[pyfunction]
fn render(caption: &str) -> PyResult<Vec<f64>> {
    Ok(reference_for(caption).map_err(py_err)?.into_data())
}

#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    vllm_lab::metrics::ssim(&image(a)?, &image(b)?).map_err(py_err)
}

#[pyfunction]
fn bleu4(candidate: &str, references: Vec<String>) -> f64 {
    let refs: Vec<&str> = references.iter().map(String::as_str).collect();
    vllm_lab::metrics::bleu4(candidate, &refs)
}

/// `(recall@k pairs, mrr, ndcg)` for score rows and their true columns.
#[pyfunction]
#[pyo3(signature = (scores, truth, ks = vec![1, 5, 10]))]
fn ranking_metrics(scores: Vec<Vec<f64>>, truth: Vec<usize>, ks: Vec<usize>) -> PyResult<(Vec<(usize, f64)>, f64, f64)> {
    let m = vllm_lab::metrics::ranking_metrics(&scores, &truth, &ks).map_err(py_err)?;
    Ok((m.recall_at, m.mrr, m.ndcg))
}

/// Hybrid attention mask as rows of booleans.
#[pyfunction]
#[pyo3(signature = (text_len, image_len, refine = false))]
fn attention_mask(text_len: usize, image_len: usize, refine: bool) -> Vec<Vec<bool>> {
    let mode = if refine { MaskMode::Refine } else { MaskMode::Generate };
    let m = hybrid_mask(text_len, image_len, mode);
    m.allowed.chunks(m.len).map(<[bool]>::to_vec).collect()
}

/// Ranks systems across table CSVs and `metrics.txt` reports; returns the
/// text rendering.
#[pyfunction]
fn compare(paths: Vec<PathBuf>) -> PyResult<String> {
    let refs: Vec<&std::path::Path> = paths.iter().map(PathBuf::as_path).collect();
    Ok(compare_tables(&load_table(&refs).map_err(py_err)?).map_err(py_err)?.to_text())
}

#[pymodule]
fn vllm_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VllmLabError", m.py().get_type::<VllmLabError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyMetricsReport>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(attention_mask, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
