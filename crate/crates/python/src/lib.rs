//! Python bindings for the dynamic-rate tokenizer.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dyntok::corpus::{MelSpectrogram, Utterance};
use dyntok::diagnostics;
use dyntok::dynamic_merge;
use dyntok::fsq::{self, FsqConfig};
use dyntok::harness::{self, Checkpoint, RunConfig, Tokenized};
use dyntok::{Error, Mat};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok(Mat::from_rows(&rows))
}

fn from_mat(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// A run configuration. Every field can be set through TOML.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(s) => RunConfig::from_toml_str(s).map_err(to_py)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[getter]
    fn ratio(&self) -> f64 {
        self.inner.merge.ratio
    }

    #[getter]
    fn feature_rate(&self) -> f64 {
        self.inner.feature_rate()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(variant={:?}, ratio={})", self.inner.variant.name(), self.inner.merge.ratio)
    }
}

/// One synthetic utterance.
#[pyclass(name = "Utterance", skip_from_py_object)]
#[derive(Clone)]
struct PyUtterance {
    inner: Utterance,
}

#[pymethods]
impl PyUtterance {
    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn transcript(&self) -> Vec<usize> {
        self.inner.transcript.clone()
    }

    /// Log-mel frames as a list of rows.
    #[getter]
    fn mel(&self) -> Vec<Vec<f64>> {
        from_mat(&self.inner.mel.frames)
    }

    #[getter]
    fn frame_rate(&self) -> f64 {
        self.inner.mel.frame_rate
    }

    fn __repr__(&self) -> String {
        format!("Utterance(id={:?}, frames={}, symbols={})", self.inner.id, self.inner.mel.n_frames(), self.inner.transcript.len())
    }
}

/// A tokenizer with its parameters.
#[pyclass(name = "Tokenizer", skip_from_py_object)]
struct PyTokenizer {
    ckpt: Checkpoint,
}

#[pymethods]
impl PyTokenizer {
    /// A freshly initialised (untrained) tokenizer.
    #[new]
    fn new(config: &PyRunConfig) -> PyResult<Self> {
        let mut params = dyntok::params::ParamStore::new();
        let model = harness::Tokenizer::new(&mut params, &config.inner).map_err(to_py)?;
        Ok(Self { ckpt: Checkpoint { config: config.inner.clone(), step: 0, model, params } })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { ckpt: Checkpoint::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.ckpt.save(&path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig { inner: self.ckpt.config.clone() }
    }

    #[getter]
    fn step(&self) -> usize {
        self.ckpt.step
    }

    /// Token ids and the cumulative weight trace (token units) for a log-mel spectrogram.
    fn tokenize(&self, mel: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let mel = MelSpectrogram::new(to_mat(mel)?, self.ckpt.config.corpus.synth.frame_rate);
        let tok = self.ckpt.model.tokenize(&self.ckpt.params, &self.ckpt.config, &mel).map_err(to_py)?;
        Ok((tok.ids, tok.s_hat))
    }

    /// Mel frames regenerated from tokens under oracle upsampling.
    fn reconstruct(&self, ids: Vec<usize>, s_hat: Vec<f64>, mel_frames: usize) -> PyResult<Vec<Vec<f64>>> {
        let tok = Tokenized { frames: s_hat.len(), ids, s_hat };
        let mel = self.ckpt.model.reconstruct(&self.ckpt.params, &self.ckpt.config, &tok, mel_frames).map_err(to_py)?;
        Ok(from_mat(&mel))
    }

    /// Greedy CTC transcription of a token sequence.
    fn transcribe(&self, ids: Vec<usize>, s_hat: Vec<f64>) -> PyResult<Vec<usize>> {
        let tok = Tokenized { frames: s_hat.len(), ids, s_hat };
        self.ckpt.model.transcribe(&self.ckpt.params, &self.ckpt.config, &tok).map_err(to_py)
    }
}

/// Synthesizes the corpus described by `config`.
#[pyfunction]
fn generate_corpus(config: &PyRunConfig) -> PyResult<Vec<PyUtterance>> {
    let utts = config.inner.corpus.generate().map_err(to_py)?;
    Ok(utts.into_iter().map(|inner| PyUtterance { inner }).collect())
}

/// Trains a tokenizer on the training split of `utterances`.
#[pyfunction]
fn train(py: Python<'_>, config: &PyRunConfig, utterances: Vec<PyRef<'_, PyUtterance>>) -> PyResult<PyTokenizer> {
    let utts: Vec<Utterance> = utterances.iter().map(|u| u.inner.clone()).collect();
    let cfg = config.inner.clone();
    let outcome = py.detach(move || harness::train(&cfg, &utts, None, None)).map_err(to_py)?;
    Ok(PyTokenizer { ckpt: outcome.checkpoint })
}

#[pyfunction]
fn target_length(frames: usize, ratio: f64) -> usize {
    dynamic_merge::target_length(frames, ratio)
}

#[pyfunction]
#[pyo3(signature = (s_hat, n, theta = 1.0))]
fn upsample_indices(s_hat: Vec<f64>, n: usize, theta: f64) -> Vec<usize> {
    dynamic_merge::upsample_indices(&s_hat, n, theta)
}

#[pyfunction]
#[pyo3(signature = (digits, levels = None))]
fn digits_to_id(digits: Vec<usize>, levels: Option<Vec<usize>>) -> PyResult<usize> {
    let cfg = levels.map_or_else(FsqConfig::default, |levels| FsqConfig { levels });
    fsq::digits_to_id(&digits, &cfg).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (id, levels = None))]
fn id_to_digits(id: usize, levels: Option<Vec<usize>>) -> PyResult<Vec<usize>> {
    let cfg = levels.map_or_else(FsqConfig::default, |levels| FsqConfig { levels });
    fsq::id_to_digits(id, &cfg).map_err(to_py)
}

#[pyfunction]
fn cer(reference: Vec<usize>, hypothesis: Vec<usize>) -> PyResult<f64> {
    diagnostics::cer(&reference, &hypothesis).map_err(to_py)
}

/// Reconstruction metrics as a dict.
#[pyfunction]
fn mel_metrics(mel_hat: Vec<Vec<f64>>, mel_ref: Vec<Vec<f64>>) -> PyResult<std::collections::HashMap<&'static str, f64>> {
    let m = diagnostics::mel_metrics(&to_mat(mel_hat)?, &to_mat(mel_ref)?).map_err(to_py)?;
    Ok([
        ("mel_mae", m.mel_mae),
        ("mel_corr", m.mel_corr),
        ("delta_mae", m.delta_mae),
        ("flux_mae", m.flux_mae),
        ("duration_ratio", m.duration_ratio),
    ]
    .into_iter()
    .collect())
}

#[pymodule]
fn dyntok_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyUtterance>()?;
    m.add_class::<PyTokenizer>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(target_length, m)?)?;
    m.add_function(wrap_pyfunction!(upsample_indices, m)?)?;
    m.add_function(wrap_pyfunction!(digits_to_id, m)?)?;
    m.add_function(wrap_pyfunction!(id_to_digits, m)?)?;
    m.add_function(wrap_pyfunction!(cer, m)?)?;
    m.add_function(wrap_pyfunction!(mel_metrics, m)?)?;
    Ok(())
}
