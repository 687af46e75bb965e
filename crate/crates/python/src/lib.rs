//! Python bindings: corpus generation, training runs, evaluation and the
//! critic diagnostics.

use std::path::PathBuf;

use pyo3::exceptions::{PyFloatingPointError, PyOSError, PyValueError};
use pyo3::prelude::*;

use rationale_forge::harness::{self, CorpusSource};
use rationale_forge::metrics::{self, MetricsRow};
use rationale_forge::porat::{self, Ablation, AdvantageRecord};
use rationale_forge::rationalization::TokenSequence;
use rationale_forge::synthetic::{self, CorpusSpec};
use rationale_forge::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NonFinite { .. } => PyFloatingPointError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Example", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyExample(TokenSequence);

#[pymethods]
impl PyExample {
    #[getter]
    fn tokens(&self) -> Vec<usize> {
        self.0.tokens.clone()
    }

    #[getter]
    fn label(&self) -> usize {
        self.0.label
    }

    #[getter]
    fn gold_mask(&self) -> Vec<u8> {
        self.0.gold_mask.clone()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Example(len={}, label={})", self.0.len(), self.0.label)
    }
}

/// A generated (or loaded) synthetic corpus with its four splits.
#[pyclass(name = "Corpus", frozen)]
pub struct PyCorpus(synthetic::Corpus);

#[pymethods]
impl PyCorpus {
    /// Generate a corpus. Unset fields keep their defaults.
    #[staticmethod]
    #[pyo3(signature = (seed=0, bias=None, train_size=None, dev_size=None, test_size=None, annotated_size=None, spec_json=None))]
    fn generate(
        seed: u64,
        bias: Option<f64>,
        train_size: Option<usize>,
        dev_size: Option<usize>,
        test_size: Option<usize>,
        annotated_size: Option<usize>,
        spec_json: Option<&str>,
    ) -> PyResult<Self> {
        let mut spec: CorpusSpec = match spec_json {
            Some(s) => serde_json::from_str(s).map_err(json_err)?,
            None => CorpusSpec::default(),
        };
        spec.seed = seed;
        if let Some(b) = bias {
            spec.bias = b;
        }
        let sizes = [
            (train_size, &mut spec.train_size),
            (dev_size, &mut spec.dev_size),
            (test_size, &mut spec.test_size),
            (annotated_size, &mut spec.annotated_size),
        ];
        for (v, slot) in sizes {
            if let Some(v) = v {
                *slot = v;
            }
        }
        synthetic::generate_corpus(&spec)
            .map(PyCorpus)
            .map_err(to_py)
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        synthetic::Corpus::read(&dir).map(PyCorpus).map_err(to_py)
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.0.write(&dir).map_err(to_py)
    }

    fn split(&self, name: &str) -> PyResult<Vec<PyExample>> {
        self.0
            .split(name)
            .map(|s| s.iter().cloned().map(PyExample).collect())
            .ok_or_else(|| PyValueError::new_err(format!("unknown split {name:?}")))
    }

    fn content_hash(&self) -> PyResult<String> {
        self.0.content_hash().map_err(to_py)
    }

    fn spec_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0.spec).map_err(json_err)
    }
}

/// Training configuration. Start from a preset and adjust.
#[pyclass(name = "RunConfig", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig(harness::RunConfig);

impl PyRunConfig {
    fn spec_mut(&mut self) -> PyResult<&mut CorpusSpec> {
        self.0
            .corpus_spec_mut()
            .ok_or_else(|| PyValueError::new_err("corpus is read from a directory"))
    }
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (preset="standard"))]
    fn new(preset: &str) -> PyResult<Self> {
        harness::preset(preset).map(PyRunConfig).map_err(to_py)
    }

    #[staticmethod]
    fn presets() -> Vec<&'static str> {
        harness::PRESETS.to_vec()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let c: harness::RunConfig = serde_json::from_str(text).map_err(json_err)?;
        c.validate().map_err(to_py)?;
        Ok(PyRunConfig(c))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.0).map_err(json_err)
    }

    /// SHA-256 of the configuration, ignoring the output directory.
    fn hash(&self) -> PyResult<String> {
        self.0.hash().map_err(to_py)
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.0.seed
    }

    /// Sets the run seed and, for generated corpora, the corpus seed.
    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
        if let Some(s) = self.0.corpus_spec_mut() {
            s.seed = seed;
        }
    }

    #[getter]
    fn get_epochs(&self) -> usize {
        self.0.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.0.epochs = v;
    }

    #[getter]
    fn get_skew_epochs(&self) -> usize {
        self.0.skew_epochs
    }

    #[setter]
    fn set_skew_epochs(&mut self, v: usize) {
        self.0.skew_epochs = v;
    }

    #[getter]
    fn get_target_sparsity(&self) -> f64 {
        self.0.regularizer.target_sparsity
    }

    #[setter]
    fn set_target_sparsity(&mut self, v: f64) {
        self.0.regularizer.target_sparsity = v;
    }

    #[getter]
    fn get_bias(&self) -> Option<f64> {
        self.0.corpus_spec().map(|s| s.bias)
    }

    #[setter]
    fn set_bias(&mut self, v: f64) -> PyResult<()> {
        self.spec_mut()?.bias = v;
        Ok(())
    }

    #[getter]
    fn get_train_size(&self) -> Option<usize> {
        self.0.corpus_spec().map(|s| s.train_size)
    }

    #[setter]
    fn set_train_size(&mut self, v: usize) -> PyResult<()> {
        self.spec_mut()?.train_size = v;
        Ok(())
    }

    /// Intervention interval N, or None when the scheduler is off.
    #[getter]
    fn get_interval(&self) -> Option<usize> {
        self.0.schedule.map(|s| s.interval)
    }

    #[setter]
    fn set_interval(&mut self, v: Option<usize>) {
        match v {
            Some(n) => {
                self.0
                    .schedule
                    .get_or_insert_with(Default::default)
                    .interval = n
            }
            None => self.0.schedule = None,
        }
    }

    #[getter]
    fn get_ablation(&self) -> Option<String> {
        self.0
            .schedule
            .and_then(|s| serde_json::to_value(s.ablation).ok())
            .and_then(|v| v.as_str().map(str::to_string))
    }

    #[setter]
    fn set_ablation(&mut self, v: &str) -> PyResult<()> {
        let a: Ablation = v.parse().map_err(to_py)?;
        self.0
            .schedule
            .get_or_insert_with(Default::default)
            .ablation = a;
        Ok(())
    }

    #[getter]
    fn get_output_dir(&self) -> Option<PathBuf> {
        self.0.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, v: Option<PathBuf>) {
        self.0.output_dir = v;
    }

    /// Read the corpus from `dir` instead of generating it.
    fn use_corpus_dir(&mut self, dir: PathBuf) {
        self.0.corpus = CorpusSource::Path(dir);
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(preset={:?}, seed={}, epochs={})",
            self.0.preset, self.0.seed, self.0.epochs
        )
    }
}

#[pyclass(name = "MetricsRow", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyMetricsRow(MetricsRow);

#[pymethods]
impl PyMetricsRow {
    #[getter]
    fn epoch(&self) -> usize {
        self.0.epoch
    }
    #[getter]
    fn split(&self) -> String {
        self.0.split.clone()
    }
    #[getter]
    fn acc(&self) -> f64 {
        self.0.acc
    }
    #[getter]
    fn precision(&self) -> f64 {
        self.0.p
    }
    #[getter]
    fn recall(&self) -> f64 {
        self.0.r
    }
    #[getter]
    fn f1(&self) -> f64 {
        self.0.f1
    }
    #[getter]
    fn sparsity(&self) -> f64 {
        self.0.sparsity
    }
    #[getter]
    fn gen_grad_norm(&self) -> f64 {
        self.0.gen_grad_norm
    }
    #[getter]
    fn interventions(&self) -> usize {
        self.0.interventions
    }

    fn __repr__(&self) -> String {
        self.0.csv_line()
    }
}

#[pyclass(name = "RunSummary", frozen)]
pub struct PyRunSummary(harness::RunSummary);

#[pymethods]
impl PyRunSummary {
    #[getter]
    fn config_hash(&self) -> String {
        self.0.config_hash.clone()
    }
    #[getter]
    fn best_epoch(&self) -> usize {
        self.0.best_epoch
    }
    #[getter]
    fn steps(&self) -> usize {
        self.0.steps
    }
    #[getter]
    fn interventions(&self) -> usize {
        self.0.interventions
    }
    /// Annotated-split metrics of the checkpoint picked on dev accuracy.
    #[getter]
    fn selected(&self) -> PyMetricsRow {
        PyMetricsRow(self.0.selected.clone())
    }
    /// Annotated-split metrics after the last epoch.
    #[getter]
    fn last(&self) -> PyMetricsRow {
        PyMetricsRow(self.0.last.clone())
    }
    #[getter]
    fn rows(&self) -> Vec<PyMetricsRow> {
        self.0.rows.iter().cloned().map(PyMetricsRow).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(json_err)
    }
}

#[pyclass(name = "AdvantageRecord", frozen)]
pub struct PyAdvantageRecord(AdvantageRecord);

#[pymethods]
impl PyAdvantageRecord {
    #[getter]
    fn realized_loss(&self) -> f64 {
        self.0.realized_loss
    }
    #[getter]
    fn value(&self) -> f64 {
        self.0.value
    }
    #[getter]
    fn error(&self) -> f64 {
        self.0.error
    }
    #[getter]
    fn q_value(&self) -> f64 {
        self.0.q_value
    }
    #[getter]
    fn advantage(&self) -> f64 {
        self.0.advantage
    }

    fn __repr__(&self) -> String {
        format!(
            "AdvantageRecord(error={}, advantage={})",
            self.0.error, self.0.advantage
        )
    }
}

/// Train one run. Releases the GIL while training.
#[pyfunction]
fn run(py: Python<'_>, config: PyRef<'_, PyRunConfig>) -> PyResult<PyRunSummary> {
    let c = config.0.clone();
    py.detach(move || harness::run(&c))
        .map(PyRunSummary)
        .map_err(to_py)
}

/// Evaluate a checkpoint on a corpus split (annotated by default).
#[pyfunction]
#[pyo3(signature = (checkpoint, config, split="annotated"))]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    config: PyRef<'_, PyRunConfig>,
    split: &str,
) -> PyResult<PyMetricsRow> {
    let c = config.0.clone();
    let split = split.to_string();
    py.detach(move || {
        let corpus = c.load_corpus()?;
        let examples = corpus
            .split(&split)
            .ok_or_else(|| Error::InvalidInput(format!("unknown split {split:?}")))?;
        harness::evaluate_on(&checkpoint, &c, examples, &split)
    })
    .map(PyMetricsRow)
    .map_err(to_py)
}

/// Expand a preset into its grid and run every cell.
#[pyfunction]
#[pyo3(signature = (preset, seeds, out_dir=None, jobs=1))]
fn sweep(
    py: Python<'_>,
    preset: &str,
    seeds: Vec<u64>,
    out_dir: Option<PathBuf>,
    jobs: usize,
) -> PyResult<Vec<(String, PyRunSummary)>> {
    let preset = preset.to_string();
    py.detach(move || {
        let base = harness::preset(&preset)?;
        let cells = harness::sweep_grid(&preset, &base, &seeds)?;
        harness::run_sweep(&cells, out_dir.as_deref(), jobs)
    })
    .map(|rs| {
        rs.into_iter()
            .map(|r| (r.cell.label, PyRunSummary(r.summary)))
            .collect()
    })
    .map_err(to_py)
}

#[pyfunction]
fn diagnose(realized_loss: f64, value: f64, q_value: f64) -> PyAdvantageRecord {
    PyAdvantageRecord(porat::diagnose(realized_loss, value, q_value))
}

/// Token-level (precision, recall, f1), or None when gold is empty.
#[pyfunction]
fn token_prf(pred: Vec<u8>, gold: Vec<u8>) -> PyResult<Option<(f64, f64, f64)>> {
    metrics::token_prf(&pred, &gold)
        .map(|o| o.map(|m| (m.precision, m.recall, m.f1)))
        .map_err(to_py)
}

#[pymodule]
fn rationale_forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExample>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyMetricsRow>()?;
    m.add_class::<PyRunSummary>()?;
    m.add_class::<PyAdvantageRecord>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add_function(wrap_pyfunction!(token_prf, m)?)?;
    Ok(())
}
