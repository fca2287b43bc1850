//! Python bindings: datasets, guidelines, grading, and a provider-backed
//! session for learning, guided solving and evaluation.

use std::path::PathBuf;
use std::sync::Arc;

use guided_core::config::{CliConfig, ProviderStack, Source};
use guided_core::harness::{render_summary, DatasetFormat, Grader, QaFields};
use guided_core::provider::{MockProvider, MockScript};
use guided_core::{
    guided_solve, learn_guidelines, validate_guideline, Baseline, EvalReport, ExecutionConfig, ExperimentConfig,
    Harness, LearnConfig, Pipeline, TaskKind, TemplateSet,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(guided_reasoning, GuidedError, PyException);

fn err(e: impl ToString) -> PyErr {
    GuidedError::new_err(e.to_string())
}

fn bad(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn kind_name(k: TaskKind) -> &'static str {
    match k {
        TaskKind::MultipleChoice => "multiple_choice",
        TaskKind::Numeric => "numeric",
        TaskKind::FreeText => "free_text",
        TaskKind::Code => "code",
    }
}

fn json_text(bytes: Vec<u8>) -> PyResult<String> {
    String::from_utf8(bytes).map_err(err)
}

#[pyclass(module = "guided_reasoning", frozen, from_py_object)]
#[derive(Clone)]
struct Sample {
    inner: guided_core::Sample,
}

#[pymethods]
impl Sample {
    #[new]
    #[pyo3(signature = (id, task_id, input_text, gold_answer, kind = "free_text"))]
    fn new(id: String, task_id: String, input_text: String, gold_answer: String, kind: &str) -> PyResult<Self> {
        let kind = kind.parse::<TaskKind>().map_err(bad)?;
        Ok(Sample {
            inner: guided_core::Sample::new(id, task_id, input_text, gold_answer, kind),
        })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn task_id(&self) -> &str {
        &self.inner.task_id
    }

    #[getter]
    fn input_text(&self) -> &str {
        &self.inner.input_text
    }

    #[getter]
    fn gold_answer(&self) -> &str {
        &self.inner.gold_answer
    }

    #[getter]
    fn kind(&self) -> &'static str {
        kind_name(self.inner.kind)
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, task_id={:?})", self.inner.id, self.inner.task_id)
    }
}

#[pyclass(module = "guided_reasoning", frozen, from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: guided_core::Dataset,
}

#[pymethods]
impl Dataset {
    /// Loads a `bbh_json` or `jsonl_qa` file; the format follows the extension when omitted.
    #[staticmethod]
    #[pyo3(signature = (path, task, format = None, kind = None))]
    fn load(path: PathBuf, task: &str, format: Option<&str>, kind: Option<&str>) -> PyResult<Self> {
        let format = match format {
            Some(f) => f.parse::<DatasetFormat>().map_err(bad)?,
            None if path.extension().is_some_and(|e| e == "jsonl") => DatasetFormat::JsonlQa,
            None => DatasetFormat::BbhJson,
        };
        let fields = QaFields {
            kind: kind.map(str::parse::<TaskKind>).transpose().map_err(bad)?,
            ..QaFields::default()
        };
        let inner = guided_core::load_dataset(&path, format, task, &fields).map_err(bad)?;
        Ok(Dataset { inner })
    }

    #[staticmethod]
    fn from_samples(task_id: &str, samples: Vec<Sample>) -> PyResult<Self> {
        let inner =
            guided_core::Dataset::from_samples(task_id, samples.into_iter().map(|s| s.inner).collect()).map_err(bad)?;
        Ok(Dataset { inner })
    }

    #[getter]
    fn task_id(&self) -> &str {
        &self.inner.task_id
    }

    #[getter]
    fn digest(&self) -> &str {
        &self.inner.source_digest
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// Seeded train/test partition.
    #[pyo3(signature = (train_fraction = 0.25, seed = 0))]
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let (a, b) = guided_core::split(&self.inner, train_fraction, seed).map_err(bad)?;
        Ok((Dataset { inner: a }, Dataset { inner: b }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __getitem__(&self, i: isize) -> PyResult<Sample> {
        let n = self.inner.len() as isize;
        let j = if i < 0 { i + n } else { i };
        if !(0..n).contains(&j) {
            return Err(PyIndexError::new_err("sample index out of range"));
        }
        Ok(Sample {
            inner: self.inner.samples[j as usize].clone(),
        })
    }
}

#[pyclass(module = "guided_reasoning", frozen, from_py_object)]
#[derive(Clone)]
struct Guideline {
    inner: guided_core::Guideline,
}

#[pymethods]
impl Guideline {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = guided_core::read_guideline(&path).map_err(bad)?;
        Ok(Guideline { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = guided_core::Guideline::from_json_bytes(text.as_bytes()).map_err(bad)?;
        Ok(Guideline { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        json_text(self.inner.to_json_bytes().map_err(err)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        guided_core::write_guideline(&self.inner, &path).map(drop).map_err(err)
    }

    /// Invariant violations; empty when the guideline is valid.
    fn violations(&self) -> Vec<String> {
        validate_guideline(&self.inner).iter().map(ToString::to_string).collect()
    }

    #[getter]
    fn task_id(&self) -> &str {
        &self.inner.task_id
    }

    #[getter]
    fn source_model(&self) -> &str {
        &self.inner.provenance.source_model
    }

    #[getter]
    fn steps<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .steps
            .iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("index", s.index)?;
                d.set_item("title", &s.title)?;
                d.set_item("execution", &s.execution)?;
                d.set_item("mistakes", &s.mistakes)?;
                d.set_item("preventions", &s.preventions)?;
                Ok(d)
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Guideline(task_id={:?}, steps={})", self.inner.task_id, self.inner.len())
    }
}

#[pyclass(module = "guided_reasoning", frozen)]
struct Trajectory {
    inner: guided_core::Trajectory,
}

#[pymethods]
impl Trajectory {
    #[getter]
    fn sample_id(&self) -> &str {
        &self.inner.sample_id
    }

    #[getter]
    fn final_answer(&self) -> &str {
        &self.inner.final_answer
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    #[getter]
    fn steps<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .steps
            .iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("index", s.index)?;
                d.set_item("raw", &s.raw_content)?;
                d.set_item("refined", &s.refined_content)?;
                d.set_item("rounds", s.rounds_applied)?;
                Ok(d)
            })
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(err)
    }
}

#[pyclass(module = "guided_reasoning", frozen, from_py_object)]
#[derive(Clone)]
struct Report {
    inner: EvalReport,
}

#[pymethods]
impl Report {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Report {
            inner: EvalReport::load(&path).map_err(bad)?,
        })
    }

    #[getter]
    fn run_id(&self) -> &str {
        &self.inner.run_id
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.task_label()
    }

    #[getter]
    fn method(&self) -> &str {
        &self.inner.method
    }

    #[getter]
    fn accuracy(&self) -> f64 {
        self.inner.accuracy
    }

    #[getter]
    fn correct(&self) -> usize {
        self.inner.correct
    }

    #[getter]
    fn provider_calls(&self) -> usize {
        self.inner.total_provider_calls()
    }

    #[getter]
    fn errored(&self) -> Vec<(String, String)> {
        self.inner.errored.iter().map(|e| (e.sample_id.clone(), e.error.clone())).collect()
    }

    #[getter]
    fn per_sample<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .per_sample
            .iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("sample_id", &s.sample_id)?;
                d.set_item("predicted", &s.predicted)?;
                d.set_item("gold", &s.gold)?;
                d.set_item("correct", s.correct)?;
                d.set_item("provider_calls", s.provider_calls)?;
                Ok(d)
            })
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        json_text(self.inner.to_json_bytes().map_err(err)?)
    }

    fn __repr__(&self) -> String {
        format!("Report({} on {}: {:.4})", self.inner.method, self.inner.task_label(), self.inner.accuracy)
    }
}

/// Provider stack plus templates. Built from a TOML config, a mock script, or a replay tape.
#[pyclass(module = "guided_reasoning", frozen)]
struct Session {
    cfg: CliConfig,
    stack: ProviderStack,
    templates: TemplateSet,
}

impl Session {
    fn pipeline(&self) -> Pipeline<'_> {
        static GRADER: std::sync::OnceLock<Grader> = std::sync::OnceLock::new();
        Pipeline::new(self.stack.provider(), &self.templates, GRADER.get_or_init(Grader::default))
            .with_sampling(self.cfg.sampling())
    }
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (config = None, *, mock_script = None, replay = None, record = false, use_cache = true))]
    fn new(
        config: Option<PathBuf>,
        mock_script: Option<PathBuf>,
        replay: Option<PathBuf>,
        record: bool,
        use_cache: bool,
    ) -> PyResult<Self> {
        let cfg = match &config {
            Some(p) => CliConfig::load(p).map_err(bad)?,
            None => CliConfig::default(),
        };
        let stack = match (mock_script, replay) {
            (Some(_), Some(_)) => return Err(bad("mock_script and replay are exclusive")),
            (Some(script), None) => {
                let script = MockScript::load(&script).map_err(bad)?;
                ProviderStack::from_base(
                    Arc::new(MockProvider::from_script(script)),
                    cfg.cache_dir.as_deref(),
                    use_cache,
                    record,
                )
                .map_err(bad)?
            }
            (None, Some(tape)) => ProviderStack::build(&cfg, Source::Replay(tape), use_cache, record).map_err(bad)?,
            (None, None) => ProviderStack::build(&cfg, Source::Live, use_cache, record).map_err(bad)?,
        };
        let templates = cfg.templates().map_err(bad)?;
        Ok(Session { cfg, stack, templates })
    }

    /// Calls that reached the backend.
    #[getter]
    fn live_calls(&self) -> usize {
        self.stack.live_calls()
    }

    fn save_tape(&self, path: PathBuf) -> PyResult<()> {
        self.stack.save_tape(&path).map_err(err)
    }

    /// Learns a guideline from every sample of `train`.
    #[pyo3(signature = (train, model, steps = None, concurrency = None))]
    fn learn(
        &self,
        py: Python<'_>,
        train: &Dataset,
        model: String,
        steps: Option<usize>,
        concurrency: Option<usize>,
    ) -> PyResult<Guideline> {
        let mut lc = LearnConfig::new(model);
        lc.max_steps = self.cfg.max_steps.max(steps.unwrap_or(0));
        lc.target_steps = steps;
        lc.concurrency = concurrency.unwrap_or(self.cfg.concurrency);
        lc.dataset_digest = train.inner.source_digest.clone();
        let learned = py
            .detach(|| learn_guidelines(&self.pipeline(), &train.inner.task_id, &train.inner.samples, &lc))
            .map_err(err)?;
        Ok(Guideline {
            inner: learned.guideline,
        })
    }

    /// Guided step-by-step solve of one sample.
    #[pyo3(signature = (sample, guideline, executor, refiner = None, rounds = 1, stepwise = true))]
    #[allow(clippy::too_many_arguments)]
    fn solve(
        &self,
        py: Python<'_>,
        sample: &Sample,
        guideline: &Guideline,
        executor: String,
        refiner: Option<String>,
        rounds: u32,
        stepwise: bool,
    ) -> PyResult<Trajectory> {
        let refiner = refiner.unwrap_or_else(|| executor.clone());
        let ec = ExecutionConfig::new(executor, refiner).with_rounds(rounds).with_stepwise(stepwise);
        ec.check(self.cfg.refine_cap).map_err(bad)?;
        let inner = py
            .detach(|| guided_solve(&self.pipeline(), &sample.inner, &guideline.inner, &ec))
            .map_err(err)?;
        Ok(Trajectory { inner })
    }

    /// Runs one configuration on the test split of `dataset`.
    #[pyo3(signature = (
        dataset, model, *, refiner = None, learn = true, stepwise = true, refine = true,
        rounds = None, baseline = None, guideline = None, steps = None, strict = false
    ))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        model: String,
        refiner: Option<String>,
        learn: bool,
        stepwise: bool,
        refine: bool,
        rounds: Option<u32>,
        baseline: Option<&str>,
        guideline: Option<PathBuf>,
        steps: Option<usize>,
        strict: bool,
    ) -> PyResult<Report> {
        let mut e = match baseline {
            Some(b) => ExperimentConfig::baseline(model, b.parse::<Baseline>().map_err(bad)?),
            None => {
                let mut e = ExperimentConfig::ablation(model.clone(), learn, stepwise, refine);
                e.refiner_model = refiner.unwrap_or(model);
                e.refine_rounds = rounds.unwrap_or(self.cfg.refine_rounds);
                e.guideline_path = guideline;
                e.target_steps = steps;
                e
            }
        };
        e.split_seed = self.cfg.split_seed;
        e.train_fraction = self.cfg.train_fraction;
        e.max_steps = self.cfg.max_steps.max(steps.unwrap_or(0));
        let e = e.normalized();
        e.validate(self.cfg.refine_cap).map_err(bad)?;
        let inner = py
            .detach(|| {
                let mut h = Harness::new(self.pipeline());
                h.concurrency = self.cfg.concurrency;
                h.strict = strict || self.cfg.strict;
                h.refine_cap = self.cfg.refine_cap;
                h.guideline_dir = self.cfg.guideline_dir.clone();
                h.run_experiment(&e, &dataset.inner)
            })
            .map_err(err)?;
        Ok(Report { inner })
    }
}

/// Answer-kind-aware comparison of a prediction against the gold answer.
#[pyfunction]
#[pyo3(signature = (predicted, gold, kind = "free_text"))]
fn grade(predicted: &str, gold: &str, kind: &str) -> PyResult<bool> {
    Ok(guided_core::grade(predicted, gold, kind.parse::<TaskKind>().map_err(bad)?))
}

/// Last `<answer>` tag content, or the trimmed text when there is none.
#[pyfunction]
fn extract_answer(text: &str) -> String {
    guided_core::extract_answer(text)
}

/// Markdown accuracy table over several reports.
#[pyfunction]
fn summary(reports: Vec<Report>) -> PyResult<String> {
    let rs: Vec<EvalReport> = reports.into_iter().map(|r| r.inner).collect();
    render_summary(&rs).map_err(bad)
}

#[pymodule]
fn guided_reasoning(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GuidedError", m.py().get_type::<GuidedError>())?;
    m.add_class::<Sample>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Guideline>()?;
    m.add_class::<Trajectory>()?;
    m.add_class::<Report>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(grade, m)?)?;
    m.add_function(wrap_pyfunction!(extract_answer, m)?)?;
    m.add_function(wrap_pyfunction!(summary, m)?)?;
    Ok(())
}
