//! Python bindings: an on-disk trajectory memory plus benchmark and scoring
//! helpers. Results cross the boundary as plain dicts.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;
use stitch_core::bench::{self, BenchConfig};
use stitch_core::eval::{score_answer_set, Matcher};
use stitch_core::model::Domain;
use stitch_core::retrieval::answer_query;
use stitch_core::store::StoreWriter;
use stitch_core::text::{Tokenizer, WordPunctTokenizer};
use stitch_core::{
    Embedder, Gateway, HashEmbedder, IngestSession, IngestionConfig, QueryRequest, RetrievalConfig, Store,
    Timestamp, TrajectoryStep,
};

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// One trajectory in an on-disk store, ingested with the deterministic gateway.
#[pyclass(module = "stitch")]
struct Memory {
    store: Store,
    trajectory_id: String,
    gateway: Arc<Gateway>,
    embedder: Arc<dyn Embedder>,
    ingestion: IngestionConfig,
    session: Mutex<Option<IngestSession<StoreWriter>>>,
}

#[pymethods]
impl Memory {
    #[new]
    #[pyo3(signature = (store_root, trajectory_id, n_start=None, k_update=None))]
    fn new(store_root: PathBuf, trajectory_id: String, n_start: Option<usize>, k_update: Option<usize>) -> PyResult<Self> {
        stitch_core::store::validate_trajectory_id(&trajectory_id).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let mut ingestion = IngestionConfig::default();
        ingestion.n_start = n_start.unwrap_or(ingestion.n_start);
        ingestion.k_update = k_update.unwrap_or(ingestion.k_update);
        ingestion.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            store: Store::open(store_root).map_err(runtime_err)?,
            trajectory_id,
            gateway: Arc::new(Gateway::deterministic()),
            embedder: Arc::new(HashEmbedder::default()),
            ingestion,
            session: Mutex::new(None),
        })
    }

    #[getter]
    fn trajectory_id(&self) -> &str {
        &self.trajectory_id
    }

    /// Appends the next step; returns the stored snippet.
    #[pyo3(signature = (step_index, role, text, timestamp=None))]
    fn append<'py>(
        &self,
        py: Python<'py>,
        step_index: u64,
        role: String,
        text: String,
        timestamp: Option<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ts = timestamp.map(Timestamp::Iso).unwrap_or(Timestamp::Tick(step_index));
        let step = TrajectoryStep::new(step_index, role, text, ts);
        let snippet = py.detach(|| {
            let mut guard = self.session.lock().map_err(runtime_err)?;
            if guard.is_none() {
                let writer = self.store.writer(&self.trajectory_id).map_err(runtime_err)?;
                *guard = Some(
                    IngestSession::new(writer, self.gateway.clone(), self.embedder.clone(), self.ingestion.clone())
                        .map_err(runtime_err)?,
                );
            }
            let session = guard.as_mut().expect("session opened above");
            session.ingest_step(step).map_err(|e| PyValueError::new_err(e.to_string()))
        })?;
        to_py(py, &snippet)
    }

    /// Runs any pending consolidation and releases the writer lock.
    fn close(&self) -> PyResult<()> {
        let mut guard = self.session.lock().map_err(runtime_err)?;
        if let Some(mut s) = guard.take() {
            s.finish().map_err(runtime_err)?;
        }
        Ok(())
    }

    fn __len__(&self) -> PyResult<usize> {
        if !self.store.exists(&self.trajectory_id) {
            return Ok(0);
        }
        Ok(self.store.load_view(&self.trajectory_id).map_err(runtime_err)?.len())
    }

    /// Ranks stored snippets for `text` and assembles a budgeted context.
    #[pyo3(signature = (text, budget=None, k=None, context_only=false))]
    fn query<'py>(
        &self,
        py: Python<'py>,
        text: String,
        budget: Option<usize>,
        k: Option<usize>,
        context_only: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        if text.trim().is_empty() || budget == Some(0) || k == Some(0) {
            return Err(PyValueError::new_err("query must be non-empty and budget/k at least 1"));
        }
        let request = QueryRequest {
            query: text,
            trajectory_id: self.trajectory_id.clone(),
            budget,
            context_only: Some(context_only),
            k_retrieve: k,
        };
        let response = py.detach(|| {
            let view = self.store.load_view(&self.trajectory_id).map_err(runtime_err)?;
            Ok::<_, PyErr>(answer_query(
                &self.gateway,
                self.embedder.as_ref(),
                &view,
                &request,
                &RetrievalConfig::default(),
            ))
        })?;
        to_py(py, &response)
    }

    /// Label inventories of the trajectory.
    fn labels<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let view = self.store.load_view(&self.trajectory_id).map_err(runtime_err)?;
        let d = PyDict::new(py);
        d.set_item("events", view.event_vocab().label_list())?;
        d.set_item("entities", view.entity_vocab().label_list())?;
        d.set_item("scopes", view.inventories().scopes)?;
        Ok(d)
    }
}

/// Generates one benchmark instance into `out`; returns its statistics.
#[pyfunction]
#[pyo3(signature = (domain, out, scale=100, seed=0))]
fn gen_bench<'py>(py: Python<'py>, domain: &str, out: PathBuf, scale: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let domain = match domain {
        "travel" => Domain::Travel,
        "debate" => Domain::Debate,
        other => return Err(PyValueError::new_err(format!("unknown domain `{other}`"))),
    };
    let cfg = BenchConfig {
        domain,
        scale,
        seed,
        ..BenchConfig::default()
    };
    let inst = bench::generate_instance(&cfg, None).map_err(|e| PyValueError::new_err(e.to_string()))?;
    bench::write_instance(&out, &inst).map_err(runtime_err)?;
    to_py(py, &inst.stats(&WordPunctTokenizer))
}

/// Precision, recall and F1 of a predicted answer set.
#[pyfunction]
fn score_answers(predicted: BTreeSet<String>, gold: BTreeSet<String>) -> PyResult<(f64, f64, f64)> {
    let r = score_answer_set("py", &predicted, &gold, &Matcher::Exact).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((r.precision, r.recall, r.f1))
}

#[pyfunction]
fn count_tokens(text: &str) -> usize {
    WordPunctTokenizer.count(text)
}

#[pymodule]
fn stitch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Memory>()?;
    m.add_function(wrap_pyfunction!(gen_bench, m)?)?;
    m.add_function(wrap_pyfunction!(score_answers, m)?)?;
    m.add_function(wrap_pyfunction!(count_tokens, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
