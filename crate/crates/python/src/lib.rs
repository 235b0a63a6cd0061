//! Python bindings. Results cross the boundary as plain dicts and lists
//! carrying the same canonical JSON shapes the HTTP API returns.

use std::collections::BTreeSet;

use memgrain_core::llm::{self, OfflineLlm};
use memgrain_core::model::{parse_time, Millis};
use memgrain_core::{
    canonical, intel, ConflictFilter, MemError, MemoryStore, MemoryType, RecordId, RememberRequest, ResolutionAction,
    RetrievalParams, StoreConfig,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyKeyError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(memgrain, MemgrainError, PyException, "Storage, log or model failure inside the engine.");

fn to_py(e: MemError) -> PyErr {
    match e.root() {
        MemError::NotFound(_) => PyKeyError::new_err(e.to_string()),
        MemError::StorageFailure(_)
        | MemError::CorruptLog { .. }
        | MemError::ExternalUnavailable(_)
        | MemError::LlmUnavailable(_) => MemgrainError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = canonical::to_string(value).map_err(to_py)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Accepts epoch milliseconds or an RFC 3339 string.
fn millis(v: &Bound<'_, PyAny>) -> PyResult<Millis> {
    if let Ok(ms) = v.extract::<Millis>() {
        return Ok(ms);
    }
    parse_time(&v.extract::<String>()?).map_err(to_py)
}

fn opt_millis(v: Option<&Bound<'_, PyAny>>) -> PyResult<Option<Millis>> {
    v.map(millis).transpose()
}

fn record_id(s: &str) -> PyResult<RecordId> {
    RecordId::parse(s).map_err(to_py)
}

fn memory_type(name: &str) -> PyResult<MemoryType> {
    MemoryType::from_name(name).map_err(to_py)
}

fn params(
    max_k: Option<usize>,
    threshold: Option<f64>,
    types: Option<Vec<String>>,
    as_of: Option<&Bound<'_, PyAny>>,
    include_superseded: bool,
) -> PyResult<RetrievalParams> {
    let d = RetrievalParams::default();
    let types = types.map(|ts| ts.iter().map(|t| memory_type(t)).collect::<PyResult<BTreeSet<_>>>()).transpose()?;
    Ok(RetrievalParams {
        max_k: max_k.unwrap_or(d.max_k),
        threshold: threshold.unwrap_or(d.threshold),
        types,
        as_of: opt_millis(as_of)?,
        include_superseded,
    })
}

/// A memory store, either in memory or backed by a data directory.
#[pyclass(frozen, module = "memgrain")]
struct Store {
    inner: MemoryStore,
}

#[pymethods]
impl Store {
    #[new]
    #[pyo3(signature = (path=None, *, sync_writes=false))]
    fn new(py: Python<'_>, path: Option<std::path::PathBuf>, sync_writes: bool) -> PyResult<Self> {
        let config = StoreConfig { root: path, sync_writes, ..StoreConfig::default() };
        let inner = py.detach(|| MemoryStore::open(config)).map_err(to_py)?;
        Ok(Store { inner })
    }

    #[pyo3(signature = (namespace, content, *, r#type=None, tags=None, session_id=None, at=None))]
    #[allow(clippy::too_many_arguments)]
    fn remember<'py>(
        &self,
        py: Python<'py>,
        namespace: &str,
        content: &str,
        r#type: Option<&str>,
        tags: Option<Vec<String>>,
        session_id: Option<String>,
        at: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let req = RememberRequest {
            namespace: namespace.into(),
            content: content.into(),
            memory_type: r#type.map(memory_type).transpose()?,
            tags: tags.unwrap_or_default().into_iter().collect(),
            session_id,
            at: opt_millis(at)?,
            ..Default::default()
        };
        let out = py.detach(|| self.inner.remember(req)).map_err(to_py)?;
        // Same shape as the HTTP reply: the first chunk's id and state on top.
        let reply = json(py, &out)?;
        reply.set_item("id", out.record().id.to_hex())?;
        reply.set_item("state", out.record().state.as_str())?;
        Ok(reply)
    }

    #[pyo3(signature = (namespace, query, *, max_k=None, threshold=None, types=None, as_of=None, include_superseded=false))]
    #[allow(clippy::too_many_arguments)]
    fn recall<'py>(
        &self,
        py: Python<'py>,
        namespace: &str,
        query: &str,
        max_k: Option<usize>,
        threshold: Option<f64>,
        types: Option<Vec<String>>,
        as_of: Option<&Bound<'py, PyAny>>,
        include_superseded: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let p = params(max_k, threshold, types, as_of, include_superseded)?;
        let hits = py.detach(|| self.inner.recall(namespace, query, &p)).map_err(to_py)?;
        json(py, &hits)
    }

    /// Answers from the top hits with the offline model.
    #[pyo3(signature = (namespace, question, *, max_k=None, threshold=None))]
    fn answer<'py>(
        &self,
        py: Python<'py>,
        namespace: &str,
        question: &str,
        max_k: Option<usize>,
        threshold: Option<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let p = params(max_k, threshold, None, None, false)?;
        let a = py.detach(|| llm::answer(&self.inner, &OfflineLlm, namespace, question, &p)).map_err(to_py)?;
        json(py, &a)
    }

    fn get<'py>(&self, py: Python<'py>, id: &str) -> PyResult<Option<Bound<'py, PyAny>>> {
        self.inner.get(record_id(id)?).map(|r| json(py, &r)).transpose()
    }

    #[pyo3(signature = (namespace, state="all"))]
    fn conflicts<'py>(&self, py: Python<'py>, namespace: &str, state: &str) -> PyResult<Bound<'py, PyAny>> {
        let filter: ConflictFilter = state.parse().map_err(to_py)?;
        json(py, &self.inner.list_conflicts(namespace, filter))
    }

    #[pyo3(signature = (conflict_id, action, *, actor="python", target=None))]
    fn resolve<'py>(
        &self,
        py: Python<'py>,
        conflict_id: &str,
        action: &str,
        actor: &str,
        target: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let action: ResolutionAction = action.parse().map_err(to_py)?;
        let target = target.map(record_id).transpose()?;
        let out = self.inner.resolve(record_id(conflict_id)?, action, actor, target, None).map_err(to_py)?;
        json(py, &out)
    }

    fn as_of<'py>(&self, py: Python<'py>, namespace: &str, t: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &self.inner.as_of(namespace, millis(t)?))
    }

    #[pyo3(signature = (namespace, t0, t1=None))]
    fn changed_since<'py>(
        &self,
        py: Python<'py>,
        namespace: &str,
        t0: &Bound<'py, PyAny>,
        t1: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let out = self.inner.changed_since(namespace, millis(t0)?, opt_millis(t1)?).map_err(to_py)?;
        json(py, &out)
    }

    fn sessions<'py>(&self, py: Python<'py>, namespace: &str) -> PyResult<Bound<'py, PyAny>> {
        json(py, &self.inner.sessions(namespace))
    }

    /// Summary for one UTC day (`YYYY-MM-DD`). Persistent stores also
    /// write the markdown under the data directory.
    fn daily_summary<'py>(&self, py: Python<'py>, namespace: &str, date: &str) -> PyResult<Bound<'py, PyAny>> {
        let date = intel::parse_date(date).map_err(to_py)?;
        let (summary, _) = intel::generate(&self.inner, namespace, date).map_err(to_py)?;
        json(py, &summary)
    }

    fn health<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &self.inner.health())
    }

    fn namespaces(&self) -> Vec<String> {
        self.inner.namespaces()
    }

    fn state_hash(&self, namespace: &str) -> PyResult<String> {
        self.inner.state_hash(namespace).map_err(to_py)
    }

    /// `None` turns contradiction detection off for the namespace.
    fn set_contradiction_threshold(&self, namespace: &str, threshold: Option<f64>) -> PyResult<()> {
        self.inner.set_contradiction_threshold(namespace, threshold).map_err(to_py)
    }

    fn contradiction_threshold(&self, namespace: &str) -> Option<f64> {
        self.inner.contradiction_threshold(namespace)
    }

    fn __repr__(&self) -> String {
        match &self.inner.config().root {
            Some(p) => format!("Store({:?})", p.display().to_string()),
            None => "Store()".into(),
        }
    }
}

/// Hex of the binary code the default embedder gives `text`.
#[pyfunction]
fn encode(text: &str) -> PyResult<String> {
    MemoryStore::in_memory().encode(text).map(|c| c.to_hex()).map_err(to_py)
}

#[pymodule]
pub fn memgrain(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Store>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add("MemgrainError", m.py().get_type::<MemgrainError>())?;
    m.add("DEFAULT_CONTRADICTION_THRESHOLD", memgrain_core::conflict::DEFAULT_CONTRADICTION_THRESHOLD)?;
    m.add("MEMORY_TYPES", MemoryType::ALL.iter().map(|t| t.name()).collect::<Vec<_>>())?;
    Ok(())
}
