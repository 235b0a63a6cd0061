//! Retrieval-augmented answering over one recall, with a pluggable model client.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{MemError, Result};
use crate::its::{RetrievalParams, ScoredHit};
use crate::model::{Millis, RecordId};
use crate::store::MemoryStore;

pub const LLM_TOKEN_ENV: &str = "MEMGRAIN_LLM_TOKEN";
pub const NO_MEMORY_ANSWER: &str = "No relevant memory found.";

/// Prompt sent to external models. `{context}` is the rendered hit list in
/// rank order and `{question}` the caller's question.
pub const PROMPT_TEMPLATE: &str = "You answer questions from an agent's long-term memory.\n\
Use only the memories listed below. If they do not contain the answer, say that you do not know.\n\
\n\
Memories, most relevant first:\n\
{context}\n\
\n\
Question: {question}\n\
Answer:";

pub fn iso8601(ms: Millis) -> String {
    chrono::DateTime::from_timestamp_millis(ms as i64)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string())
        .unwrap_or_else(|| ms.to_string())
}

/// `[{type} @ {created_at}] {content}` per hit, one per line.
pub fn render_context(hits: &[ScoredHit]) -> String {
    hits.iter()
        .map(|h| {
            format!("[{} @ {}] {}", h.record.memory_type, iso8601(h.record.created_at), h.record.content)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_prompt(question: &str, hits: &[ScoredHit]) -> String {
    PROMPT_TEMPLATE.replace("{context}", &render_context(hits)).replace("{question}", question)
}

pub struct LlmRequest<'a> {
    pub question: &'a str,
    pub prompt: &'a str,
    pub hits: &'a [ScoredHit],
}

pub struct LlmReply {
    pub text: String,
    pub citations: Vec<RecordId>,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &LlmRequest<'_>) -> Result<LlmReply>;
}

/// Answers with the top hit's content verbatim. Never fails.
#[derive(Debug, Default, Clone, Copy)]
pub struct OfflineLlm;

impl LlmClient for OfflineLlm {
    fn complete(&self, request: &LlmRequest<'_>) -> Result<LlmReply> {
        Ok(match request.hits.first() {
            Some(top) => LlmReply { text: top.record.content.clone(), citations: vec![top.record.id] },
            None => LlmReply { text: NO_MEMORY_ANSWER.into(), citations: Vec::new() },
        })
    }
}

#[derive(Serialize)]
struct CompleteRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
}

/// `POST {endpoint}/complete` with `{"prompt": ...}`, expecting `{"text": ...}`.
pub struct ExternalLlm {
    url: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl ExternalLlm {
    pub fn new(endpoint: &str, token: Option<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| MemError::LlmUnavailable(e.to_string()))?;
        Ok(ExternalLlm {
            url: format!("{}/complete", endpoint.trim_end_matches('/')),
            token: token.or_else(|| std::env::var(LLM_TOKEN_ENV).ok()),
            client,
        })
    }
}

impl LlmClient for ExternalLlm {
    fn complete(&self, request: &LlmRequest<'_>) -> Result<LlmReply> {
        let mut req = self.client.post(&self.url).json(&CompleteRequest { prompt: request.prompt });
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let body: CompleteResponse = req
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| MemError::LlmUnavailable(e.to_string()))?;
        Ok(LlmReply {
            text: body.text,
            citations: request.hits.iter().map(|h| h.record.id).collect(),
        })
    }
}

/// Wraps a client and counts calls.
pub struct CountingLlm<C> {
    inner: C,
    calls: AtomicU64,
}

impl<C: LlmClient> CountingLlm<C> {
    pub fn new(inner: C) -> Self {
        CountingLlm { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<C: LlmClient> LlmClient for CountingLlm<C> {
    fn complete(&self, request: &LlmRequest<'_>) -> Result<LlmReply> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub answer: String,
    pub citations: Vec<RecordId>,
    pub retrieved: Vec<ScoredHit>,
}

/// One recall, then one model call over the hits in rank order.
pub fn answer(
    store: &MemoryStore,
    llm: &dyn LlmClient,
    namespace: &str,
    question: &str,
    params: &RetrievalParams,
) -> Result<Answer> {
    let hits = store.recall(namespace, question, params)?;
    if hits.is_empty() {
        return Ok(Answer { answer: NO_MEMORY_ANSWER.into(), citations: Vec::new(), retrieved: hits });
    }
    let prompt = render_prompt(question, &hits);
    let reply = llm.complete(&LlmRequest { question, prompt: &prompt, hits: &hits })?;
    Ok(Answer { answer: reply.text, citations: reply.citations, retrieved: hits })
}
