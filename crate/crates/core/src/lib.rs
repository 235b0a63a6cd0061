//! Local, deterministic, typed long-term memory for agents.
//!
//! Content is embedded, sign-binarized and appended to a per-namespace event
//! log. Recall scans every record of a namespace with an entropy-weighted
//! bit-match score and admits whatever clears the threshold, capped at `max_k`.
//! Writes never wait on an index build and never call a language model.

pub mod canonical;
pub mod conflict;
pub mod embedder;
pub mod error;
pub mod harness;
pub mod intel;
pub mod its;
pub mod llm;
pub mod model;
pub mod rng;
pub mod store;

pub use embedder::{Embedder, EmbedderConfig, Embedding, HashEmbedder};
pub use error::{MemError, Result};
pub use its::{BinaryCode, BitStats, RetrievalParams, ScoredHit};
pub use model::{MemoryKind, MemoryRecord, MemoryType, Millis, RecordId, RecordState, Session};
pub use conflict::{ConflictFilter, ConflictRecord, ResolutionAction};
pub use store::{MemoryStore, RememberRequest, StoreConfig, WriteOutcome};
