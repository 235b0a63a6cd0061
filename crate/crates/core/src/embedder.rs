//! Text embedding backends.
//!
//! The hash backend is a signed feature-hashing bag of words: lowercase, split on
//! anything that is not alphanumeric, hash each token with 64-bit FNV-1a, add
//! `+1` or `-1` (bit 63 of the hash) at `hash mod D`, then L2-normalize. It is
//! pure and bit-exact across platforms. The external backend calls an embedding
//! service over HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{MemError, Result};

pub const DEFAULT_DIMENSION: usize = 256;
pub const EMBED_TOKEN_ENV: &str = "MEMGRAIN_EMBED_TOKEN";

const NORM_TOLERANCE: f64 = 1e-9;
const FNV_OFFSET_BASIS: u64 = 14_695_981_039_346_656_037;
const FNV_PRIME: u64 = 1_099_511_628_211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric tokens of `text`, in order.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// A unit-norm real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Accepts only vectors whose L2 norm is 1 within 1e-9.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(MemError::DegenerateEmbedding);
        }
        Ok(Embedding { values })
    }

    /// Scales a raw vector to unit length.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(MemError::DegenerateEmbedding);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Embedding::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Hash,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dimension: usize,
    pub backend: Backend,
    pub external_endpoint: Option<String>,
    /// Bearer token; read from `MEMGRAIN_EMBED_TOKEN` when built from the environment.
    #[serde(skip_serializing)]
    pub external_auth: Option<String>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            dimension: DEFAULT_DIMENSION,
            backend: Backend::Hash,
            external_endpoint: None,
            external_auth: None,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 || !self.dimension.is_multiple_of(8) {
            return Err(MemError::InvalidConfig(format!(
                "dimension {} must be a positive multiple of 8",
                self.dimension
            )));
        }
        if self.backend == Backend::External && self.external_endpoint.is_none() {
            return Err(MemError::InvalidConfig("external backend needs an endpoint".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        Ok(match self.backend {
            Backend::Hash => Box::new(HashEmbedder::new(self.dimension)?),
            Backend::External => {
                let token = self
                    .external_auth
                    .clone()
                    .or_else(|| std::env::var(EMBED_TOKEN_ENV).ok());
                Box::new(ExternalEmbedder::new(
                    self.external_endpoint.clone().unwrap_or_default(),
                    self.dimension,
                    token,
                )?)
            }
        })
    }
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding>;

    /// Element-wise `embed`; the first failure is reported with its index.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.embed(t).map_err(|e| MemError::Batch { index, source: Box::new(e) })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 || !dimension.is_multiple_of(8) {
            return Err(MemError::InvalidConfig(format!(
                "dimension {dimension} must be a positive multiple of 8"
            )));
        }
        Ok(HashEmbedder { dimension })
    }

    /// Unnormalized signed token counts.
    pub fn accumulate(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(MemError::EmptyContent);
        }
        let mut acc = vec![0.0f64; self.dimension];
        for token in &tokens {
            let h = fnv1a64(token.as_bytes());
            let index = (h % self.dimension as u64) as usize;
            acc[index] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        Ok(acc)
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dimension: DEFAULT_DIMENSION }
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        Embedding::normalized(self.accumulate(text)?)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Client for `POST {endpoint}/embed`. Stateless per request.
pub struct ExternalEmbedder {
    url: String,
    dimension: usize,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl ExternalEmbedder {
    pub fn new(endpoint: String, dimension: usize, token: Option<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| MemError::ExternalUnavailable(e.to_string()))?;
        Ok(ExternalEmbedder {
            url: format!("{}/embed", endpoint.trim_end_matches('/')),
            dimension,
            token,
            client,
        })
    }

    fn call(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut req = self.client.post(&self.url).json(&EmbedRequest { texts });
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| MemError::ExternalUnavailable(e.to_string()))?;
        let body: EmbedResponse =
            resp.json().map_err(|e| MemError::ExternalUnavailable(e.to_string()))?;
        if body.embeddings.len() != texts.len() {
            return Err(MemError::ExternalUnavailable(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                body.embeddings.len()
            )));
        }
        Ok(body.embeddings)
    }

    fn check(&self, raw: Vec<f64>) -> Result<Embedding> {
        if raw.len() != self.dimension {
            return Err(MemError::DimensionMismatch { expected: self.dimension, actual: raw.len() });
        }
        Embedding::normalized(raw)
    }
}

impl Embedder for ExternalEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        if tokenize(text).is_empty() {
            return Err(MemError::EmptyContent);
        }
        let raw = self.call(&[text])?.pop().expect("length checked");
        self.check(raw)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if let Some(index) = texts.iter().position(|t| tokenize(t).is_empty()) {
            return Err(MemError::Batch { index, source: Box::new(MemError::EmptyContent) });
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.call(texts)?
            .into_iter()
            .enumerate()
            .map(|(index, raw)| {
                self.check(raw).map_err(|e| MemError::Batch { index, source: Box::new(e) })
            })
            .collect()
    }
}
