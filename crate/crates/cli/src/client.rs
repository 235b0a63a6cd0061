use std::time::Duration;

use serde_json::Value;

use crate::CliError;

/// Blocking HTTP client for the `/v1` routes.
pub struct ApiClient {
    base: String,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

/// Status plus the raw body, which json mode prints verbatim.
pub struct Reply {
    pub status: u16,
    pub body: String,
}

impl Reply {
    pub fn json(&self) -> Result<Value, CliError> {
        serde_json::from_str(&self.body).map_err(|e| CliError::Domain(format!("server sent invalid JSON: {e}")))
    }
}

impl ApiClient {
    pub fn new(base: &str, token: Option<String>) -> Result<Self, CliError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| CliError::Domain(e.to_string()))?;
        Ok(ApiClient { base: base.trim_end_matches('/').to_string(), token, http })
    }

    pub fn get(&self, path: &str, query: &[(&str, String)]) -> Result<Reply, CliError> {
        self.send(self.http.get(self.url(path)).query(query))
    }

    pub fn post(&self, path: &str, body: &Value) -> Result<Reply, CliError> {
        self.send(self.http.post(self.url(path)).json(body))
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, mut req: reqwest::blocking::RequestBuilder) -> Result<Reply, CliError> {
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| {
            if e.is_connect() || e.is_timeout() {
                CliError::Domain(format!(
                    "cannot reach the memgrain server at {}: {e}\n\
                     start one with `memgrain serve`, or point --server / MEMGRAIN_URL at a running server",
                    self.base
                ))
            } else {
                CliError::Domain(format!("request to {} failed: {e}", self.base))
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| CliError::Domain(format!("reading response: {e}")))?;
        Ok(Reply { status, body })
    }
}
