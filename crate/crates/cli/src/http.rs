use std::time::Duration;

use scot_core::forge::LlmRequest;
use scot_core::Transport;

/// Bearer token for the generation endpoint.
pub const API_KEY_VAR: &str = "SCOT_LLM_API_KEY";

/// Longest response excerpt kept in an error message.
const EXCERPT: usize = 200;

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn from_env() -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| format!("http client: {e}"))?;
        Ok(Self {
            client,
            api_key: std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()),
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, url: &str, request: &LlmRequest, timeout: Duration) -> Result<String, String> {
        let mut req = self.client.post(url).timeout(timeout).json(request);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        let body = resp.text().map_err(|e| e.to_string())?;
        if !status.is_success() {
            let excerpt: String = body.chars().take(EXCERPT).collect();
            return Err(format!("HTTP {status}: {excerpt}"));
        }
        Ok(body)
    }
}
