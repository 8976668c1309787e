//! Minimal JSON-over-HTTP client shared by the chat and embeddings services.

use std::fmt;
use std::time::Duration;

use serde_json::Value;

use crate::error::{Error, Result};

/// An API key. Never printed: `Debug` is redacted and there is no `Display`.
#[derive(Clone, PartialEq, Eq)]
pub struct Credential(String);

impl Credential {
    pub fn new(secret: impl Into<String>) -> Option<Self> {
        let secret = secret.into();
        (!secret.trim().is_empty()).then_some(Credential(secret))
    }

    /// Read from an environment variable; unset or blank means `None`.
    pub fn from_env(var: &str) -> Option<Self> {
        std::env::var(var).ok().and_then(Credential::new)
    }

    fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Credential(<redacted>)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Additional attempts after the first.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn delay_before_retry(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Run `attempt` until it succeeds, fails with a non-retriable error, or
    /// the retry budget is spent. Returns the outcome and the retry count.
    pub fn run<T>(&self, attempt: impl FnMut(u32) -> Result<T>) -> (Result<T>, u32) {
        self.run_when(Error::is_retriable, attempt)
    }

    /// As [`RetryPolicy::run`] with a caller-chosen notion of retriable.
    pub fn run_when<T>(
        &self,
        retriable: impl Fn(&Error) -> bool,
        mut attempt: impl FnMut(u32) -> Result<T>,
    ) -> (Result<T>, u32) {
        let mut retries = 0;
        loop {
            match attempt(retries) {
                Ok(v) => return (Ok(v), retries),
                Err(e) if retriable(&e) && retries < self.max_retries => {
                    retries += 1;
                    log::warn!("request failed ({e}); retry {retries}/{}", self.max_retries);
                    std::thread::sleep(self.delay_before_retry(retries));
                }
                Err(Error::Transport { message, .. }) => {
                    return (
                        Err(Error::Transport {
                            attempts: retries + 1,
                            message,
                        }),
                        retries,
                    )
                }
                Err(e) => return (Err(e), retries),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    base_url: String,
    credential: Option<Credential>,
}

impl HttpClient {
    pub fn new(base_url: &str, credential: Option<Credential>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpClient {
            agent,
            base_url: base_url.trim_end_matches('/').to_string(),
            credential,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// One POST attempt. Non-2xx statuses become [`Error::UpstreamStatus`],
    /// connection problems [`Error::Transport`], bad JSON [`Error::Parse`].
    pub fn post_json(&self, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}/{}", self.base_url, path.trim_start_matches('/'));
        let mut request = self.agent.post(&url);
        if let Some(c) = &self.credential {
            request = request.header("Authorization", format!("Bearer {}", c.expose()));
        }
        let mut response = request.send_json(body).map_err(|e| Error::Transport {
            attempts: 1,
            message: format!("POST {url}: {e}"),
        })?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport {
                attempts: 1,
                message: format!("reading response from {url}: {e}"),
            })?;
        if !(200..300).contains(&status) {
            return Err(Error::UpstreamStatus {
                status,
                body: truncate(&text, 512),
            });
        }
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            message: format!("response from {url} is not JSON: {e}"),
            raw: text,
        })
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}
