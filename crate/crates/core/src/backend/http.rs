use std::thread;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{check_request, Backend, BackendError, BackendRequest};

fn default_path() -> String {
    "/chat/completions".to_string()
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> u64 {
    250
}

/// Remote chat-completions endpoint settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// e.g. `http://localhost:8000/v1`
    pub base_url: String,
    #[serde(default = "default_path")]
    pub path: String,
    pub model: String,
    /// Environment variable holding a bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

impl HttpConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        Self {
            base_url: base_url.to_string(),
            path: default_path(),
            model: model.to_string(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
        }
    }

    pub fn url(&self) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), self.path)
    }
}

/// Client for any server speaking the chat-completions shape. The request
/// body is `{model, messages, temperature, max_tokens, stop}` and the reply
/// text is read from `choices[0].message.content`.
///
/// Clones share one connection pool.
#[derive(Clone)]
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    token: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let token = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|t| !t.is_empty());
        Self { config, agent, token }
    }

    pub fn request_body(&self, request: &BackendRequest) -> Value {
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.prompt},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "stop": request.stop_sequences,
        })
    }

    fn attempt(&self, body: &Value) -> Result<String, BackendError> {
        let mut req = self.agent.post(self.config.url()).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(t) => BackendError::Timeout(t.to_string()),
            other => BackendError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Status { status, body });
        }
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        extract_content(&value)
    }
}

/// Reads `choices[0].message.content` from a chat-completions reply.
pub fn extract_content(value: &Value) -> Result<String, BackendError> {
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))
}

fn retryable(e: &BackendError) -> bool {
    match e {
        BackendError::Transport(_) | BackendError::Timeout(_) => true,
        BackendError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.config.model)
    }

    fn complete(&mut self, request: &BackendRequest) -> Result<String, BackendError> {
        check_request(request)?;
        let body = self.request_body(request);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) if retryable(&e) && attempt < self.config.max_retries => {
                    let delay = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    warn!(
                        "backend attempt {} failed ({e}); retrying in {delay} ms",
                        attempt + 1
                    );
                    thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
