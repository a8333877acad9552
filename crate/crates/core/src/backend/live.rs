//! Live HTTP chat-completion client.
//!
//! Speaks the de-facto chat-completion wire shape: POST a JSON body with a
//! model name and a message list, read the first choice's message content.
//! Any compatible server works, hosted or local. Transient failures are
//! retried with exponential backoff, concurrency is capped by a semaphore,
//! and responses are cached content-addressed on disk so reruns are cheap
//! and auditable.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, CompletionBackend, CompletionRequest};

/// Environment variable holding the live credential.
pub const API_KEY_ENV_VAR: &str = "NAVGRAPH_API_KEY";

/// The live credential. Never logged and never serialized: `Debug` prints a
/// redaction and the containing config skips it when serializing.
#[derive(Clone, PartialEq, Eq)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(secret: impl Into<String>) -> Self {
        Self(secret.into())
    }

    /// Read the credential from `NAVGRAPH_API_KEY`.
    pub fn from_env() -> Option<Self> {
        std::env::var(API_KEY_ENV_VAR).ok().map(Self)
    }

    fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(redacted)")
    }
}

/// Connection settings for the live backend. The credential comes from the
/// environment, not from config files, and is excluded from serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(skip)]
    pub api_key: Option<ApiKey>,
    pub timeout_s: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub cache_dir: Option<PathBuf>,
    /// Base backoff delay; doubles per attempt, capped at two seconds.
    pub retry_base_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1/chat/completions".to_string(),
            model_name: "gpt-4".to_string(),
            api_key: None,
            timeout_s: 60,
            max_retries: 3,
            max_in_flight: 4,
            cache_dir: None,
            retry_base_ms: 250,
        }
    }
}

/// Load a [`BackendConfig`] JSON file; missing keys take defaults and the
/// credential is read from the environment.
pub fn load_backend_config(path: &Path) -> Result<BackendConfig, BackendError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BackendError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config: BackendConfig = serde_json::from_str(&text)
        .map_err(|e| BackendError::Config(format!("cannot parse {}: {e}", path.display())))?;
    config.api_key = ApiKey::from_env();
    Ok(config)
}

#[derive(Debug, Clone)]
pub struct TransportResponse {
    pub status: u16,
    pub body: String,
}

/// The HTTP layer behind [`LiveBackend`], pluggable so retry, semaphore,
/// and cache behavior are testable with a fake transport.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<TransportResponse, TransportFailure>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout(String),
    Other(String),
}

struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<TransportResponse, TransportFailure> {
        let agent = ureq::config::Config::builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        let response = agent
            .post(url)
            .header("authorization", format!("Bearer {bearer}"))
            .header("content-type", "application/json")
            .send_json(body)
            .map_err(|e| match e {
                ureq::Error::Timeout(t) => TransportFailure::Timeout(t.to_string()),
                other => TransportFailure::Other(other.to_string()),
            })?;
        let status = response.status().as_u16();
        let body = response
            .into_body()
            .read_to_string()
            .map_err(|e| TransportFailure::Other(e.to_string()))?;
        Ok(TransportResponse { status, body })
    }
}

/// Counting semaphore bounding in-flight requests.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().unwrap();
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

pub struct LiveBackend {
    config: BackendConfig,
    transport: Box<dyn Transport>,
    semaphore: Semaphore,
    /// Single-flight locks per cache key, so two concurrent identical
    /// requests trigger one network call.
    in_flight: Mutex<std::collections::HashMap<String, std::sync::Arc<Mutex<()>>>>,
}

impl LiveBackend {
    pub fn new(config: BackendConfig) -> Self {
        Self::with_transport(config, Box::new(UreqTransport))
    }

    pub fn with_transport(config: BackendConfig, transport: Box<dyn Transport>) -> Self {
        let permits = config.max_in_flight.max(1);
        Self {
            config,
            transport,
            semaphore: Semaphore::new(permits),
            in_flight: Mutex::new(std::collections::HashMap::new()),
        }
    }

    fn cache_key(&self, request: &CompletionRequest) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.config.model_name.as_bytes());
        hasher.update([0x1f]);
        hasher.update(format!("{:?}", request.temperature).as_bytes());
        hasher.update([0x1f]);
        hasher.update(request.prompt.as_bytes());
        hex::encode(hasher.finalize())
    }

    fn cache_paths(&self, key: &str) -> Option<(PathBuf, PathBuf)> {
        self.config
            .cache_dir
            .as_ref()
            .map(|dir| (dir.join(format!("{key}.txt")), dir.join(format!("{key}.meta"))))
    }

    fn cache_read(&self, key: &str) -> Option<String> {
        let (text_path, _) = self.cache_paths(key)?;
        std::fs::read_to_string(text_path).ok()
    }

    fn cache_write(&self, key: &str, request: &CompletionRequest, response: &str) -> Result<(), BackendError> {
        let Some((text_path, meta_path)) = self.cache_paths(key) else {
            return Ok(());
        };
        let dir = text_path.parent().expect("cache file has a parent");
        std::fs::create_dir_all(dir).map_err(|e| BackendError::CacheIo(e.to_string()))?;
        let meta = serde_json::json!({
            "model_name": self.config.model_name,
            "temperature": request.temperature,
            "max_output_tokens": request.max_output_tokens,
            "stop_sequences": request.stop_sequences,
            "prompt": request.prompt,
        });
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
            .map_err(|e| BackendError::CacheIo(e.to_string()))?;
        std::fs::write(&text_path, response).map_err(|e| BackendError::CacheIo(e.to_string()))?;
        Ok(())
    }

    fn request_body(&self, request: &CompletionRequest) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
        });
        if let Some(max) = request.max_output_tokens {
            body["max_tokens"] = serde_json::json!(max);
        }
        if !request.stop_sequences.is_empty() {
            body["stop"] = serde_json::json!(request.stop_sequences);
        }
        body
    }

    fn call_with_retries(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let key = self.config.api_key.as_ref().ok_or(BackendError::Auth)?;
        let body = self.request_body(request);
        let timeout = Duration::from_secs(self.config.timeout_s);
        let attempts_allowed = self.config.max_retries + 1;

        let mut last_failure: Option<BackendError> = None;
        for attempt in 0..attempts_allowed {
            if attempt > 0 {
                let backoff = self
                    .config
                    .retry_base_ms
                    .saturating_mul(1 << (attempt - 1).min(16))
                    .min(2_000);
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let outcome = {
                let _permit = self.semaphore.acquire();
                self.transport
                    .post_json(&self.config.endpoint_url, key.expose(), &body, timeout)
            };
            match outcome {
                Ok(response) if (200..300).contains(&response.status) => {
                    return parse_chat_body(&response.body);
                }
                Ok(response) if response.status == 401 || response.status == 403 => {
                    return Err(BackendError::Auth);
                }
                Ok(response) if response.status == 429 => {
                    last_failure = Some(BackendError::RateLimitExhausted {
                        attempts: attempt + 1,
                    });
                }
                Ok(response) if response.status >= 500 => {
                    last_failure = Some(BackendError::Http {
                        status: response.status,
                        body: truncate(&response.body),
                    });
                }
                Ok(response) => {
                    // Other 4xx statuses will not improve on retry.
                    return Err(BackendError::Http {
                        status: response.status,
                        body: truncate(&response.body),
                    });
                }
                Err(TransportFailure::Timeout(_)) => {
                    last_failure = Some(BackendError::Timeout {
                        attempts: attempt + 1,
                    });
                }
                Err(TransportFailure::Other(message)) => {
                    last_failure = Some(BackendError::Transport(message));
                }
            }
        }
        Err(last_failure.unwrap_or(BackendError::Timeout {
            attempts: attempts_allowed,
        }))
    }
}

fn parse_chat_body(body: &str) -> Result<String, BackendError> {
    let parsed: ChatResponse = serde_json::from_str(body)
        .map_err(|e| BackendError::MalformedResponse(format!("{e}; body: {}", truncate(body))))?;
    parsed
        .choices
        .first()
        .map(|choice| choice.message.content.clone())
        .ok_or_else(|| BackendError::MalformedResponse("response carries no choices".to_string()))
}

fn truncate(text: &str) -> String {
    const MAX: usize = 240;
    if text.len() > MAX {
        let mut end = MAX;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &text[..end])
    } else {
        text.to_string()
    }
}

impl CompletionBackend for LiveBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        if request.prompt.is_empty() {
            return Err(BackendError::Config("prompt is empty".to_string()));
        }
        if self.config.cache_dir.is_none() {
            return self.call_with_retries(request);
        }

        let key = self.cache_key(request);
        let lock = {
            let mut map = self.in_flight.lock().unwrap();
            std::sync::Arc::clone(map.entry(key.clone()).or_default())
        };
        let _guard = lock.lock().unwrap();
        if let Some(cached) = self.cache_read(&key) {
            return Ok(cached);
        }
        let response = self.call_with_retries(request)?;
        self.cache_write(&key, request, &response)?;
        Ok(response)
    }
}
