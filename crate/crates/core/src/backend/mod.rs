//! Uniform completion interface: a live HTTP chat-completion client plus
//! deterministic scripted backends (oracle follower, random walker, echo,
//! replay), so the full pipeline runs and is tested without network access.

mod live;
mod scripted;

pub use live::{
    load_backend_config, ApiKey, BackendConfig, LiveBackend, Transport, TransportResponse,
    API_KEY_ENV_VAR,
};
pub use scripted::{
    extract_candidate_ids, oracle_follower_respond, EchoBackend, EchoFactory, OracleFactory,
    OracleFollower, RandomFactory, RandomWalker, ReplayBackend, ReplayFactory, SharedBackend,
};

use thiserror::Error;

use crate::env::Episode;

/// One completion call. Temperature defaults to zero so identical prompts
/// reproduce identical runs.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    pub stop_sequences: Vec<String>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: 0.0,
            max_output_tokens: None,
            stop_sequences: Vec::new(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        debug_assert!(temperature.is_finite() && temperature >= 0.0);
        self.temperature = temperature;
        self
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication failed (missing or rejected credential)")]
    Auth,
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("rate limit persisted after {attempts} attempts")]
    RateLimitExhausted { attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("replay transcript exhausted after {0} responses")]
    ReplayExhausted(usize),
    #[error("prompt lists no candidate viewpoints")]
    NoCandidates,
    #[error("cache i/o: {0}")]
    CacheIo(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

/// Anything that can answer a completion request. Implementations must be
/// safe for concurrent invocation.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

/// Builds the per-episode decision backend for batch runs. Scripted
/// backends hold per-episode cursors, so each episode gets its own.
pub trait BackendFactory: Sync {
    fn for_episode(&self, episode: &Episode) -> Result<Box<dyn CompletionBackend>, BackendError>;
}
