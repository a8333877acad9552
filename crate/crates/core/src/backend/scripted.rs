//! Deterministic scripted backends for offline runs and tests.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{BackendError, BackendFactory, CompletionBackend, CompletionRequest};
use crate::env::Episode;

/// Returns the prompt verbatim. Doubles as the deterministic summarizer
/// for offline runs.
#[derive(Debug, Default, Clone)]
pub struct EchoBackend;

impl CompletionBackend for EchoBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        Ok(request.prompt.clone())
    }
}

#[derive(Debug, Default)]
pub struct EchoFactory;

impl BackendFactory for EchoFactory {
    fn for_episode(&self, _episode: &Episode) -> Result<Box<dyn CompletionBackend>, BackendError> {
        Ok(Box::new(EchoBackend))
    }
}

/// Replays a recorded list of responses in order; one further call fails
/// with [`BackendError::ReplayExhausted`].
#[derive(Debug)]
pub struct ReplayBackend {
    responses: Vec<String>,
    cursor: AtomicUsize,
}

impl ReplayBackend {
    pub fn new(responses: Vec<String>) -> Self {
        Self {
            responses,
            cursor: AtomicUsize::new(0),
        }
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, _request: &CompletionRequest) -> Result<String, BackendError> {
        let index = self.cursor.fetch_add(1, Ordering::SeqCst);
        self.responses
            .get(index)
            .cloned()
            .ok_or(BackendError::ReplayExhausted(self.responses.len()))
    }
}

/// Per-episode replay transcripts keyed by (path_id, instruction_index).
#[derive(Debug, Default)]
pub struct ReplayFactory {
    transcripts: BTreeMap<(i64, usize), Vec<String>>,
}

impl ReplayFactory {
    pub fn new(transcripts: BTreeMap<(i64, usize), Vec<String>>) -> Self {
        Self { transcripts }
    }
}

impl BackendFactory for ReplayFactory {
    fn for_episode(&self, episode: &Episode) -> Result<Box<dyn CompletionBackend>, BackendError> {
        let key = (episode.path_id, episode.instruction_index);
        match self.transcripts.get(&key) {
            Some(responses) => Ok(Box::new(ReplayBackend::new(responses.clone()))),
            None => Err(BackendError::Config(format!(
                "no recorded transcript for path_id {} instruction {}",
                episode.path_id, episode.instruction_index
            ))),
        }
    }
}

/// The canned reply the oracle emits at `step` of `gt_path`: a perfectly
/// formatted Thought/Action pair toward the next ground-truth node, or a
/// Final Answer line once the destination is reached.
pub fn oracle_follower_respond(gt_path: &[String], step: usize) -> String {
    if step + 1 < gt_path.len() {
        format!(
            "Thought: The route continues; I will move to the next viewpoint on the planned path.\nAction: {}",
            gt_path[step + 1]
        )
    } else {
        "Thought: The instruction is complete and this viewpoint is the destination.\nFinal Answer: Finished!"
            .to_string()
    }
}

/// Ground-truth agent: walks the episode's path and stops at its end.
/// Holds a step cursor, so one instance serves exactly one episode.
#[derive(Debug)]
pub struct OracleFollower {
    gt_path: Vec<String>,
    cursor: AtomicUsize,
}

impl OracleFollower {
    pub fn new(episode: &Episode) -> Self {
        Self {
            gt_path: episode.gt_path.clone(),
            cursor: AtomicUsize::new(0),
        }
    }
}

impl CompletionBackend for OracleFollower {
    fn complete(&self, _request: &CompletionRequest) -> Result<String, BackendError> {
        let step = self.cursor.fetch_add(1, Ordering::SeqCst);
        Ok(oracle_follower_respond(&self.gt_path, step))
    }
}

#[derive(Debug, Default)]
pub struct OracleFactory;

impl BackendFactory for OracleFactory {
    fn for_episode(&self, episode: &Episode) -> Result<Box<dyn CompletionBackend>, BackendError> {
        Ok(Box::new(OracleFollower::new(episode)))
    }
}

/// The flat candidate list embedded by the observation renderer, parsed
/// from the last `Navigable viewpoints: [...]` line of a prompt.
pub fn extract_candidate_ids(prompt: &str) -> Option<Vec<String>> {
    let line = prompt
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with("Navigable viewpoints:"))?;
    let open = line.find('[')?;
    let close = line.rfind(']')?;
    if close <= open {
        return None;
    }
    let inner = &line[open + 1..close];
    if inner.trim().is_empty() {
        return Some(Vec::new());
    }
    Some(
        inner
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
    )
}

/// Baseline agent: uniformly picks one of the candidates listed in the
/// prompt, stopping with probability `stop_probability`. Deterministic per
/// (prompt, seed).
#[derive(Debug, Clone)]
pub struct RandomWalker {
    seed: u64,
    stop_probability: f64,
}

impl RandomWalker {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            stop_probability: 0.0,
        }
    }

    pub fn with_stop_probability(mut self, p: f64) -> Self {
        assert!((0.0..=1.0).contains(&p), "probability out of range");
        self.stop_probability = p;
        self
    }
}

impl CompletionBackend for RandomWalker {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let candidates =
            extract_candidate_ids(&request.prompt).ok_or(BackendError::NoCandidates)?;
        if candidates.is_empty() {
            return Err(BackendError::NoCandidates);
        }
        let mut rng = prompt_rng(self.seed, &request.prompt);
        if rng.random::<f64>() < self.stop_probability {
            return Ok(
                "Thought: I choose to stop here.\nFinal Answer: Finished!".to_string(),
            );
        }
        let pick = &candidates[rng.random_range(0..candidates.len())];
        Ok(format!(
            "Thought: I will wander to a random navigable viewpoint.\nAction: {pick}"
        ))
    }
}

fn prompt_rng(seed: u64, prompt: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(prompt.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Random-walker factory; each episode's walker gets a seed derived from
/// the base seed and the episode identity, so batch results are
/// independent of worker scheduling.
#[derive(Debug)]
pub struct RandomFactory {
    pub seed: u64,
    pub stop_probability: f64,
}

impl RandomFactory {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            stop_probability: 0.0,
        }
    }
}

impl BackendFactory for RandomFactory {
    fn for_episode(&self, episode: &Episode) -> Result<Box<dyn CompletionBackend>, BackendError> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(episode.path_id.to_le_bytes());
        hasher.update((episode.instruction_index as u64).to_le_bytes());
        let digest = hasher.finalize();
        let episode_seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        Ok(Box::new(
            RandomWalker::new(episode_seed).with_stop_probability(self.stop_probability),
        ))
    }
}

/// Adapter that hands a shared backend (typically a live client) to every
/// episode of a batch.
pub struct SharedBackend(pub Arc<dyn CompletionBackend>);

impl CompletionBackend for SharedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.0.complete(request)
    }
}

impl BackendFactory for SharedBackend {
    fn for_episode(&self, _episode: &Episode) -> Result<Box<dyn CompletionBackend>, BackendError> {
        Ok(Box::new(SharedBackend(Arc::clone(&self.0))))
    }
}
