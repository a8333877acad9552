//! The navigation control loop: maintain state and history, assemble
//! prompts, invoke the decision backend, apply validated actions, and
//! terminate on a stop signal or the step budget.
//!
//! Each episode owns its mutable state and history exclusively; the
//! environment and templates are shared immutably, so batches parallelize
//! freely as long as the backends are safe for concurrent calls.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, BackendFactory, CompletionBackend, CompletionRequest};
use crate::env::{Environment, Episode};
use crate::geometry::{bearing_between, euclidean_distance, normalize_deg, relative_angle};
use crate::observation::{render_observation, ObservationComposer, ObservationError, ObservationOptions};
use crate::parser::{parse_response, validate_action, Action, ParseError};
use crate::prompt::{
    build_step_prompt, build_system_principle, build_viewpoint_summary_prompt, PromptError,
};

/// Default per-episode step budget.
pub const DEFAULT_MAX_STEPS: usize = 15;

/// How many times a malformed or hallucinated reply is re-prompted with a
/// corrective sentence before the episode aborts as a parse failure.
pub const DEFAULT_PARSE_RETRIES: usize = 2;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// The agent pose: current viewpoint, heading, elevation.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub viewpoint_id: String,
    pub heading_deg: f64,
    pub elevation_deg: f64,
}

impl AgentState {
    pub fn new(viewpoint_id: impl Into<String>, heading_deg: f64) -> Self {
        Self {
            viewpoint_id: viewpoint_id.into(),
            heading_deg: normalize_deg(heading_deg),
            elevation_deg: 0.0,
        }
    }
}

/// One completed step: the summarized observation, the reasoning trace,
/// and a rendering of the applied action including the turn angle and
/// traveled distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub observation_summary: String,
    pub thought: String,
    pub action: String,
}

/// Ordered, contiguously indexed step history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryBuffer {
    entries: Vec<HistoryEntry>,
}

impl HistoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append an entry; indices must stay contiguous from zero.
    pub fn push(&mut self, entry: HistoryEntry) {
        assert_eq!(entry.step, self.entries.len(), "history steps must be contiguous");
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    FinalAnswer,
    MaxSteps,
    ParseFailure,
    BackendFailure,
}

/// One visited pose of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub viewpoint_id: String,
    pub heading_deg: f64,
}

/// One prompt/response exchange, recorded when transcripts are enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptStep {
    pub step: usize,
    pub prompt: String,
    pub response: String,
    pub action: String,
    pub state_after: TrajectoryState,
}

/// Everything an episode run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub path_id: i64,
    pub instruction_index: usize,
    pub trajectory: Vec<TrajectoryState>,
    pub stop_reason: StopReason,
    pub final_answer: Option<String>,
    pub history: HistoryBuffer,
    pub transcript: Option<Vec<TranscriptStep>>,
}

impl EpisodeResult {
    pub fn trajectory_ids(&self) -> Vec<String> {
        self.trajectory
            .iter()
            .map(|s| s.viewpoint_id.clone())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub max_steps: usize,
    pub parse_retries: usize,
    pub record_transcript: bool,
    pub observation: ObservationOptions,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            parse_retries: DEFAULT_PARSE_RETRIES,
            record_transcript: false,
            observation: ObservationOptions::default(),
        }
    }
}

/// The outcome of one control-loop step.
#[derive(Debug)]
pub enum StepOutcome {
    /// The agent moved; the new pose and the completed history entry.
    Moved(AgentState, HistoryEntry),
    /// The agent emitted a stop signal; no state change.
    Stopped { final_answer: String },
}

/// Drives one episode. Owns the mutable pose, history, trajectory, and
/// optional transcript; the environment and backends are borrowed
/// immutably.
pub struct EpisodeRunner<'a> {
    env: &'a Environment,
    episode: &'a Episode,
    backend: &'a dyn CompletionBackend,
    summarizer: &'a dyn CompletionBackend,
    config: &'a AgentConfig,
    composer: ObservationComposer<'a>,
    principle: String,
    state: AgentState,
    history: HistoryBuffer,
    trajectory: Vec<TrajectoryState>,
    transcript: Vec<TranscriptStep>,
    final_answer: Option<String>,
}

impl<'a> EpisodeRunner<'a> {
    pub fn new(
        env: &'a Environment,
        episode: &'a Episode,
        backend: &'a dyn CompletionBackend,
        summarizer: &'a dyn CompletionBackend,
        config: &'a AgentConfig,
    ) -> Result<Self, AgentError> {
        assert_eq!(
            episode.scan_id, env.scan_id,
            "episode references a different scan"
        );
        let state = AgentState::new(episode.start_viewpoint(), episode.start_heading_deg);
        let composer = ObservationComposer::new(env)
            .with_options(config.observation)
            .with_summarizer(summarizer);
        let initial_observation = render_observation(&composer.compose(&state)?);
        let principle = build_system_principle(&episode.instruction, &initial_observation)?;
        let trajectory = vec![TrajectoryState {
            viewpoint_id: state.viewpoint_id.clone(),
            heading_deg: state.heading_deg,
        }];
        Ok(Self {
            env,
            episode,
            backend,
            summarizer,
            config,
            composer,
            principle,
            state,
            history: HistoryBuffer::new(),
            trajectory,
            transcript: Vec::new(),
            final_answer: None,
        })
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn history(&self) -> &HistoryBuffer {
        &self.history
    }

    /// Run one step: compose the observation, prompt the backend, parse and
    /// validate the reply (re-prompting on malformed output up to the retry
    /// budget), and apply the action.
    pub fn step(&mut self) -> Result<StepOutcome, AgentError> {
        let observation = self.composer.compose(&self.state)?;
        let rendered = render_observation(&observation);
        let candidates: BTreeSet<String> = observation.candidate_ids.iter().cloned().collect();
        let step_prompt = build_step_prompt(&self.principle, &self.history, &rendered);

        let mut prompt_text = step_prompt.full_text.clone();
        let mut attempt = 0;
        let (decision, response) = loop {
            let response = self
                .backend
                .complete(&CompletionRequest::new(prompt_text.clone()))?;
            match parse_response(&response).and_then(|d| validate_action(d, &candidates)) {
                Ok(decision) => break (decision, response),
                Err(error) if attempt < self.config.parse_retries => {
                    attempt += 1;
                    prompt_text = format!(
                        "{}\nYour previous reply was invalid ({error}). Reply again in the required \
                         Thought/Action format; the only valid viewpoint IDs are: [{}].",
                        step_prompt.full_text,
                        observation.candidate_ids.join(", ")
                    );
                }
                Err(error) => return Err(error.into()),
            }
        };

        match decision.action {
            Action::Stop(text) => {
                if self.config.record_transcript {
                    self.transcript.push(TranscriptStep {
                        step: self.history.len(),
                        prompt: prompt_text,
                        response,
                        action: format!("Final Answer: {text}"),
                        state_after: TrajectoryState {
                            viewpoint_id: self.state.viewpoint_id.clone(),
                            heading_deg: self.state.heading_deg,
                        },
                    });
                }
                self.final_answer = Some(text.clone());
                Ok(StepOutcome::Stopped { final_answer: text })
            }
            Action::MoveTo(target) => {
                let here = self.env.viewpoint(&self.state.viewpoint_id).expect("state is valid");
                let there = self.env.viewpoint(&target).expect("validated against candidates");
                // Stacked viewpoints keep the current heading.
                let bearing = bearing_between(&here.position, &there.position)
                    .unwrap_or(self.state.heading_deg);
                let turn = relative_angle(self.state.heading_deg, bearing);
                let distance = euclidean_distance(&here.position, &there.position);
                let action_text = format!(
                    "Turn {turn:.1}° clockwise and move {distance:.2} m to viewpoint {target}"
                );

                // Summarize the observation being left behind for history.
                let summary_prompt = build_viewpoint_summary_prompt(&rendered);
                let summary = self
                    .summarizer
                    .complete(&CompletionRequest::new(summary_prompt))?
                    .trim()
                    .to_string();
                if summary.is_empty() {
                    return Err(ObservationError::EmptySummary.into());
                }

                let thought = if decision.thought.is_empty() {
                    "(no reasoning given)".to_string()
                } else {
                    decision.thought
                };
                let entry = HistoryEntry {
                    step: self.history.len(),
                    observation_summary: summary,
                    thought,
                    action: action_text.clone(),
                };
                self.history.push(entry.clone());
                self.state = AgentState {
                    viewpoint_id: target,
                    heading_deg: bearing,
                    elevation_deg: 0.0,
                };
                self.trajectory.push(TrajectoryState {
                    viewpoint_id: self.state.viewpoint_id.clone(),
                    heading_deg: self.state.heading_deg,
                });
                if self.config.record_transcript {
                    self.transcript.push(TranscriptStep {
                        step: self.history.len() - 1,
                        prompt: prompt_text,
                        response,
                        action: action_text,
                        state_after: TrajectoryState {
                            viewpoint_id: self.state.viewpoint_id.clone(),
                            heading_deg: self.state.heading_deg,
                        },
                    });
                }
                Ok(StepOutcome::Moved(self.state.clone(), entry))
            }
        }
    }

    /// Loop until a stop signal, a failure, or the step budget, and package
    /// the result. Failures are recorded in the stop reason, never raised.
    pub fn run(mut self) -> EpisodeResult {
        let mut stop_reason = StopReason::MaxSteps;
        for _ in 0..self.config.max_steps {
            match self.step() {
                Ok(StepOutcome::Moved(..)) => continue,
                Ok(StepOutcome::Stopped { .. }) => {
                    stop_reason = StopReason::FinalAnswer;
                    break;
                }
                Err(AgentError::Parse(_)) => {
                    stop_reason = StopReason::ParseFailure;
                    break;
                }
                Err(_) => {
                    stop_reason = StopReason::BackendFailure;
                    break;
                }
            }
        }
        EpisodeResult {
            path_id: self.episode.path_id,
            instruction_index: self.episode.instruction_index,
            trajectory: self.trajectory,
            stop_reason,
            final_answer: self.final_answer,
            history: self.history,
            transcript: self.config.record_transcript.then_some(self.transcript),
        }
    }
}

/// Run one episode start to finish. The environment is never mutated;
/// failures are recorded in the result's stop reason.
pub fn run_episode(
    env: &Environment,
    episode: &Episode,
    backend: &dyn CompletionBackend,
    summarizer: &dyn CompletionBackend,
    config: &AgentConfig,
) -> EpisodeResult {
    match EpisodeRunner::new(env, episode, backend, summarizer, config) {
        Ok(runner) => runner.run(),
        Err(_) => failed_result(episode),
    }
}

fn failed_result(episode: &Episode) -> EpisodeResult {
    EpisodeResult {
        path_id: episode.path_id,
        instruction_index: episode.instruction_index,
        trajectory: vec![TrajectoryState {
            viewpoint_id: episode.start_viewpoint().to_string(),
            heading_deg: normalize_deg(episode.start_heading_deg),
        }],
        stop_reason: StopReason::BackendFailure,
        final_answer: None,
        history: HistoryBuffer::new(),
        transcript: None,
    }
}

/// Run episodes concurrently on up to `workers` threads. Results come back
/// in input order regardless of completion order, and a failure (or panic)
/// in one episode never disturbs the others.
pub fn run_batch(
    envs: &BTreeMap<String, Environment>,
    episodes: &[Episode],
    backends: &dyn BackendFactory,
    summarizer: &dyn CompletionBackend,
    config: &AgentConfig,
    workers: usize,
) -> Vec<EpisodeResult> {
    let workers = workers.max(1).min(episodes.len().max(1));
    let next_index = Mutex::new(0usize);
    let results: Vec<Mutex<Option<EpisodeResult>>> =
        episodes.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = {
                    let mut guard = next_index.lock().unwrap();
                    let index = *guard;
                    *guard += 1;
                    index
                };
                if index >= episodes.len() {
                    break;
                }
                let episode = &episodes[index];
                let outcome = catch_unwind(AssertUnwindSafe(|| {
                    let Some(env) = envs.get(&episode.scan_id) else {
                        return failed_result(episode);
                    };
                    match backends.for_episode(episode) {
                        Ok(backend) => {
                            run_episode(env, episode, backend.as_ref(), summarizer, config)
                        }
                        Err(_) => failed_result(episode),
                    }
                }))
                .unwrap_or_else(|_| failed_result(episode));
                *results[index].lock().unwrap() = Some(outcome);
            });
        }
    });

    results
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every episode produced a result"))
        .collect()
}
