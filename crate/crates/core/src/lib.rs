//! Instruction-following navigation over discrete viewpoint graphs.
//!
//! The crate wires an LLM-style decision loop to a graph-based indoor world:
//! geometric observations are rendered into ordered natural-language blocks,
//! the model's Thought/Action replies are parsed and validated against the
//! navigable candidates, and finished trajectories are scored with the
//! standard TL/NE/SR/OSR/SPL metric suite.
//!
//! Every model call goes through [`backend::CompletionBackend`], so the whole
//! pipeline runs deterministically and offline with the scripted backends
//! (oracle follower, random walker, echo, replay) and switches to a live
//! chat-completion endpoint without touching the rest of the code.

pub mod agent;
pub mod backend;
pub mod env;
pub mod eval;
pub mod geometry;
pub mod observation;
pub mod parser;
pub mod prompt;

pub use agent::{run_batch, run_episode, AgentConfig, AgentState, EpisodeResult, StopReason};
pub use env::{generate_synthetic_grid, load_environment, load_episodes, Environment, Episode};
pub use eval::{aggregate, score_episode, AggregateMetrics, EpisodeMetrics};
