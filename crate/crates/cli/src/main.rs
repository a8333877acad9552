//! Operator surface for the navigation framework: run agents over episode
//! sets, score result files, generate synthetic worlds, and inspect
//! observations and prompt templates.
//!
//! Exit codes: 0 success, 2 usage, 3 validation, 4 backend failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use navgraph::agent::{
    run_batch, AgentConfig, EpisodeResult, HistoryBuffer, TrajectoryState,
};
use navgraph::backend::{
    load_backend_config, ApiKey, BackendConfig, BackendError, BackendFactory, CompletionBackend,
    EchoBackend, EchoFactory, LiveBackend, OracleFactory, RandomFactory, ReplayFactory,
    SharedBackend,
};
use navgraph::env::{
    generate_synthetic_grid_with, load_environment_with_warnings, load_episodes, EnvError,
    Environment, Episode, GranularityConfig,
};
use navgraph::eval::{
    aggregate, export_topdown, format_table, read_results, reconstruct_trajectory,
    score_episode_cached, write_results, DistanceMode, EpisodeRecord, EvalError, GeodesicCache,
    DEFAULT_SUCCESS_THRESHOLD_M,
};
use navgraph::observation::{render_observation, ObservationComposer, ObservationOptions};
use navgraph::prompt::templates;

#[derive(Parser)]
#[command(
    name = "navgraph",
    version,
    about = "Run and score instruction-following navigation agents on viewpoint graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a backend over an episode set and write scored results.
    Run(RunArgs),
    /// Print the aggregate metric table of a results file.
    Eval(EvalArgs),
    /// Generate a deterministic synthetic grid environment.
    Synth(SynthArgs),
    /// Render the observation for one viewpoint and heading.
    Describe(DescribeArgs),
    /// Dump the frozen prompt templates for audit.
    Prompts,
    /// Export one recorded trajectory as a top-down CSV.
    ExportTraj(ExportTrajArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Live,
    Oracle,
    Random,
    Replay,
    Echo,
}

impl BackendKind {
    fn name(self) -> &'static str {
        match self {
            BackendKind::Live => "live",
            BackendKind::Oracle => "oracle",
            BackendKind::Random => "random",
            BackendKind::Replay => "replay",
            BackendKind::Echo => "echo",
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Environment JSON file.
    #[arg(long)]
    env: PathBuf,
    /// Episode JSON file.
    #[arg(long)]
    episodes: PathBuf,
    /// Decision backend.
    #[arg(long, value_enum)]
    backend: BackendKind,
    /// Results file (JSONL); a manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Live backend configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Concurrent episode workers.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Per-episode step budget.
    #[arg(long, default_value_t = navgraph::agent::DEFAULT_MAX_STEPS)]
    max_steps: usize,
    /// Require the environment to match a granularity preset.
    #[arg(long)]
    granularity: Option<String>,
    /// Drop object lines from observations.
    #[arg(long)]
    no_objects: bool,
    /// Drop depth from object lines.
    #[arg(long)]
    no_depth: bool,
    /// Seed for the random backend.
    #[arg(long)]
    seed: Option<u64>,
    /// Transcript file: written during live/scripted runs, read as the
    /// response source by the replay backend.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Results file produced by `run`.
    #[arg(long)]
    results: PathBuf,
    /// Environment JSON file (enables trajectory validation).
    #[arg(long)]
    env: Option<PathBuf>,
    /// Episode JSON file (with --env, re-scores and verifies each record).
    #[arg(long)]
    episodes: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    /// Grid spacing in meters.
    #[arg(long, default_value_t = 2.0)]
    spacing: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output environment JSON file.
    #[arg(long)]
    out: PathBuf,
    /// View granularity preset.
    #[arg(long, default_value = "fov45x24")]
    granularity: String,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    viewpoint: String,
    #[arg(long, default_value_t = 0.0)]
    heading: f64,
    #[arg(long)]
    granularity: Option<String>,
    #[arg(long)]
    no_objects: bool,
    #[arg(long)]
    no_depth: bool,
}

#[derive(Args)]
struct ExportTrajArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    path_id: i64,
    #[arg(long, default_value_t = 0)]
    instruction_index: usize,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 3,
            CliError::Backend(_) => 4,
        }
    }
}

impl From<EnvError> for CliError {
    fn from(error: EnvError) -> Self {
        CliError::Validation(error.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(error: EvalError) -> Self {
        CliError::Validation(error.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(error: BackendError) -> Self {
        CliError::Backend(error.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(error: std::io::Error) -> Self {
        CliError::Validation(error.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Eval(args) => eval(args),
        Command::Synth(args) => synth(args),
        Command::Describe(args) => describe(args),
        Command::Prompts => prompts(),
        Command::ExportTraj(args) => export_traj(args),
    };
    if let Err(error) = outcome {
        eprintln!("error: {error}");
        std::process::exit(error.exit_code());
    }
}

// --- manifest ---------------------------------------------------------------

/// Reproducibility snapshot written next to every output file before the
/// work starts: config, code version, timestamp, input digests.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    backend: Option<String>,
    granularity: GranularityConfig,
    max_steps: Option<usize>,
    seed: Option<u64>,
    workers: Option<usize>,
    no_objects: bool,
    no_depth: bool,
    version: String,
    timestamp: String,
    inputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(manifest_path(out), text + "\n")?;
    Ok(())
}

// --- subcommands --------------------------------------------------------------

fn check_granularity(env: &Environment, preset: &Option<String>) -> Result<(), CliError> {
    let Some(name) = preset else {
        return Ok(());
    };
    let expected = GranularityConfig::preset(name).ok_or_else(|| {
        CliError::Validation(format!(
            "unknown granularity preset `{name}` (expected one of {})",
            GranularityConfig::preset_names().join(", ")
        ))
    })?;
    if env.granularity != expected {
        return Err(CliError::Validation(format!(
            "environment granularity {:?} does not match preset `{name}`",
            env.granularity
        )));
    }
    Ok(())
}

fn load_env_verbose(path: &Path) -> Result<Environment, CliError> {
    let (env, warnings) = load_environment_with_warnings(path)?;
    for warning in warnings {
        eprintln!("warning: {warning}");
    }
    Ok(env)
}

/// One prompt/response exchange in a transcript file.
#[derive(Serialize, Deserialize)]
struct TranscriptLine {
    path_id: i64,
    instruction_index: usize,
    step: usize,
    prompt: String,
    response: String,
    action: String,
    state_after: TrajectoryState,
}

fn read_replay_transcripts(path: &Path) -> Result<BTreeMap<(i64, usize), Vec<String>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Backend(format!("cannot read transcript {}: {e}", path.display()))
    })?;
    let mut transcripts: BTreeMap<(i64, usize), Vec<String>> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed: TranscriptLine = serde_json::from_str(line)
            .map_err(|e| CliError::Backend(format!("bad transcript line: {e}")))?;
        transcripts
            .entry((parsed.path_id, parsed.instruction_index))
            .or_default()
            .push(parsed.response);
    }
    if transcripts.is_empty() {
        return Err(CliError::Backend(format!(
            "transcript {} holds no exchanges",
            path.display()
        )));
    }
    Ok(transcripts)
}

fn write_transcripts(path: &Path, results: &[EpisodeResult]) -> Result<(), CliError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for result in results {
        for step in result.transcript.iter().flatten() {
            let line = TranscriptLine {
                path_id: result.path_id,
                instruction_index: result.instruction_index,
                step: step.step,
                prompt: step.prompt.clone(),
                response: step.response.clone(),
                action: step.action.clone(),
                state_after: step.state_after.clone(),
            };
            serde_json::to_writer(&mut file, &line)
                .map_err(|e| CliError::Validation(e.to_string()))?;
            file.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let env = load_env_verbose(&args.env)?;
    check_granularity(&env, &args.granularity)?;
    let episodes = load_episodes(&args.episodes, &env)?;
    if episodes.is_empty() {
        return Err(CliError::Validation(
            "episode file holds no episodes".into(),
        ));
    }

    let mut inputs = BTreeMap::new();
    inputs.insert(args.env.display().to_string(), sha256_file(&args.env)?);
    inputs.insert(
        args.episodes.display().to_string(),
        sha256_file(&args.episodes)?,
    );
    let replaying = args.backend == BackendKind::Replay;
    if replaying {
        let path = args.transcript.as_ref().ok_or_else(|| {
            CliError::Backend("--backend replay needs --transcript <recorded file>".into())
        })?;
        inputs.insert(path.display().to_string(), sha256_file(path)?);
    }
    write_manifest(
        &args.out,
        &RunManifest {
            command: "run".into(),
            backend: Some(args.backend.name().into()),
            granularity: env.granularity.clone(),
            max_steps: Some(args.max_steps),
            seed: args.seed,
            workers: Some(args.workers),
            no_objects: args.no_objects,
            no_depth: args.no_depth,
            version: env!("CARGO_PKG_VERSION").into(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            inputs,
        },
    )?;

    // The decision backend comes from a per-episode factory; the summarizer
    // is shared. Offline runs summarize with the echo backend, live runs
    // with the live model itself.
    let factory: Box<dyn BackendFactory>;
    let summarizer: Box<dyn CompletionBackend>;
    match args.backend {
        BackendKind::Oracle => {
            factory = Box::new(OracleFactory);
            summarizer = Box::new(EchoBackend);
        }
        BackendKind::Random => {
            factory = Box::new(RandomFactory::new(args.seed.unwrap_or(0)));
            summarizer = Box::new(EchoBackend);
        }
        BackendKind::Echo => {
            factory = Box::new(EchoFactory);
            summarizer = Box::new(EchoBackend);
        }
        BackendKind::Replay => {
            let transcripts = read_replay_transcripts(args.transcript.as_ref().unwrap())?;
            factory = Box::new(ReplayFactory::new(transcripts));
            summarizer = Box::new(EchoBackend);
        }
        BackendKind::Live => {
            let mut config = match &args.config {
                Some(path) => load_backend_config(path)?,
                None => BackendConfig::default(),
            };
            config.api_key = ApiKey::from_env();
            if config.api_key.is_none() {
                return Err(CliError::Backend(format!(
                    "live backend needs {} in the environment",
                    navgraph::backend::API_KEY_ENV_VAR
                )));
            }
            let live: std::sync::Arc<dyn CompletionBackend> =
                std::sync::Arc::new(LiveBackend::new(config));
            factory = Box::new(SharedBackend(std::sync::Arc::clone(&live)));
            summarizer = Box::new(SharedBackend(live));
        }
    }

    let agent_config = AgentConfig {
        max_steps: args.max_steps,
        record_transcript: args.transcript.is_some() && !replaying,
        observation: ObservationOptions {
            include_objects: !args.no_objects,
            include_depth: !args.no_depth,
            ..ObservationOptions::default()
        },
        ..AgentConfig::default()
    };

    let envs = BTreeMap::from([(env.scan_id.clone(), env.clone())]);
    let results = run_batch(
        &envs,
        &episodes,
        factory.as_ref(),
        summarizer.as_ref(),
        &agent_config,
        args.workers,
    );

    let cache = GeodesicCache::new();
    let mut records = Vec::with_capacity(results.len());
    let mut metrics = Vec::with_capacity(results.len());
    for (episode, result) in episodes.iter().zip(&results) {
        let scored = score_episode_cached(
            &env,
            episode,
            result,
            DistanceMode::Geodesic,
            DEFAULT_SUCCESS_THRESHOLD_M,
            &cache,
        )?;
        records.push(EpisodeRecord::new(result, scored));
        metrics.push(scored);
    }
    let agg = aggregate(&metrics)?;
    write_results(&args.out, &records, &agg)?;
    if agent_config.record_transcript {
        write_transcripts(args.transcript.as_ref().unwrap(), &results)?;
    }
    print!("{}", format_table(&agg));
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let (records, _) = read_results(&args.results)?;
    if records.is_empty() {
        return Err(CliError::Validation(format!(
            "{} holds no episode records",
            args.results.display()
        )));
    }

    let mut metrics: Vec<_> = records.iter().map(|r| r.metrics).collect();
    if let (Some(env_path), Some(episodes_path)) = (&args.env, &args.episodes) {
        // Full verification: re-score every trajectory from scratch and
        // require agreement with the stored metrics.
        let env = load_env_verbose(env_path)?;
        let episodes = load_episodes(episodes_path, &env)?;
        let by_key: BTreeMap<(i64, usize), &Episode> = episodes
            .iter()
            .map(|ep| ((ep.path_id, ep.instruction_index), ep))
            .collect();
        let cache = GeodesicCache::new();
        metrics.clear();
        for record in &records {
            let key = (record.path_id, record.instruction_index);
            let episode = by_key.get(&key).ok_or_else(|| {
                CliError::Validation(format!(
                    "results reference path_id {} instruction {} which is not in {}",
                    key.0,
                    key.1,
                    episodes_path.display()
                ))
            })?;
            let trajectory = reconstruct_trajectory(&env, episode, &record.trajectory)?;
            let stub = EpisodeResult {
                path_id: record.path_id,
                instruction_index: record.instruction_index,
                trajectory,
                stop_reason: record.stop_reason,
                final_answer: None,
                history: HistoryBuffer::new(),
                transcript: None,
            };
            let rescored = score_episode_cached(
                &env,
                episode,
                &stub,
                DistanceMode::Geodesic,
                DEFAULT_SUCCESS_THRESHOLD_M,
                &cache,
            )?;
            let stored = &record.metrics;
            let near = |a: f64, b: f64| (a - b).abs() <= 1e-9;
            if !(near(rescored.tl, stored.tl)
                && near(rescored.ne, stored.ne)
                && near(rescored.spl, stored.spl)
                && rescored.sr == stored.sr
                && rescored.osr == stored.osr)
            {
                return Err(CliError::Validation(format!(
                    "stored metrics for path_id {} instruction {} do not match the trajectory: {stored:?} vs {rescored:?}",
                    key.0, key.1
                )));
            }
            metrics.push(rescored);
        }
    } else if let Some(env_path) = &args.env {
        // Without episodes we can still check that every trajectory node
        // exists in the environment.
        let env = load_env_verbose(env_path)?;
        for record in &records {
            for id in &record.trajectory {
                if !env.contains(id) {
                    return Err(CliError::Validation(format!(
                        "results reference viewpoint `{id}` missing from {}",
                        env_path.display()
                    )));
                }
            }
        }
    }

    let agg = aggregate(&metrics)?;
    print!("{}", format_table(&agg));
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    if args.rows == 0 || args.cols == 0 {
        return Err(CliError::Validation("grid must be at least 1x1".into()));
    }
    if !(args.spacing.is_finite() && args.spacing > 0.0) {
        return Err(CliError::Validation("spacing must be positive".into()));
    }
    let granularity = GranularityConfig::preset(&args.granularity).ok_or_else(|| {
        CliError::Validation(format!(
            "unknown granularity preset `{}` (expected one of {})",
            args.granularity,
            GranularityConfig::preset_names().join(", ")
        ))
    })?;
    let env =
        generate_synthetic_grid_with(args.rows, args.cols, args.spacing, args.seed, granularity);
    write_manifest(
        &args.out,
        &RunManifest {
            command: "synth".into(),
            backend: None,
            granularity: env.granularity.clone(),
            max_steps: None,
            seed: Some(args.seed),
            workers: None,
            no_objects: false,
            no_depth: false,
            version: env!("CARGO_PKG_VERSION").into(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            inputs: BTreeMap::new(),
        },
    )?;
    std::fs::write(&args.out, env.to_json_string() + "\n")?;
    eprintln!(
        "wrote {} ({} viewpoints, scan `{}`)",
        args.out.display(),
        env.viewpoints.len(),
        env.scan_id
    );
    Ok(())
}

fn describe(args: DescribeArgs) -> Result<(), CliError> {
    let env = load_env_verbose(&args.env)?;
    check_granularity(&env, &args.granularity)?;
    let composer = ObservationComposer::new(&env).with_options(ObservationOptions {
        include_objects: !args.no_objects,
        include_depth: !args.no_depth,
        ..ObservationOptions::default()
    });
    let state = navgraph::agent::AgentState::new(&args.viewpoint, args.heading);
    let observation = composer
        .compose(&state)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    println!("{}", render_observation(&observation));
    Ok(())
}

fn prompts() -> Result<(), CliError> {
    for template in templates() {
        println!("== {} ==", template.name);
        println!("{}", template.body);
        println!();
    }
    Ok(())
}

fn export_traj(args: ExportTrajArgs) -> Result<(), CliError> {
    let env = load_env_verbose(&args.env)?;
    let episodes = load_episodes(&args.episodes, &env)?;
    let (records, _) = read_results(&args.results)?;
    let record = records
        .iter()
        .find(|r| r.path_id == args.path_id && r.instruction_index == args.instruction_index)
        .ok_or_else(|| {
            CliError::Validation(format!(
                "no record for path_id {} instruction {} in {}",
                args.path_id,
                args.instruction_index,
                args.results.display()
            ))
        })?;
    let episode = episodes
        .iter()
        .find(|ep| ep.path_id == args.path_id && ep.instruction_index == args.instruction_index)
        .ok_or_else(|| {
            CliError::Validation(format!(
                "no episode for path_id {} instruction {} in {}",
                args.path_id,
                args.instruction_index,
                args.episodes.display()
            ))
        })?;

    let trajectory = reconstruct_trajectory(&env, episode, &record.trajectory)?;
    let stub = EpisodeResult {
        path_id: record.path_id,
        instruction_index: record.instruction_index,
        trajectory,
        stop_reason: record.stop_reason,
        final_answer: None,
        history: HistoryBuffer::new(),
        transcript: None,
    };

    let mut inputs = BTreeMap::new();
    inputs.insert(
        args.results.display().to_string(),
        sha256_file(&args.results)?,
    );
    inputs.insert(args.env.display().to_string(), sha256_file(&args.env)?);
    inputs.insert(
        args.episodes.display().to_string(),
        sha256_file(&args.episodes)?,
    );
    write_manifest(
        &args.out,
        &RunManifest {
            command: "export-traj".into(),
            backend: None,
            granularity: env.granularity.clone(),
            max_steps: None,
            seed: None,
            workers: None,
            no_objects: false,
            no_depth: false,
            version: env!("CARGO_PKG_VERSION").into(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            inputs,
        },
    )?;
    export_topdown(&env, &stub, &args.out)?;
    eprintln!(
        "wrote {} ({} states)",
        args.out.display(),
        stub.trajectory.len()
    );
    Ok(())
}
