//! The standard trajectory metric suite (TL, NE, SR, OSR, SPL), per-episode
//! and aggregate scoring, results persistence, and top-down trajectory
//! export.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{EpisodeResult, StopReason, TrajectoryState};
use crate::env::{Environment, Episode};
use crate::geometry::{
    self, bearing_between, euclidean_distance, path_length, GeometryError,
};

/// An episode succeeds when its navigation error is strictly below this.
pub const DEFAULT_SUCCESS_THRESHOLD_M: f64 = 3.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no path between `{from}` and `{to}`")]
    Unreachable { from: String, to: String },
    #[error("unknown viewpoint `{0}`")]
    UnknownViewpoint(String),
    #[error("cannot aggregate an empty metrics list")]
    EmptyInput,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

impl From<GeometryError> for EvalError {
    fn from(error: GeometryError) -> Self {
        match error {
            GeometryError::UnknownViewpoint(id) => EvalError::UnknownViewpoint(id),
            GeometryError::DegenerateDirection => {
                // Never produced by the distance operations used here.
                EvalError::UnknownViewpoint("degenerate direction".to_string())
            }
        }
    }
}

/// How navigation error measures distance. Geodesic (graph shortest path)
/// is the benchmark default; euclidean is exposed for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMode {
    #[default]
    Geodesic,
    Euclidean,
}

/// The five per-episode metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Trajectory length: meters actually traveled.
    pub tl: f64,
    /// Navigation error: distance from the final location to the goal.
    pub ne: f64,
    /// Success: 1 when the agent stops within the threshold of the goal.
    pub sr: u8,
    /// Oracle success: 1 when any visited viewpoint is within the threshold.
    pub osr: u8,
    /// Success weighted by the normalized inverse of path length.
    pub spl: f64,
}

/// Aggregate over a run: mean TL and NE, and the rates as percentages
/// rounded to two decimals. Raw per-episode values stay unrounded in the
/// results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub episodes: usize,
    pub tl: f64,
    pub ne: f64,
    pub osr: f64,
    pub sr: f64,
    pub spl: f64,
}

/// Synchronized memo for geodesic tables, keyed by (scan, node,
/// direction). Batch scoring shares one across threads so episodes with a
/// common start or goal reuse the same sweep.
#[derive(Default)]
pub struct GeodesicCache {
    tables: std::sync::Mutex<std::collections::HashMap<(String, String, bool), std::sync::Arc<geometry::GeodesicTable>>>,
}

impl GeodesicCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn table(
        &self,
        env: &Environment,
        node: &str,
        reverse: bool,
    ) -> Result<std::sync::Arc<geometry::GeodesicTable>, EvalError> {
        let key = (env.scan_id.clone(), node.to_string(), reverse);
        if let Some(table) = self.tables.lock().unwrap().get(&key) {
            return Ok(std::sync::Arc::clone(table));
        }
        let table = std::sync::Arc::new(if reverse {
            geometry::shortest_paths_to(env, node)?
        } else {
            geometry::shortest_paths(env, node)?
        });
        self.tables
            .lock()
            .unwrap()
            .insert(key, std::sync::Arc::clone(&table));
        Ok(table)
    }
}

/// Distance from the agent's final location to the destination, geodesic
/// by default.
pub fn navigation_error(
    env: &Environment,
    final_viewpoint: &str,
    goal: &str,
    mode: DistanceMode,
) -> Result<f64, EvalError> {
    navigation_error_cached(env, final_viewpoint, goal, mode, &GeodesicCache::new())
}

fn navigation_error_cached(
    env: &Environment,
    final_viewpoint: &str,
    goal: &str,
    mode: DistanceMode,
    cache: &GeodesicCache,
) -> Result<f64, EvalError> {
    let from = env
        .viewpoint(final_viewpoint)
        .ok_or_else(|| EvalError::UnknownViewpoint(final_viewpoint.to_string()))?;
    let to = env
        .viewpoint(goal)
        .ok_or_else(|| EvalError::UnknownViewpoint(goal.to_string()))?;
    match mode {
        DistanceMode::Euclidean => Ok(euclidean_distance(&from.position, &to.position)),
        // The reverse table from the goal serves every final viewpoint.
        DistanceMode::Geodesic => cache
            .table(env, goal, true)?
            .distance(final_viewpoint)
            .ok_or_else(|| EvalError::Unreachable {
                from: final_viewpoint.to_string(),
                to: goal.to_string(),
            }),
    }
}

/// 1 when the navigation error is strictly below the threshold.
pub fn success(ne: f64, threshold: f64) -> u8 {
    u8::from(ne < threshold)
}

/// 1 when any visited viewpoint comes within the threshold of the goal,
/// measured geodesically. Viewpoints that cannot reach the goal count as
/// infinitely far.
pub fn oracle_success(
    env: &Environment,
    trajectory: &[String],
    goal: &str,
    threshold: f64,
) -> Result<u8, EvalError> {
    oracle_success_with(
        env,
        trajectory,
        goal,
        threshold,
        DistanceMode::Geodesic,
        &GeodesicCache::new(),
    )
}

fn oracle_success_with(
    env: &Environment,
    trajectory: &[String],
    goal: &str,
    threshold: f64,
    mode: DistanceMode,
    cache: &GeodesicCache,
) -> Result<u8, EvalError> {
    if !env.contains(goal) {
        return Err(EvalError::UnknownViewpoint(goal.to_string()));
    }
    // Distances from every node *to* the goal come from one reverse-edge
    // sweep instead of one search per visited node.
    let to_goal = match mode {
        DistanceMode::Geodesic => Some(cache.table(env, goal, true)?),
        DistanceMode::Euclidean => None,
    };
    let goal_position = env.viewpoint(goal).unwrap().position;
    for visited in trajectory {
        let vp = env
            .viewpoint(visited)
            .ok_or_else(|| EvalError::UnknownViewpoint(visited.to_string()))?;
        let distance = match &to_goal {
            Some(table) => table.distance(visited).unwrap_or(f64::INFINITY),
            None => euclidean_distance(&vp.position, &goal_position),
        };
        if distance < threshold {
            return Ok(1);
        }
    }
    Ok(0)
}

/// Success weighted by the normalized inverse of path length:
/// `sr * optimal / max(optimal, traveled)`. Starting on the goal and not
/// moving (optimal and traveled both zero, success) scores 1.
pub fn spl(sr: u8, optimal: f64, traveled: f64) -> f64 {
    if sr == 0 {
        return 0.0;
    }
    let denominator = optimal.max(traveled);
    if denominator == 0.0 {
        return 1.0;
    }
    optimal / denominator
}

/// Score one finished episode with the default geodesic mode and 3 m
/// threshold.
pub fn score_episode(
    env: &Environment,
    episode: &Episode,
    result: &EpisodeResult,
) -> Result<EpisodeMetrics, EvalError> {
    score_episode_with(
        env,
        episode,
        result,
        DistanceMode::Geodesic,
        DEFAULT_SUCCESS_THRESHOLD_M,
    )
}

/// Score one finished episode. The goal is the last ground-truth node, the
/// optimal length is the geodesic from the episode start to the goal, and
/// truncated episodes are scored at whatever node they reached.
pub fn score_episode_with(
    env: &Environment,
    episode: &Episode,
    result: &EpisodeResult,
    mode: DistanceMode,
    threshold: f64,
) -> Result<EpisodeMetrics, EvalError> {
    score_episode_cached(env, episode, result, mode, threshold, &GeodesicCache::new())
}

/// [`score_episode_with`] sharing a [`GeodesicCache`], for scoring batches
/// where episodes repeat starts and goals (R2R carries three instructions
/// per trajectory).
pub fn score_episode_cached(
    env: &Environment,
    episode: &Episode,
    result: &EpisodeResult,
    mode: DistanceMode,
    threshold: f64,
    cache: &GeodesicCache,
) -> Result<EpisodeMetrics, EvalError> {
    let trajectory = result.trajectory_ids();
    assert!(!trajectory.is_empty(), "a trajectory always holds its start");
    let goal = episode.goal_viewpoint();
    let start = episode.start_viewpoint();
    let final_viewpoint = trajectory.last().unwrap();

    let tl = path_length(env, &trajectory)?;
    let ne = navigation_error_cached(env, final_viewpoint, goal, mode, cache)?;
    let sr = success(ne, threshold);
    let osr = oracle_success_with(env, &trajectory, goal, threshold, mode, cache)?;
    let optimal = cache
        .table(env, start, false)?
        .distance(goal)
        .ok_or_else(|| EvalError::Unreachable {
            from: start.to_string(),
            to: goal.to_string(),
        })?;
    let spl = spl(sr, optimal, tl);

    let metrics = EpisodeMetrics { tl, ne, sr, osr, spl };
    debug_assert!(metrics.spl <= metrics.sr as f64 + 1e-12);
    debug_assert!(metrics.osr >= metrics.sr);
    Ok(metrics)
}

fn round2(value: f64) -> f64 {
    (value * 100.0).round() / 100.0
}

/// Arithmetic means over the scored episodes; rates become percentages
/// rounded to two decimals.
pub fn aggregate(metrics: &[EpisodeMetrics]) -> Result<AggregateMetrics, EvalError> {
    if metrics.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = metrics.len() as f64;
    let mean = |f: fn(&EpisodeMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
    Ok(AggregateMetrics {
        episodes: metrics.len(),
        tl: mean(|m| m.tl),
        ne: mean(|m| m.ne),
        osr: round2(mean(|m| m.osr as f64) * 100.0),
        sr: round2(mean(|m| m.sr as f64) * 100.0),
        spl: round2(mean(|m| m.spl) * 100.0),
    })
}

/// Human-readable summary table, columns ordered TL, NE, OSR, SR, SPL.
pub fn format_table(aggregate: &AggregateMetrics) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "episodes", "TL", "NE", "OSR", "SR", "SPL"
    ));
    out.push_str(&format!(
        "{:>8}  {:>8.2}  {:>8.2}  {:>8.2}  {:>8.2}  {:>8.2}\n",
        aggregate.episodes, aggregate.tl, aggregate.ne, aggregate.osr, aggregate.sr, aggregate.spl
    ));
    out
}

// --- results persistence ---------------------------------------------------

/// One scored episode, as one line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub path_id: i64,
    pub instruction_index: usize,
    pub stop_reason: StopReason,
    pub metrics: EpisodeMetrics,
    pub trajectory: Vec<String>,
}

impl EpisodeRecord {
    pub fn new(result: &EpisodeResult, metrics: EpisodeMetrics) -> Self {
        Self {
            path_id: result.path_id,
            instruction_index: result.instruction_index,
            stop_reason: result.stop_reason,
            metrics,
            trajectory: result.trajectory_ids(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AggregateLine {
    r#type: String,
    episodes: usize,
    tl: f64,
    ne: f64,
    osr: f64,
    sr: f64,
    spl: f64,
}

/// Write the results file: one JSON line per episode, then a final
/// aggregate summary line. Byte-identical for identical inputs.
pub fn write_results(
    path: &Path,
    records: &[EpisodeRecord],
    aggregate: &AggregateMetrics,
) -> Result<(), EvalError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    let line = AggregateLine {
        r#type: "aggregate".to_string(),
        episodes: aggregate.episodes,
        tl: round2(aggregate.tl),
        ne: round2(aggregate.ne),
        osr: aggregate.osr,
        sr: aggregate.sr,
        spl: aggregate.spl,
    };
    serde_json::to_writer(&mut file, &line)?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Read a results file back: the per-episode records and the aggregate
/// line when present.
pub fn read_results(path: &Path) -> Result<(Vec<EpisodeRecord>, Option<AggregateMetrics>), EvalError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    let mut aggregate = None;
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)?;
        if value.get("type").and_then(|t| t.as_str()) == Some("aggregate") {
            let parsed: AggregateLine = serde_json::from_value(value)?;
            aggregate = Some(AggregateMetrics {
                episodes: parsed.episodes,
                tl: parsed.tl,
                ne: parsed.ne,
                osr: parsed.osr,
                sr: parsed.sr,
                spl: parsed.spl,
            });
        } else {
            records.push(serde_json::from_value(value)?);
        }
    }
    Ok((records, aggregate))
}

// --- trajectory export ------------------------------------------------------

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// Export the visited states as CSV (`step,viewpoint_id,x,y,heading_deg`),
/// x-y projection, in visiting order. Deterministic bytes.
pub fn export_topdown(
    env: &Environment,
    result: &EpisodeResult,
    path: &Path,
) -> Result<(), EvalError> {
    let mut out = String::from("step,viewpoint_id,x,y,heading_deg\n");
    for (step, state) in result.trajectory.iter().enumerate() {
        let vp = env
            .viewpoint(&state.viewpoint_id)
            .ok_or_else(|| EvalError::UnknownViewpoint(state.viewpoint_id.clone()))?;
        out.push_str(&format!(
            "{step},{},{},{},{}\n",
            csv_field(&state.viewpoint_id),
            vp.position.x,
            vp.position.y,
            state.heading_deg
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Rebuild the pose sequence of a recorded trajectory: the start heading
/// comes from the episode and every later heading is the travel bearing,
/// matching how the agent updates its pose.
pub fn reconstruct_trajectory(
    env: &Environment,
    episode: &Episode,
    trajectory_ids: &[String],
) -> Result<Vec<TrajectoryState>, EvalError> {
    let mut states = Vec::with_capacity(trajectory_ids.len());
    let mut heading = crate::env::normalize_deg(episode.start_heading_deg);
    for (i, id) in trajectory_ids.iter().enumerate() {
        let vp = env
            .viewpoint(id)
            .ok_or_else(|| EvalError::UnknownViewpoint(id.clone()))?;
        if i > 0 {
            let previous = env.viewpoint(&trajectory_ids[i - 1]).unwrap();
            heading = bearing_between(&previous.position, &vp.position).unwrap_or(heading);
        }
        states.push(TrajectoryState {
            viewpoint_id: id.clone(),
            heading_deg: heading,
        });
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{HistoryBuffer, StopReason};
    use crate::env::generate_synthetic_grid;

    fn line_env() -> Environment {
        // A-B-C along y with |AB| = 2 and |BC| = 3.
        let json = serde_json::json!({
            "scan_id": "line",
            "granularity": {"fov_deg": 45.0, "headings": 8, "elevations": [-30.0, 0.0, 30.0]},
            "viewpoints": [
                {"id": "A", "position": [0.0, 0.0, 0.0], "neighbors": ["B"], "views": views()},
                {"id": "B", "position": [0.0, 2.0, 0.0], "neighbors": ["A", "C"], "views": views()},
                {"id": "C", "position": [0.0, 5.0, 0.0], "neighbors": ["B"], "views": views()},
            ]
        });
        fn views() -> serde_json::Value {
            let list: Vec<serde_json::Value> = (0..8)
                .flat_map(|h| {
                    [-30.0, 0.0, 30.0].map(|e| {
                        serde_json::json!({
                            "heading_deg": (h as f64) * 45.0,
                            "elevation_deg": e,
                            "caption": "a room"
                        })
                    })
                })
                .collect();
            serde_json::json!(list)
        }
        crate::env::parse_environment(&json.to_string()).unwrap().0
    }

    fn result_for(episode: &Episode, ids: &[&str]) -> EpisodeResult {
        EpisodeResult {
            path_id: episode.path_id,
            instruction_index: episode.instruction_index,
            trajectory: ids
                .iter()
                .map(|id| TrajectoryState {
                    viewpoint_id: id.to_string(),
                    heading_deg: 0.0,
                })
                .collect(),
            stop_reason: StopReason::FinalAnswer,
            final_answer: Some("Finished!".into()),
            history: HistoryBuffer::new(),
            transcript: None,
        }
    }

    fn episode(env: &Environment, path: &[&str]) -> Episode {
        Episode {
            path_id: 5,
            scan_id: env.scan_id.clone(),
            instruction: "walk".into(),
            instruction_index: 0,
            gt_path: path.iter().map(|s| s.to_string()).collect(),
            start_heading_deg: 0.0,
        }
    }

    #[test]
    fn navigation_error_modes() {
        let env = line_env();
        assert_eq!(
            navigation_error(&env, "C", "C", DistanceMode::Geodesic).unwrap(),
            0.0
        );
        assert_eq!(
            navigation_error(&env, "A", "C", DistanceMode::Geodesic).unwrap(),
            5.0
        );
        assert_eq!(
            navigation_error(&env, "A", "C", DistanceMode::Euclidean).unwrap(),
            5.0
        );
    }

    #[test]
    fn geodesic_never_undercuts_euclidean() {
        let env = generate_synthetic_grid(4, 4, 1.5, 9);
        let ids: Vec<&String> = env.viewpoints.keys().collect();
        for a in &ids {
            for b in &ids {
                let geo = navigation_error(&env, a, b, DistanceMode::Geodesic).unwrap();
                let euc = navigation_error(&env, a, b, DistanceMode::Euclidean).unwrap();
                assert!(geo >= euc - 1e-9, "{a} -> {b}: {geo} < {euc}");
            }
        }
    }

    #[test]
    fn success_boundary_is_strict() {
        assert_eq!(success(2.9, DEFAULT_SUCCESS_THRESHOLD_M), 1);
        assert_eq!(success(3.0, DEFAULT_SUCCESS_THRESHOLD_M), 0);
        assert_eq!(success(0.0, DEFAULT_SUCCESS_THRESHOLD_M), 1);
    }

    #[test]
    fn oracle_success_cases() {
        let env = line_env();
        // Passing through the goal then leaving still counts.
        let through = ["A", "B", "C", "B", "A"].map(String::from);
        assert_eq!(oracle_success(&env, &through, "C", 3.0).unwrap(), 1);
        // Never within threshold: A is 5 m from C, B is 3 m (strict).
        let far = ["A", "B"].map(String::from);
        assert_eq!(oracle_success(&env, &far, "C", 3.0).unwrap(), 0);
        // Single-node trajectory reduces to plain success at the start.
        let single = ["C"].map(String::from);
        assert_eq!(oracle_success(&env, &single, "C", 3.0).unwrap(), 1);
    }

    #[test]
    fn spl_formula() {
        assert_eq!(spl(1, 10.0, 10.0), 1.0);
        assert_eq!(spl(1, 10.0, 20.0), 0.5);
        assert_eq!(spl(0, 10.0, 5.0), 0.0);
        assert_eq!(spl(1, 0.0, 0.0), 1.0);
    }

    #[test]
    fn oracle_episode_scores_perfectly() {
        let env = line_env();
        let ep = episode(&env, &["A", "B", "C"]);
        let result = result_for(&ep, &["A", "B", "C"]);
        let m = score_episode(&env, &ep, &result).unwrap();
        assert_eq!(m.ne, 0.0);
        assert_eq!(m.sr, 1);
        assert_eq!(m.osr, 1);
        assert!((m.spl - 1.0).abs() < 1e-12);
        assert!((m.tl - 5.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_agent_far_from_goal_fails() {
        let env = line_env();
        let ep = episode(&env, &["A", "B", "C"]);
        let result = result_for(&ep, &["A"]);
        let m = score_episode(&env, &ep, &result).unwrap();
        assert_eq!(m.tl, 0.0);
        assert_eq!(m.sr, 0);
        assert_eq!(m.spl, 0.0);
        assert_eq!(m.ne, 5.0);
    }

    #[test]
    fn truncated_episode_scores_at_the_final_node() {
        let env = line_env();
        let ep = episode(&env, &["A", "B", "C"]);
        let mut result = result_for(&ep, &["A", "B"]);
        result.stop_reason = StopReason::ParseFailure;
        let m = score_episode(&env, &ep, &result).unwrap();
        assert_eq!(m.ne, 3.0);
        assert_eq!(m.sr, 0); // strict boundary
        assert!((m.tl - 2.0).abs() < 1e-12);
    }

    #[test]
    fn detour_halves_spl() {
        let env = line_env();
        let ep = episode(&env, &["A", "B", "C"]);
        // Bounce between A and B twice before walking on: 5 edges of the
        // A-B leg plus the final B-C leg, 13 m against an optimum of 5 m.
        let result = result_for(&ep, &["A", "B", "A", "B", "A", "B", "C"]);
        let m = score_episode(&env, &ep, &result).unwrap();
        assert_eq!(m.sr, 1);
        assert!((m.tl - 13.0).abs() < 1e-12);
        assert!((m.spl - 5.0 / 13.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_means_and_percentages() {
        let one = EpisodeMetrics { tl: 10.0, ne: 0.0, sr: 1, osr: 1, spl: 1.0 };
        let other = EpisodeMetrics { tl: 20.0, ne: 6.0, sr: 0, osr: 1, spl: 0.0 };
        let agg = aggregate(&[one, other]).unwrap();
        assert_eq!(agg.episodes, 2);
        assert_eq!(agg.tl, 15.0);
        assert_eq!(agg.ne, 3.0);
        assert_eq!(agg.sr, 50.0);
        assert_eq!(agg.osr, 100.0);
        assert_eq!(agg.spl, 50.0);

        let reversed = aggregate(&[other, one]).unwrap();
        assert_eq!(agg, reversed);

        assert!(matches!(aggregate(&[]), Err(EvalError::EmptyInput)));

        let single = aggregate(&[one]).unwrap();
        assert_eq!(single.sr, 100.0);
        assert_eq!(single.tl, 10.0);
    }

    #[test]
    fn table_orders_columns_tl_ne_osr_sr_spl() {
        let agg = AggregateMetrics { episodes: 1, tl: 1.0, ne: 2.0, osr: 3.0, sr: 4.0, spl: 5.0 };
        let table = format_table(&agg);
        let header = table.lines().next().unwrap();
        let cols: Vec<&str> = header.split_whitespace().collect();
        assert_eq!(cols, vec!["episodes", "TL", "NE", "OSR", "SR", "SPL"]);
    }

    #[test]
    fn results_round_trip_and_stay_stable() {
        let env = line_env();
        let ep = episode(&env, &["A", "B", "C"]);
        let result = result_for(&ep, &["A", "B", "C"]);
        let metrics = score_episode(&env, &ep, &result).unwrap();
        let records = vec![EpisodeRecord::new(&result, metrics)];
        let agg = aggregate(&[metrics]).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.jsonl");
        let path_b = dir.path().join("b.jsonl");
        write_results(&path_a, &records, &agg).unwrap();
        write_results(&path_b, &records, &agg).unwrap();
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap()
        );

        let (read_records, read_agg) = read_results(&path_a).unwrap();
        assert_eq!(read_records, records);
        assert_eq!(read_agg.unwrap().episodes, 1);
    }

    #[test]
    fn export_writes_one_row_per_state_plus_header() {
        let env = line_env();
        let ep = episode(&env, &["A", "B", "C"]);
        let result = result_for(&ep, &["A", "B", "C", "B"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        export_topdown(&env, &result, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5); // header + 4 states
        assert_eq!(lines[0], "step,viewpoint_id,x,y,heading_deg");
        assert_eq!(lines[1], "0,A,0,0,0");
        assert_eq!(lines[2], "1,B,0,2,0");

        // Re-export is byte-identical.
        let path2 = dir.path().join("traj2.csv");
        export_topdown(&env, &result, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn cached_scoring_matches_uncached() {
        let env = generate_synthetic_grid(3, 3, 2.0, 11);
        let cache = GeodesicCache::new();
        // Three instructions of one trajectory share start and goal, the
        // R2R shape the cache exists for.
        for instruction_index in 0..3 {
            let mut ep = episode(&env, &["vp_0_0", "vp_0_1", "vp_1_1"]);
            ep.instruction_index = instruction_index;
            let result = result_for(&ep, &["vp_0_0", "vp_0_1"]);
            let plain = score_episode(&env, &ep, &result).unwrap();
            let cached = score_episode_cached(
                &env,
                &ep,
                &result,
                DistanceMode::Geodesic,
                DEFAULT_SUCCESS_THRESHOLD_M,
                &cache,
            )
            .unwrap();
            assert_eq!(plain, cached);
        }
        // One reverse table for the goal, one forward table for the start.
        assert_eq!(cache.tables.lock().unwrap().len(), 2);
    }

    #[test]
    fn reconstruction_matches_agent_heading_updates() {
        let env = line_env();
        let ep = episode(&env, &["A", "B", "C"]);
        let ids: Vec<String> = ["A", "B", "C"].map(String::from).to_vec();
        let states = reconstruct_trajectory(&env, &ep, &ids).unwrap();
        assert_eq!(states[0].heading_deg, 0.0);
        assert_eq!(states[1].heading_deg, 0.0); // due north travel
        assert_eq!(states[2].heading_deg, 0.0);
        assert_eq!(states.len(), 3);
    }

    #[test]
    fn unreachable_goal_is_typed() {
        let json = serde_json::json!({
            "scan_id": "split",
            "granularity": {"fov_deg": 45.0, "headings": 8, "elevations": [0.0]},
            "viewpoints": [
                {"id": "A", "position": [0.0, 0.0, 0.0], "neighbors": [], "views": island()},
                {"id": "B", "position": [9.0, 9.0, 0.0], "neighbors": [], "views": island()},
            ]
        });
        fn island() -> serde_json::Value {
            let list: Vec<serde_json::Value> = (0..8)
                .map(|h| {
                    serde_json::json!({
                        "heading_deg": (h as f64) * 45.0,
                        "elevation_deg": 0.0,
                        "caption": "x"
                    })
                })
                .collect();
            serde_json::json!(list)
        }
        let env = crate::env::parse_environment(&json.to_string()).unwrap().0;
        assert!(matches!(
            navigation_error(&env, "A", "B", DistanceMode::Geodesic),
            Err(EvalError::Unreachable { .. })
        ));
        assert!(navigation_error(&env, "A", "B", DistanceMode::Euclidean).is_ok());
    }
}
