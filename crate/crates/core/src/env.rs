//! Environment and episode loading, validation, and synthesis.
//!
//! An [`Environment`] is an immutable graph of viewpoints with 3D poses,
//! adjacency, per-view captions, and object annotations. It is the single
//! source of geometric and semantic ground truth for the rest of the crate:
//! once loaded it is never mutated and can be shared read-only across any
//! number of concurrent episode workers.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("validation error: {0}")]
    Validation(String),
}

/// A point in the scan frame: x east, y north, z up, all in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// A detected object: class name, absolute bearing, elevation, and the
/// depth of its center pixel in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    #[serde(rename = "class")]
    pub class_name: String,
    pub heading_deg: f64,
    pub elevation_deg: f64,
    pub depth_m: f64,
}

/// The caption of one egocentric view, keyed by its grid heading and
/// elevation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewAnnotation {
    pub heading_deg: f64,
    pub elevation_deg: f64,
    pub caption: String,
}

/// One node of the navigation graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Viewpoint {
    pub id: String,
    pub position: Position,
    pub neighbors: Vec<String>,
    pub views: Vec<ViewAnnotation>,
    pub objects: Vec<ObjectAnnotation>,
    /// Precomputed one-sentence summary per grid heading, keyed by
    /// milli-degrees (see [`heading_key`]). When present the observation
    /// composer uses these instead of calling a summarizer backend.
    pub direction_summaries: Option<BTreeMap<i64, String>>,
}

impl Viewpoint {
    /// The stored summary for a grid heading, if any.
    pub fn direction_summary(&self, heading_deg: f64) -> Option<&str> {
        self.direction_summaries
            .as_ref()
            .and_then(|m| m.get(&heading_key(heading_deg)))
            .map(String::as_str)
    }
}

/// Degrees normalized to [0, 360).
pub fn normalize_deg(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    if d == 360.0 {
        0.0
    } else {
        d
    }
}

/// Map keys for heading grids: headings compared at milli-degree
/// resolution after normalization to [0, 360).
pub fn heading_key(heading_deg: f64) -> i64 {
    (normalize_deg(heading_deg) * 1000.0).round() as i64
}

fn elevation_key(elevation_deg: f64) -> i64 {
    (elevation_deg * 1000.0).round() as i64
}

/// View granularity: field of view per image, number of heading stops, and
/// the elevation grid. Views per viewpoint is `headings * elevations`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityConfig {
    pub fov_deg: f64,
    pub headings: usize,
    pub elevations: Vec<f64>,
}

impl GranularityConfig {
    /// 45° views, 8 headings x 3 elevations = 24 views per viewpoint.
    /// This is the default granularity.
    pub fn fov45x24() -> Self {
        Self {
            fov_deg: 45.0,
            headings: 8,
            elevations: vec![-30.0, 0.0, 30.0],
        }
    }

    /// 60° views, 12 headings x 1 elevation = 12 views per viewpoint.
    pub fn fov60x12() -> Self {
        Self {
            fov_deg: 60.0,
            headings: 12,
            elevations: vec![0.0],
        }
    }

    /// 30° views, 12 headings x 3 elevations = 36 views per viewpoint.
    pub fn fov30x36() -> Self {
        Self {
            fov_deg: 30.0,
            headings: 12,
            elevations: vec![-30.0, 0.0, 30.0],
        }
    }

    /// Look up a named preset (`fov45x24`, `fov60x12`, `fov30x36`).
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "fov45x24" => Some(Self::fov45x24()),
            "fov60x12" => Some(Self::fov60x12()),
            "fov30x36" => Some(Self::fov30x36()),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["fov45x24", "fov60x12", "fov30x36"]
    }

    pub fn views_per_viewpoint(&self) -> usize {
        self.headings * self.elevations.len()
    }

    pub fn heading_step(&self) -> f64 {
        360.0 / self.headings as f64
    }

    /// The heading grid values, clockwise from north.
    pub fn grid_headings(&self) -> Vec<f64> {
        let step = self.heading_step();
        (0..self.headings).map(|i| i as f64 * step).collect()
    }

    fn validate(&self) -> Result<(), EnvError> {
        if !(self.fov_deg.is_finite() && self.fov_deg > 0.0) {
            return Err(EnvError::Validation(format!(
                "granularity fov_deg must be positive, got {}",
                self.fov_deg
            )));
        }
        if self.headings == 0 {
            return Err(EnvError::Validation(
                "granularity must have at least one heading".into(),
            ));
        }
        if self.elevations.is_empty() {
            return Err(EnvError::Validation(
                "granularity must have at least one elevation".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for &e in &self.elevations {
            if !(e.is_finite() && (-90.0..=90.0).contains(&e)) {
                return Err(EnvError::Validation(format!(
                    "granularity elevation {e} outside [-90, 90]"
                )));
            }
            if !seen.insert(elevation_key(e)) {
                return Err(EnvError::Validation(format!(
                    "granularity elevation {e} listed twice"
                )));
            }
        }
        Ok(())
    }
}

/// An immutable navigation graph for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub scan_id: String,
    pub viewpoints: BTreeMap<String, Viewpoint>,
    pub granularity: GranularityConfig,
}

impl Environment {
    pub fn viewpoint(&self, id: &str) -> Option<&Viewpoint> {
        self.viewpoints.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.viewpoints.contains_key(id)
    }

    /// Canonical JSON serialization: viewpoints sorted by id, stable field
    /// order. Byte-identical for equal environments.
    pub fn to_json_string(&self) -> String {
        let file = EnvironmentFile::from_env(self);
        serde_json::to_string_pretty(&file).expect("environment serialization cannot fail")
    }
}

/// One (trajectory, instruction) pair to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub path_id: i64,
    pub scan_id: String,
    pub instruction: String,
    /// Which of the record's instruction strings this episode carries.
    pub instruction_index: usize,
    pub gt_path: Vec<String>,
    pub start_heading_deg: f64,
}

impl Episode {
    pub fn start_viewpoint(&self) -> &str {
        &self.gt_path[0]
    }

    pub fn goal_viewpoint(&self) -> &str {
        self.gt_path.last().expect("gt_path is never empty")
    }
}

// --- file schema ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EnvironmentFile {
    scan_id: String,
    granularity: GranularityConfig,
    viewpoints: Vec<ViewpointRecord>,
}

#[derive(Serialize, Deserialize)]
struct ViewpointRecord {
    id: String,
    position: [f64; 3],
    neighbors: Vec<String>,
    views: Vec<ViewAnnotation>,
    #[serde(default)]
    objects: Vec<ObjectAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    direction_summaries: Option<BTreeMap<String, String>>,
}

impl EnvironmentFile {
    fn from_env(env: &Environment) -> Self {
        let viewpoints = env
            .viewpoints
            .values()
            .map(|vp| ViewpointRecord {
                id: vp.id.clone(),
                position: [vp.position.x, vp.position.y, vp.position.z],
                neighbors: vp.neighbors.clone(),
                views: vp.views.clone(),
                objects: vp.objects.clone(),
                direction_summaries: vp.direction_summaries.as_ref().map(|m| {
                    m.iter()
                        .map(|(k, v)| (format_millideg(*k), v.clone()))
                        .collect()
                }),
            })
            .collect();
        EnvironmentFile {
            scan_id: env.scan_id.clone(),
            granularity: env.granularity.clone(),
            viewpoints,
        }
    }
}

fn format_millideg(key: i64) -> String {
    if key % 1000 == 0 {
        format!("{}", key / 1000)
    } else {
        format!("{}", key as f64 / 1000.0)
    }
}

#[derive(Deserialize)]
struct EpisodeFileRecord {
    path_id: i64,
    scan: String,
    path: Vec<String>,
    heading: f64,
    #[serde(default)]
    heading_unit: HeadingUnit,
    instructions: Vec<String>,
}

#[derive(Deserialize, Default, Clone, Copy, PartialEq, Debug)]
#[serde(rename_all = "lowercase")]
enum HeadingUnit {
    /// R2R episode files store headings in radians.
    #[default]
    Rad,
    Deg,
}

// --- loading and validation ----------------------------------------------

/// Load and validate an environment file, discarding validation warnings.
pub fn load_environment(path: &Path) -> Result<Environment, EnvError> {
    load_environment_with_warnings(path).map(|(env, _)| env)
}

/// Load and validate an environment file. Warnings report conditions that
/// are tolerated but suspicious, currently only asymmetric edges.
pub fn load_environment_with_warnings(path: &Path) -> Result<(Environment, Vec<String>), EnvError> {
    let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_environment(&text)
}

/// Parse and validate environment JSON.
pub fn parse_environment(json: &str) -> Result<(Environment, Vec<String>), EnvError> {
    let file: EnvironmentFile = serde_json::from_str(json)?;
    let granularity = file.granularity.clone();
    granularity.validate()?;

    let mut viewpoints = BTreeMap::new();
    for record in file.viewpoints {
        if record.id.is_empty() {
            return Err(EnvError::Validation("viewpoint with empty id".into()));
        }
        let position = Position::new(record.position[0], record.position[1], record.position[2]);
        let direction_summaries = match record.direction_summaries {
            None => None,
            Some(raw) => Some(convert_summaries(&record.id, raw, &granularity)?),
        };
        let vp = Viewpoint {
            id: record.id.clone(),
            position,
            neighbors: record.neighbors,
            views: record.views,
            objects: normalize_objects(record.objects),
            direction_summaries,
        };
        if viewpoints.insert(record.id.clone(), vp).is_some() {
            return Err(EnvError::Validation(format!(
                "duplicate viewpoint id `{}`",
                record.id
            )));
        }
    }

    let env = Environment {
        scan_id: file.scan_id,
        viewpoints,
        granularity,
    };
    let warnings = validate_environment(&env)?;
    Ok((env, warnings))
}

fn normalize_objects(objects: Vec<ObjectAnnotation>) -> Vec<ObjectAnnotation> {
    objects
        .into_iter()
        .map(|mut o| {
            o.heading_deg = normalize_deg(o.heading_deg);
            o
        })
        .collect()
}

fn convert_summaries(
    vp_id: &str,
    raw: BTreeMap<String, String>,
    granularity: &GranularityConfig,
) -> Result<BTreeMap<i64, String>, EnvError> {
    let grid: BTreeSet<i64> = granularity
        .grid_headings()
        .iter()
        .map(|&h| heading_key(h))
        .collect();
    let mut out = BTreeMap::new();
    for (key, text) in raw {
        let heading: f64 = key.parse().map_err(|_| {
            EnvError::Validation(format!(
                "viewpoint `{vp_id}`: direction summary key `{key}` is not a number"
            ))
        })?;
        let hk = heading_key(heading);
        if !grid.contains(&hk) {
            return Err(EnvError::Validation(format!(
                "viewpoint `{vp_id}`: direction summary heading {heading} is not on the heading grid"
            )));
        }
        if text.trim().is_empty() {
            return Err(EnvError::Validation(format!(
                "viewpoint `{vp_id}`: direction summary for heading {heading} is empty"
            )));
        }
        out.insert(hk, text);
    }
    Ok(out)
}

/// Check every environment invariant. Returns warnings for tolerated
/// irregularities (asymmetric edges); hard violations are errors.
pub fn validate_environment(env: &Environment) -> Result<Vec<String>, EnvError> {
    env.granularity.validate()?;
    if env.viewpoints.is_empty() {
        return Err(EnvError::Validation(
            "environment has no viewpoints".into(),
        ));
    }

    let expected_views = env.granularity.views_per_viewpoint();
    let grid_pairs: BTreeSet<(i64, i64)> = env
        .granularity
        .grid_headings()
        .iter()
        .flat_map(|&h| {
            env.granularity
                .elevations
                .iter()
                .map(move |&e| (heading_key(h), elevation_key(e)))
        })
        .collect();

    let mut warnings = Vec::new();
    for vp in env.viewpoints.values() {
        if !vp.position.is_finite() {
            return Err(EnvError::Validation(format!(
                "viewpoint `{}` has a non-finite position",
                vp.id
            )));
        }

        let mut seen_neighbors = BTreeSet::new();
        for n in &vp.neighbors {
            if n == &vp.id {
                return Err(EnvError::Validation(format!(
                    "viewpoint `{}` lists itself as a neighbor",
                    vp.id
                )));
            }
            if !env.viewpoints.contains_key(n) {
                return Err(EnvError::Validation(format!(
                    "viewpoint `{}` lists neighbor `{n}` which does not exist",
                    vp.id
                )));
            }
            if !seen_neighbors.insert(n.clone()) {
                return Err(EnvError::Validation(format!(
                    "viewpoint `{}` lists neighbor `{n}` twice",
                    vp.id
                )));
            }
            // Connectivity is effectively undirected in practice; tolerate
            // directed input but flag it.
            if !env.viewpoints[n].neighbors.iter().any(|b| b == &vp.id) {
                warnings.push(format!(
                    "asymmetric edge: `{}` -> `{n}` has no reverse edge",
                    vp.id
                ));
            }
        }

        if vp.views.len() != expected_views {
            return Err(EnvError::Validation(format!(
                "viewpoint `{}` has {} views, expected {} ({} headings x {} elevations)",
                vp.id,
                vp.views.len(),
                expected_views,
                env.granularity.headings,
                env.granularity.elevations.len()
            )));
        }
        let mut seen_views = BTreeSet::new();
        for view in &vp.views {
            let pair = (heading_key(view.heading_deg), elevation_key(view.elevation_deg));
            if !grid_pairs.contains(&pair) {
                return Err(EnvError::Validation(format!(
                    "viewpoint `{}` has a view at heading {} / elevation {} which is off the grid",
                    vp.id, view.heading_deg, view.elevation_deg
                )));
            }
            if !seen_views.insert(pair) {
                return Err(EnvError::Validation(format!(
                    "viewpoint `{}` has duplicate views at heading {} / elevation {}",
                    vp.id, view.heading_deg, view.elevation_deg
                )));
            }
            if view.caption.trim().is_empty() {
                return Err(EnvError::Validation(format!(
                    "viewpoint `{}` has an empty caption at heading {} / elevation {}",
                    vp.id, view.heading_deg, view.elevation_deg
                )));
            }
        }
        // seen_views covers every grid pair exactly once: counts match and
        // every pair is on the grid.

        for obj in &vp.objects {
            if !(obj.depth_m.is_finite() && obj.depth_m > 0.0) {
                return Err(EnvError::Validation(format!(
                    "viewpoint `{}`: object `{}` has invalid depth {}",
                    vp.id, obj.class_name, obj.depth_m
                )));
            }
            if !((-90.0..=90.0).contains(&obj.elevation_deg)) {
                return Err(EnvError::Validation(format!(
                    "viewpoint `{}`: object `{}` has elevation {} outside [-90, 90]",
                    vp.id, obj.class_name, obj.elevation_deg
                )));
            }
        }
    }
    Ok(warnings)
}

/// Load episodes for `env`, one [`Episode`] per (trajectory, instruction)
/// pair. Headings are converted to degrees when the file stores radians
/// (the default, for R2R compatibility).
pub fn load_episodes(path: &Path, env: &Environment) -> Result<Vec<Episode>, EnvError> {
    let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_episodes(&text, env)
}

/// Parse and validate episode JSON against `env`.
pub fn parse_episodes(json: &str, env: &Environment) -> Result<Vec<Episode>, EnvError> {
    let records: Vec<EpisodeFileRecord> = serde_json::from_str(json)?;
    let mut episodes = Vec::new();
    for record in records {
        if record.scan != env.scan_id {
            return Err(EnvError::Validation(format!(
                "episode {} references scan `{}` but the environment is `{}`",
                record.path_id, record.scan, env.scan_id
            )));
        }
        if record.path.is_empty() {
            return Err(EnvError::Validation(format!(
                "episode {} has an empty path",
                record.path_id
            )));
        }
        for node in &record.path {
            if !env.contains(node) {
                return Err(EnvError::Validation(format!(
                    "episode {}: path node `{node}` does not exist in scan `{}`",
                    record.path_id, env.scan_id
                )));
            }
        }
        for pair in record.path.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if !env.viewpoints[a].neighbors.iter().any(|n| n == b) {
                return Err(EnvError::Validation(format!(
                    "episode {}: consecutive path nodes `{a}` and `{b}` are not graph neighbors",
                    record.path_id
                )));
            }
        }
        let heading_deg = match record.heading_unit {
            HeadingUnit::Rad => normalize_deg(record.heading.to_degrees()),
            HeadingUnit::Deg => normalize_deg(record.heading),
        };
        for (index, instruction) in record.instructions.iter().enumerate() {
            episodes.push(Episode {
                path_id: record.path_id,
                scan_id: record.scan.clone(),
                instruction: instruction.clone(),
                instruction_index: index,
                gt_path: record.path.clone(),
                start_heading_deg: heading_deg,
            });
        }
    }
    Ok(episodes)
}

// --- synthetic worlds -----------------------------------------------------

const ROOM_ADJECTIVES: [&str; 8] = [
    "bright",
    "narrow",
    "spacious",
    "tiled",
    "carpeted",
    "wood-paneled",
    "dim",
    "sunlit",
];

const OBJECT_CLASSES: [&str; 8] = [
    "chair", "table", "plant", "lamp", "sofa", "shelf", "mirror", "rug",
];

/// Deterministic 4-connected grid world at the default 8x3 granularity.
/// Identical arguments produce byte-identical environments.
///
/// Panics if `rows` or `cols` is zero or `spacing_m` is not positive.
pub fn generate_synthetic_grid(rows: usize, cols: usize, spacing_m: f64, seed: u64) -> Environment {
    generate_synthetic_grid_with(rows, cols, spacing_m, seed, GranularityConfig::fov45x24())
}

/// [`generate_synthetic_grid`] with an explicit view granularity.
pub fn generate_synthetic_grid_with(
    rows: usize,
    cols: usize,
    spacing_m: f64,
    seed: u64,
    granularity: GranularityConfig,
) -> Environment {
    assert!(rows >= 1 && cols >= 1, "grid must be at least 1x1");
    assert!(
        spacing_m.is_finite() && spacing_m > 0.0,
        "spacing must be positive"
    );
    granularity.validate().expect("preset granularity is valid");

    let cell_adjective = |r: usize, c: usize| -> &'static str {
        let mut rng = cell_rng(seed, r, c, 0);
        ROOM_ADJECTIVES[rng.random_range(0..ROOM_ADJECTIVES.len())]
    };
    let cell_object = |r: usize, c: usize| -> &'static str {
        let mut rng = cell_rng(seed, r, c, 1);
        OBJECT_CLASSES[rng.random_range(0..OBJECT_CLASSES.len())]
    };

    let mut viewpoints = BTreeMap::new();
    for r in 0..rows {
        for c in 0..cols {
            let id = format!("vp_{r}_{c}");
            let position = Position::new(c as f64 * spacing_m, r as f64 * spacing_m, 0.0);
            let caption = format!("a {} room with landmark_{r}_{c}", cell_adjective(r, c));

            // Neighbors clockwise from north.
            let mut neighbors = Vec::new();
            let mut neighbor_cells = Vec::new();
            if r + 1 < rows {
                neighbor_cells.push((r + 1, c));
            }
            if c + 1 < cols {
                neighbor_cells.push((r, c + 1));
            }
            if r > 0 {
                neighbor_cells.push((r - 1, c));
            }
            if c > 0 {
                neighbor_cells.push((r, c - 1));
            }
            for &(nr, nc) in &neighbor_cells {
                neighbors.push(format!("vp_{nr}_{nc}"));
            }

            let views: Vec<ViewAnnotation> = granularity
                .grid_headings()
                .iter()
                .flat_map(|&h| {
                    let caption = caption.clone();
                    granularity.elevations.iter().map(move |&e| ViewAnnotation {
                        heading_deg: h,
                        elevation_deg: e,
                        caption: caption.clone(),
                    })
                })
                .collect();

            let objects: Vec<ObjectAnnotation> = neighbor_cells
                .iter()
                .map(|&(nr, nc)| {
                    let bearing = grid_bearing(r, c, nr, nc);
                    ObjectAnnotation {
                        class_name: format!("{}_{nr}_{nc}", cell_object(nr, nc)),
                        heading_deg: bearing,
                        elevation_deg: 0.0,
                        depth_m: spacing_m,
                    }
                })
                .collect();

            let mut summaries = BTreeMap::new();
            for &h in &granularity.grid_headings() {
                let corridor = neighbor_cells
                    .iter()
                    .find(|&&(nr, nc)| heading_key(grid_bearing(r, c, nr, nc)) == heading_key(h));
                let text = match corridor {
                    Some(&(nr, nc)) => format!("a corridor leading to landmark_{nr}_{nc}"),
                    None => format!(
                        "a wall of a {} room with landmark_{r}_{c}",
                        cell_adjective(r, c)
                    ),
                };
                summaries.insert(heading_key(h), text);
            }

            viewpoints.insert(
                id.clone(),
                Viewpoint {
                    id,
                    position,
                    neighbors,
                    views,
                    objects,
                    direction_summaries: Some(summaries),
                },
            );
        }
    }

    Environment {
        scan_id: format!("synthetic-{rows}x{cols}-seed{seed}"),
        viewpoints,
        granularity,
    }
}

fn cell_rng(seed: u64, r: usize, c: usize, stream: u8) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(r as u64).to_le_bytes());
    bytes[16..24].copy_from_slice(&(c as u64).to_le_bytes());
    bytes[24] = stream;
    ChaCha8Rng::from_seed(bytes)
}

/// Bearing between grid cells: rows grow north, columns grow east.
fn grid_bearing(r: usize, c: usize, nr: usize, nc: usize) -> f64 {
    if nr > r {
        0.0
    } else if nc > c {
        90.0
    } else if nr < r {
        180.0
    } else {
        270.0
    }
}
