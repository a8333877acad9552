//! Angular and metric computation: bearings, relative angles, direction
//! sectors, distances, and geodesic shortest paths over the viewpoint graph.
//!
//! All operations are pure functions over immutable inputs and safe for
//! unrestricted parallel use.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use thiserror::Error;

use crate::env::{Environment, Position};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("positions coincide in the x-y plane; the bearing is undefined")]
    DegenerateDirection,
    #[error("unknown viewpoint `{0}`")]
    UnknownViewpoint(String),
}

/// The eight egocentric sector names, clockwise starting at front.
pub const SECTOR_LABELS: [&str; 8] = [
    "front",
    "front right",
    "right",
    "rear right",
    "rear",
    "rear left",
    "left",
    "front left",
];

/// One of the eight 45°-wide egocentric sectors, clockwise from front.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DirectionSector {
    index: u8,
}

impl DirectionSector {
    pub fn new(index: u8) -> Self {
        assert!(index < 8, "sector index out of range");
        Self { index }
    }

    /// Clockwise offset from front in 45° steps.
    pub fn index(&self) -> usize {
        self.index as usize
    }

    pub fn label(&self) -> &'static str {
        SECTOR_LABELS[self.index as usize]
    }
}

/// Degrees normalized to [0, 360).
pub fn normalize_deg(deg: f64) -> f64 {
    crate::env::normalize_deg(deg)
}

/// Clockwise-from-north bearing of the x-y projection of `to - from`.
///
/// North (+y) is 0°, east (+x) is 90°. Fails when the two positions
/// coincide in the x-y plane.
pub fn bearing_between(from: &Position, to: &Position) -> Result<f64, GeometryError> {
    let dx = to.x - from.x;
    let dy = to.y - from.y;
    if dx == 0.0 && dy == 0.0 {
        return Err(GeometryError::DegenerateDirection);
    }
    Ok(normalize_deg(dx.atan2(dy).to_degrees()))
}

/// Clockwise angle from the agent's heading to a target bearing, in
/// [0, 360). Zero means directly ahead.
pub fn relative_angle(agent_heading_deg: f64, target_bearing_deg: f64) -> f64 {
    normalize_deg(target_bearing_deg - agent_heading_deg)
}

/// The sector a relative angle falls in. Sectors are 45° wide and centered
/// on multiples of 45°; ties at the 22.5° boundaries round toward the
/// clockwise (higher-index) sector.
pub fn sector_of(relative_deg: f64) -> DirectionSector {
    DirectionSector::new(sector_index(relative_deg, 8) as u8)
}

/// [`sector_of`] generalized to an arbitrary sector count.
pub fn sector_index(relative_deg: f64, sectors: usize) -> usize {
    assert!(sectors > 0, "sector count must be positive");
    let step = 360.0 / sectors as f64;
    (normalize_deg(relative_deg) / step).round() as usize % sectors
}

/// Human label for sector `index` out of `sectors`. The eight-sector case
/// uses the classic names; other granularities fall back to clockwise
/// offsets in degrees.
pub fn sector_label(index: usize, sectors: usize) -> String {
    assert!(index < sectors, "sector index out of range");
    if sectors == 8 {
        return SECTOR_LABELS[index].to_string();
    }
    if index == 0 {
        return "front".to_string();
    }
    let step = 360.0 / sectors as f64;
    let deg = step * index as f64;
    if (deg - deg.round()).abs() < 1e-9 {
        format!("{:.0} degrees clockwise", deg)
    } else {
        format!("{:.1} degrees clockwise", deg)
    }
}

/// Standard 3D Euclidean distance.
pub fn euclidean_distance(a: &Position, b: &Position) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Single-source shortest distances over the graph, Euclidean edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicTable {
    source: String,
    distances: BTreeMap<String, f64>,
}

impl GeodesicTable {
    pub fn source(&self) -> &str {
        &self.source
    }

    /// Distance from (or to, for reverse tables) the source. `None` marks
    /// unreachable viewpoints.
    pub fn distance(&self, id: &str) -> Option<f64> {
        self.distances.get(id).copied()
    }

    pub fn reachable(&self) -> impl Iterator<Item = (&str, f64)> {
        self.distances.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

struct HeapEntry<'a> {
    dist: f64,
    id: &'a str,
}

impl PartialEq for HeapEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry<'_> {}
impl PartialOrd for HeapEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed on distance so BinaryHeap pops the nearest node first;
        // id breaks ties to keep the ordering total.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.id.cmp(self.id))
    }
}

/// Dijkstra from `source` following directed edges as stored.
pub fn shortest_paths(env: &Environment, source: &str) -> Result<GeodesicTable, GeometryError> {
    dijkstra(env, source, Direction::Forward)
}

/// Dijkstra over reversed edges: distances from every viewpoint *to*
/// `target`. On symmetric graphs this equals [`shortest_paths`].
pub fn shortest_paths_to(env: &Environment, target: &str) -> Result<GeodesicTable, GeometryError> {
    dijkstra(env, target, Direction::Reverse)
}

enum Direction {
    Forward,
    Reverse,
}

fn dijkstra(
    env: &Environment,
    source: &str,
    direction: Direction,
) -> Result<GeodesicTable, GeometryError> {
    if !env.contains(source) {
        return Err(GeometryError::UnknownViewpoint(source.to_string()));
    }

    // Adjacency in the requested direction.
    let mut adjacency: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for vp in env.viewpoints.values() {
        for n in &vp.neighbors {
            match direction {
                Direction::Forward => adjacency
                    .entry(vp.id.as_str())
                    .or_default()
                    .push(n.as_str()),
                Direction::Reverse => adjacency
                    .entry(n.as_str())
                    .or_default()
                    .push(vp.id.as_str()),
            }
        }
    }

    let mut dist: BTreeMap<&str, f64> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    dist.insert(source, 0.0);
    heap.push(HeapEntry {
        dist: 0.0,
        id: source,
    });

    while let Some(HeapEntry { dist: d, id }) = heap.pop() {
        if d > dist[id] {
            continue; // stale queue entry
        }
        let here = &env.viewpoints[id].position;
        for &next in adjacency.get(id).map(Vec::as_slice).unwrap_or(&[]) {
            let weight = euclidean_distance(here, &env.viewpoints[next].position);
            let candidate = d + weight;
            if dist.get(next).is_none_or(|&cur| candidate < cur) {
                dist.insert(next, candidate);
                heap.push(HeapEntry {
                    dist: candidate,
                    id: next,
                });
            }
        }
    }

    Ok(GeodesicTable {
        source: source.to_string(),
        distances: dist.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    })
}

/// Length of the polyline through `path`: the sum of Euclidean distances
/// between consecutive positions. Adjacency is not required; this measures
/// what was actually traversed. A single-node path has length zero.
pub fn path_length(env: &Environment, path: &[String]) -> Result<f64, GeometryError> {
    let mut total = 0.0;
    for pair in path.windows(2) {
        let a = env
            .viewpoint(&pair[0])
            .ok_or_else(|| GeometryError::UnknownViewpoint(pair[0].clone()))?;
        let b = env
            .viewpoint(&pair[1])
            .ok_or_else(|| GeometryError::UnknownViewpoint(pair[1].clone()))?;
        total += euclidean_distance(&a.position, &b.position);
    }
    if let [only] = path {
        if !env.contains(only) {
            return Err(GeometryError::UnknownViewpoint(only.clone()));
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_synthetic_grid, GranularityConfig, Viewpoint};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn pos(x: f64, y: f64, z: f64) -> Position {
        Position::new(x, y, z)
    }

    /// Bare-bones environment from positions and undirected edges. Views
    /// are irrelevant to geometry and left empty.
    fn graph_env(nodes: &[(&str, f64, f64, f64)], edges: &[(&str, &str)]) -> Environment {
        let mut viewpoints = BTreeMap::new();
        for &(id, x, y, z) in nodes {
            viewpoints.insert(
                id.to_string(),
                Viewpoint {
                    id: id.to_string(),
                    position: pos(x, y, z),
                    neighbors: Vec::new(),
                    views: Vec::new(),
                    objects: Vec::new(),
                    direction_summaries: None,
                },
            );
        }
        for &(a, b) in edges {
            viewpoints
                .get_mut(a)
                .unwrap()
                .neighbors
                .push(b.to_string());
            viewpoints
                .get_mut(b)
                .unwrap()
                .neighbors
                .push(a.to_string());
        }
        Environment {
            scan_id: "graph-test".into(),
            viewpoints,
            granularity: GranularityConfig::fov45x24(),
        }
    }

    #[test]
    fn bearing_cardinal_directions() {
        let o = pos(0.0, 0.0, 0.0);
        assert_eq!(bearing_between(&o, &pos(0.0, 1.0, 0.0)).unwrap(), 0.0);
        assert_eq!(bearing_between(&o, &pos(1.0, 0.0, 0.0)).unwrap(), 90.0);
        let diag = bearing_between(&o, &pos(-1.0, -1.0, 0.0)).unwrap();
        assert!((diag - 225.0).abs() < 1e-12);
    }

    #[test]
    fn bearing_degenerate_in_plane() {
        let a = pos(1.0, 2.0, 0.0);
        let b = pos(1.0, 2.0, 5.0); // stacked vertically
        assert_eq!(
            bearing_between(&a, &b),
            Err(GeometryError::DegenerateDirection)
        );
    }

    #[test]
    fn relative_angle_cases() {
        assert_eq!(relative_angle(0.0, 90.0), 90.0);
        assert_eq!(relative_angle(350.0, 10.0), 20.0);
        assert_eq!(relative_angle(90.0, 45.0), 315.0);
    }

    #[test]
    fn sector_centers_and_boundaries() {
        assert_eq!(sector_of(0.0).label(), "front");
        assert_eq!(sector_of(30.0).label(), "front right");
        assert_eq!(sector_of(30.0).index(), 1);
        // 337.5 is the boundary between front left and front: ties round
        // clockwise, so round(337.5/45) = 8 which wraps to front.
        assert_eq!(sector_of(337.5).label(), "front");
        assert_eq!(sector_of(22.5).label(), "front right");
        assert_eq!(sector_of(180.0).label(), "rear");
    }

    #[test]
    fn sector_labels_for_other_granularities() {
        assert_eq!(sector_label(0, 12), "front");
        assert_eq!(sector_label(3, 12), "90 degrees clockwise");
        assert_eq!(sector_label(1, 16), "22.5 degrees clockwise");
        assert_eq!(sector_label(2, 8), "right");
    }

    #[test]
    fn euclidean_distance_cases() {
        let a = pos(0.0, 0.0, 0.0);
        assert_eq!(euclidean_distance(&a, &a), 0.0);
        assert_eq!(euclidean_distance(&a, &pos(3.0, 4.0, 0.0)), 5.0);
        let d = euclidean_distance(&pos(1.0, 1.0, 1.0), &pos(2.0, 2.0, 2.0));
        assert!((d - 3.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn shortest_path_on_a_line() {
        let env = graph_env(
            &[("A", 0.0, 0.0, 0.0), ("B", 0.0, 2.0, 0.0), ("C", 0.0, 5.0, 0.0)],
            &[("A", "B"), ("B", "C")],
        );
        let table = shortest_paths(&env, "A").unwrap();
        assert_eq!(table.distance("A"), Some(0.0));
        assert_eq!(table.distance("C"), Some(5.0));
    }

    #[test]
    fn shortest_path_across_grid() {
        let env = generate_synthetic_grid(3, 3, 2.0, 0);
        let table = shortest_paths(&env, "vp_0_0").unwrap();
        assert!((table.distance("vp_2_2").unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn disconnected_components_are_unreachable() {
        let env = graph_env(
            &[
                ("A", 0.0, 0.0, 0.0),
                ("B", 0.0, 1.0, 0.0),
                ("X", 9.0, 9.0, 0.0),
            ],
            &[("A", "B")],
        );
        let table = shortest_paths(&env, "A").unwrap();
        assert_eq!(table.distance("X"), None);
        assert_eq!(
            shortest_paths(&env, "missing"),
            Err(GeometryError::UnknownViewpoint("missing".into()))
        );
    }

    #[test]
    fn path_length_cases() {
        let env = graph_env(
            &[("A", 0.0, 0.0, 0.0), ("B", 0.0, 2.0, 0.0)],
            &[("A", "B")],
        );
        assert_eq!(path_length(&env, &["A".to_string()]).unwrap(), 0.0);
        let out_and_back = ["A", "B", "A"].map(String::from);
        assert_eq!(path_length(&env, &out_and_back).unwrap(), 4.0);

        let line = generate_synthetic_grid(4, 1, 2.0, 0);
        let ids: Vec<String> = (0..4).map(|r| format!("vp_{r}_0")).collect();
        assert_eq!(path_length(&line, &ids).unwrap(), 6.0);
        assert!(matches!(
            path_length(&line, &["vp_0_0".to_string(), "nope".to_string()]),
            Err(GeometryError::UnknownViewpoint(_))
        ));
    }

    /// Minimum over every simple path, by exhaustive DFS. Only usable on
    /// tiny graphs; serves as the independent reference for Dijkstra.
    fn brute_force_min_distance(env: &Environment, from: &str, to: &str) -> Option<f64> {
        fn dfs(
            env: &Environment,
            here: &str,
            to: &str,
            so_far: f64,
            visited: &mut BTreeSet<String>,
            best: &mut Option<f64>,
        ) {
            if here == to {
                if best.is_none_or(|b| so_far < b) {
                    *best = Some(so_far);
                }
                return;
            }
            let vp = &env.viewpoints[here];
            for n in vp.neighbors.clone() {
                if visited.insert(n.clone()) {
                    let w = euclidean_distance(&vp.position, &env.viewpoints[&n].position);
                    dfs(env, &n, to, so_far + w, visited, best);
                    visited.remove(&n);
                }
            }
        }
        let mut best = None;
        let mut visited = BTreeSet::from([from.to_string()]);
        dfs(env, from, to, 0.0, &mut visited, &mut best);
        best
    }

    fn arb_graph() -> impl Strategy<Value = Environment> {
        (2usize..=8).prop_flat_map(|n| {
            let positions = proptest::collection::vec((-10.0..10.0f64, -10.0..10.0f64), n);
            let edges = proptest::collection::vec((0..n, 0..n), 0..=(n * 2));
            (positions, edges).prop_map(|(positions, edges)| {
                let nodes: Vec<(String, f64, f64)> = positions
                    .into_iter()
                    .enumerate()
                    .map(|(i, (x, y))| (format!("n{i}"), x, y))
                    .collect();
                let mut viewpoints = BTreeMap::new();
                for (id, x, y) in &nodes {
                    viewpoints.insert(
                        id.clone(),
                        Viewpoint {
                            id: id.clone(),
                            position: pos(*x, *y, 0.0),
                            neighbors: Vec::new(),
                            views: Vec::new(),
                            objects: Vec::new(),
                            direction_summaries: None,
                        },
                    );
                }
                for (a, b) in edges {
                    if a == b {
                        continue;
                    }
                    let (a, b) = (format!("n{a}"), format!("n{b}"));
                    if !viewpoints[&a].neighbors.contains(&b) {
                        viewpoints.get_mut(&a).unwrap().neighbors.push(b.clone());
                        viewpoints.get_mut(&b).unwrap().neighbors.push(a);
                    }
                }
                Environment {
                    scan_id: "prop".into(),
                    viewpoints,
                    granularity: GranularityConfig::fov45x24(),
                }
            })
        })
    }

    proptest! {
        #[test]
        fn relative_angle_is_rotation_equivariant(h in -720.0..720.0f64, b in -720.0..720.0f64, delta in -720.0..720.0f64) {
            let base = relative_angle(h, b);
            let shifted = relative_angle(h + delta, b + delta);
            let diff = (base - shifted).abs();
            prop_assert!(diff < 1e-9 || (diff - 360.0).abs() < 1e-9);
        }

        #[test]
        fn sectors_partition_the_circle(r in 0.0..360.0f64, k in -3i32..=3) {
            let base = sector_of(r);
            let wrapped = sector_of(normalize_deg(r + 360.0 * k as f64));
            prop_assert_eq!(base, wrapped);
            prop_assert!(base.index() < 8);
        }

        #[test]
        fn dijkstra_matches_brute_force(env in arb_graph()) {
            let ids: Vec<String> = env.viewpoints.keys().cloned().collect();
            let source = &ids[0];
            let table = shortest_paths(&env, source).unwrap();
            for id in &ids {
                let expected = brute_force_min_distance(&env, source, id);
                match (table.distance(id), expected) {
                    (Some(got), Some(want)) => prop_assert!((got - want).abs() < 1e-9),
                    (None, None) => {}
                    (got, want) => prop_assert!(false, "mismatch at {id}: {got:?} vs {want:?}"),
                }
            }
        }

        #[test]
        fn symmetric_graphs_have_symmetric_distances(env in arb_graph()) {
            let ids: Vec<String> = env.viewpoints.keys().cloned().collect();
            let (u, v) = (&ids[0], &ids[ids.len() - 1]);
            let from_u = shortest_paths(&env, u).unwrap().distance(v);
            let from_v = shortest_paths(&env, v).unwrap().distance(u);
            match (from_u, from_v) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (None, None) => {}
                other => prop_assert!(false, "asymmetry: {other:?}"),
            }
        }
    }

    #[test]
    fn reverse_table_matches_forward_on_symmetric_graphs() {
        let env = generate_synthetic_grid(3, 3, 2.0, 0);
        let forward = shortest_paths(&env, "vp_1_1").unwrap();
        let reverse = shortest_paths_to(&env, "vp_1_1").unwrap();
        for (id, d) in forward.reachable() {
            assert!((reverse.distance(id).unwrap() - d).abs() < 1e-12);
        }
    }

    #[test]
    fn gt_path_is_never_shorter_than_the_geodesic() {
        let env = generate_synthetic_grid(3, 3, 2.0, 0);
        let path: Vec<String> = ["vp_0_0", "vp_0_1", "vp_1_1", "vp_1_2", "vp_2_2"]
            .map(String::from)
            .to_vec();
        let table = shortest_paths(&env, "vp_0_0").unwrap();
        assert!(path_length(&env, &path).unwrap() >= table.distance("vp_2_2").unwrap() - 1e-12);
    }
}
