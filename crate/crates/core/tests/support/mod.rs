//! Shared helpers for integration tests: an exhaustive all-simple-paths
//! distance oracle, independent metric formulas, and seeded random worlds.
//! Everything here deliberately avoids the library's own shortest-path and
//! scoring code so it can serve as a reference.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use navgraph::env::{Environment, Episode, GranularityConfig, Position, Viewpoint};

pub fn euclid(a: &Position, b: &Position) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Minimum-length simple path distances from `source` to every reachable
/// node, by exhaustive DFS enumeration of all simple paths. No pruning, no
/// priority queue: this shares nothing with Dijkstra.
pub fn brute_force_distances(env: &Environment, source: &str) -> BTreeMap<String, f64> {
    fn dfs(
        env: &Environment,
        here: &str,
        so_far: f64,
        visited: &mut BTreeSet<String>,
        best: &mut BTreeMap<String, f64>,
    ) {
        let vp = &env.viewpoints[here];
        for next in vp.neighbors.clone() {
            if visited.contains(&next) {
                continue;
            }
            let weight = euclid(&vp.position, &env.viewpoints[&next].position);
            let total = so_far + weight;
            if best.get(&next).is_none_or(|&b| total < b) {
                best.insert(next.clone(), total);
            }
            visited.insert(next.clone());
            dfs(env, &next, total, visited, best);
            visited.remove(&next);
        }
    }
    let mut best = BTreeMap::from([(source.to_string(), 0.0)]);
    let mut visited = BTreeSet::from([source.to_string()]);
    dfs(env, source, 0.0, &mut visited, &mut best);
    best
}

/// The five metrics computed from first principles with the brute-force
/// distance oracle. Returns `None` when the goal is unreachable from the
/// start or the final node.
pub struct ReferenceMetrics {
    pub tl: f64,
    pub ne: f64,
    pub sr: u8,
    pub osr: u8,
    pub spl: f64,
}

pub fn reference_metrics(
    env: &Environment,
    start: &str,
    goal: &str,
    trajectory: &[String],
    threshold: f64,
) -> Option<ReferenceMetrics> {
    let mut tl = 0.0;
    for pair in trajectory.windows(2) {
        tl += euclid(
            &env.viewpoints[&pair[0]].position,
            &env.viewpoints[&pair[1]].position,
        );
    }
    let final_node = trajectory.last().unwrap();
    let ne = *brute_force_distances(env, final_node).get(goal)?;
    let sr = u8::from(ne < threshold);
    let mut osr = 0;
    for visited in trajectory {
        if let Some(&d) = brute_force_distances(env, visited).get(goal) {
            if d < threshold {
                osr = 1;
                break;
            }
        }
    }
    let optimal = *brute_force_distances(env, start).get(goal)?;
    let spl = if sr == 0 {
        0.0
    } else if optimal.max(tl) == 0.0 {
        1.0
    } else {
        optimal / tl.max(optimal)
    };
    Some(ReferenceMetrics { tl, ne, sr, osr, spl })
}

/// A random symmetric graph environment with 2..=8 nodes. When `connected`
/// is set, a random spanning tree guarantees one component; otherwise only
/// the random extra edges exist. Views are irrelevant to geometry and
/// metric tests and stay empty.
pub fn random_graph_env(rng: &mut ChaCha8Rng, connected: bool) -> Environment {
    let n = rng.random_range(2..=8usize);
    let mut viewpoints = BTreeMap::new();
    let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    for id in &ids {
        viewpoints.insert(
            id.clone(),
            Viewpoint {
                id: id.clone(),
                position: Position::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-1.0..1.0),
                ),
                neighbors: Vec::new(),
                views: Vec::new(),
                objects: Vec::new(),
                direction_summaries: None,
            },
        );
    }
    let add_edge = |viewpoints: &mut BTreeMap<String, Viewpoint>, a: usize, b: usize| {
        if a == b {
            return;
        }
        let (a, b) = (ids[a].clone(), ids[b].clone());
        if viewpoints[&a].neighbors.contains(&b) {
            return;
        }
        viewpoints.get_mut(&a).unwrap().neighbors.push(b.clone());
        viewpoints.get_mut(&b).unwrap().neighbors.push(a);
    };
    if connected {
        for i in 1..n {
            let parent = rng.random_range(0..i);
            add_edge(&mut viewpoints, i, parent);
        }
    }
    let extras = rng.random_range(0..=n);
    for _ in 0..extras {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        add_edge(&mut viewpoints, a, b);
    }
    Environment {
        scan_id: "random".into(),
        viewpoints,
        granularity: GranularityConfig::fov45x24(),
    }
}

/// A random walk along graph edges starting at `start`, `edges` hops long
/// (shorter if a dead end is hit).
pub fn random_walk(env: &Environment, start: &str, edges: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut walk = vec![start.to_string()];
    let mut here = start.to_string();
    for _ in 0..edges {
        let neighbors = &env.viewpoints[&here].neighbors;
        if neighbors.is_empty() {
            break;
        }
        here = neighbors[rng.random_range(0..neighbors.len())].clone();
        walk.push(here.clone());
    }
    walk
}

/// Fewest-hops path between two nodes. On uniform-spacing grids this is
/// also the metrically shortest path.
pub fn bfs_path(env: &Environment, start: &str, goal: &str) -> Option<Vec<String>> {
    let mut parent: BTreeMap<String, String> = BTreeMap::new();
    let mut queue = VecDeque::from([start.to_string()]);
    let mut seen = BTreeSet::from([start.to_string()]);
    while let Some(here) = queue.pop_front() {
        if here == goal {
            let mut path = vec![here.clone()];
            let mut cursor = here;
            while let Some(prev) = parent.get(&cursor) {
                path.push(prev.clone());
                cursor = prev.clone();
            }
            path.reverse();
            return Some(path);
        }
        for next in &env.viewpoints[&here].neighbors {
            if seen.insert(next.clone()) {
                parent.insert(next.clone(), here.clone());
                queue.push_back(next.clone());
            }
        }
    }
    None
}

/// Build an episode over an existing environment.
pub fn episode(env: &Environment, path_id: i64, gt_path: Vec<String>, heading: f64) -> Episode {
    Episode {
        path_id,
        scan_id: env.scan_id.clone(),
        instruction: format!("follow route {path_id} to its final room and stop there"),
        instruction_index: 0,
        gt_path,
        start_heading_deg: heading,
    }
}
