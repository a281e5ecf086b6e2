//! Scene ingestion, fixed-length windowing, agent-centric local observations
//! and the hand-crafted features fed to the encoder.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// A 2-D position or displacement in meters.
pub type Point = [f64; 2];

/// Observed history length (3.2 s at 0.4 s per step).
pub const T_OBS: usize = 8;
/// Predicted horizon (4.8 s at 0.4 s per step).
pub const T_FUT: usize = 12;
/// Default neighborhood radius in meters.
pub const DEFAULT_DELTA: f64 = 4.0;
/// Floor applied to residual standard deviations.
pub const STD_FLOOR: f64 = 1e-6;
/// Below this separation the relative direction is undefined and zeroed.
pub const COINCIDENT_EPS: f64 = 1e-8;

/// Environment variable naming the root that relative manifest paths resolve against.
pub const DATA_DIR_ENV: &str = "FEPDIFF_DATA_DIR";

/// Time-indexed sequence of positions sampled every 0.4 s.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory(pub Vec<Point>);

impl Trajectory {
    pub fn new(points: Vec<Point>) -> Self {
        Trajectory(points)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.0
    }

    pub fn first(&self) -> Option<Point> {
        self.0.first().copied()
    }

    pub fn last(&self) -> Option<Point> {
        self.0.last().copied()
    }

    /// Returns a copy shifted by `offset`.
    pub fn translated(&self, offset: Point) -> Trajectory {
        Trajectory(self.0.iter().map(|p| [p[0] + offset[0], p[1] + offset[1]]).collect())
    }

    /// Row-major `[x0, y0, x1, y1, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn from_flat(values: &[f64]) -> Trajectory {
        Trajectory(values.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Record {
    pub frame: i64,
    pub agent: i64,
    pub x: f64,
    pub y: f64,
}

/// Deduplicated per-agent time-sorted table of positions.
#[derive(Clone, Debug, Default)]
pub struct SceneTable {
    records: Vec<Record>,
    dropped: usize,
}

impl SceneTable {
    /// Builds a table keeping the first record seen for each `(frame, agent)` key.
    pub fn from_records(records: impl IntoIterator<Item = Record>) -> SceneTable {
        let mut seen = HashSet::new();
        let mut kept = Vec::new();
        let mut dropped = 0;
        for r in records {
            if !(r.x.is_finite() && r.y.is_finite()) || !seen.insert((r.frame, r.agent)) {
                dropped += 1;
                continue;
            }
            kept.push(r);
        }
        kept.sort_by_key(|r| (r.agent, r.frame));
        SceneTable { records: kept, dropped }
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Lines or records discarded during ingestion (malformed or duplicate).
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Distinct frame indices in increasing order.
    pub fn frames(&self) -> Vec<i64> {
        let mut frames: Vec<i64> = self.records.iter().map(|r| r.frame).collect();
        frames.sort_unstable();
        frames.dedup();
        frames
    }

    pub fn agents(&self) -> Vec<i64> {
        let mut agents: Vec<i64> = self.records.iter().map(|r| r.agent).collect();
        agents.dedup();
        agents
    }

    /// Positions of every agent present at `frame`, ordered by agent id.
    pub fn positions_at(&self, frame: i64) -> Vec<(i64, Point)> {
        self.records
            .iter()
            .filter(|r| r.frame == frame)
            .map(|r| (r.agent, [r.x, r.y]))
            .collect()
    }

    fn by_frame(&self) -> BTreeMap<i64, BTreeMap<i64, Point>> {
        let mut map: BTreeMap<i64, BTreeMap<i64, Point>> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.frame).or_default().insert(r.agent, [r.x, r.y]);
        }
        map
    }
}

/// Reads a whitespace-separated `frame id x y [...]` scene file.
pub fn parse_scene(path: impl AsRef<Path>) -> Result<SceneTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene_str(&text, path)
}

/// Parses scene text; `origin` only labels error messages.
pub fn parse_scene_str(text: &str, origin: &Path) -> Result<SceneTable> {
    let mut records = Vec::new();
    let mut malformed = 0;
    for (idx, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 4 {
            malformed += 1;
            continue;
        }
        let number = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| Error::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                msg: format!("field {} (`{}`) is not numeric", i + 1, fields[i]),
            })
        };
        let integral = |i: usize| -> Result<i64> {
            let v = number(i)?;
            if v.fract() != 0.0 || !v.is_finite() {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: idx + 1,
                    msg: format!("field {} (`{}`) is not an integer", i + 1, fields[i]),
                });
            }
            Ok(v as i64)
        };
        records.push(Record {
            frame: integral(0)?,
            agent: integral(1)?,
            x: number(2)?,
            y: number(3)?,
        });
    }
    let mut table = SceneTable::from_records(records);
    table.dropped += malformed;
    Ok(table)
}

/// Writes a table in the same text format [`parse_scene`] reads.
pub fn write_scene(table: &SceneTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut rows: Vec<&Record> = table.records.iter().collect();
    rows.sort_by_key(|r| (r.frame, r.agent));
    let mut out = String::with_capacity(rows.len() * 32);
    for r in rows {
        out.push_str(&format!("{}\t{}\t{:.4}\t{:.4}\n", r.frame, r.agent, r.x, r.y));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One target agent's observation/prediction window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub target_id: i64,
    /// Frame index of the current step (t = 0).
    pub frame: i64,
    pub history: Trajectory,
    pub future: Trajectory,
    /// Histories of every other agent present at t = 0, back-filled when ragged.
    pub neighbor_histories: BTreeMap<i64, Trajectory>,
}

impl Sample {
    /// Position at t = 0.
    pub fn current(&self) -> Point {
        self.history.last().expect("non-empty history")
    }

    pub fn endpoint(&self) -> Point {
        self.future.last().expect("non-empty future")
    }
}

/// Slides a `t_obs + t_fut` window (stride one frame) over the scene.
///
/// Consecutive frames are consecutive entries of the table's distinct frame
/// list, so raw files annotated every tenth video frame window correctly.
pub fn window_scene(table: &SceneTable, t_obs: usize, t_fut: usize) -> Result<Vec<Sample>> {
    ensure!(t_obs >= 2, "t_obs must be at least 2, got {t_obs}");
    let frames = table.frames();
    let span = t_obs + t_fut;
    if frames.len() < span {
        return Ok(Vec::new());
    }
    let by_frame = table.by_frame();
    let column: Vec<&BTreeMap<i64, Point>> = frames.iter().map(|f| &by_frame[f]).collect();

    let mut samples = Vec::new();
    for start in 0..=frames.len() - span {
        let now = start + t_obs - 1;
        for (&agent, _) in column[now].iter() {
            if !(start..start + span).all(|i| column[i].contains_key(&agent)) {
                continue;
            }
            let track = |range: std::ops::Range<usize>| Trajectory(range.map(|i| column[i][&agent]).collect());
            let mut neighbor_histories = BTreeMap::new();
            for (&other, _) in column[now].iter() {
                if other == agent {
                    continue;
                }
                neighbor_histories.insert(other, backfilled(&column[start..=now], other));
            }
            samples.push(Sample {
                target_id: agent,
                frame: frames[now],
                history: track(start..now + 1),
                future: track(now + 1..start + span),
                neighbor_histories,
            });
        }
    }
    Ok(samples)
}

/// History of `agent` over `window`; leading gaps repeat the earliest observed
/// position and interior gaps hold the last one.
fn backfilled(window: &[&BTreeMap<i64, Point>], agent: i64) -> Trajectory {
    let observed: Vec<Option<Point>> = window.iter().map(|f| f.get(&agent).copied()).collect();
    let earliest = observed
        .iter()
        .flatten()
        .next()
        .copied()
        .expect("agent present at t = 0");
    let mut last = earliest;
    Trajectory(
        observed
            .into_iter()
            .map(|p| {
                if let Some(p) = p {
                    last = p;
                }
                last
            })
            .collect(),
    )
}

/// Nodes and undirected edges of a target's local interaction graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    /// Agent ids; index 0 is always the target.
    pub nodes: Vec<i64>,
    /// Undirected node-index pairs `(a, b)` with `a < b`.
    pub edges: Vec<(usize, usize)>,
}

impl InteractionGraph {
    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let key = (a.min(b), a.max(b));
        self.edges.contains(&key)
    }

    /// Dense symmetric adjacency including self-loops.
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        let n = self.nodes.len();
        let mut adj = vec![vec![false; n]; n];
        for (i, row) in adj.iter_mut().enumerate() {
            row[i] = true;
        }
        for &(a, b) in &self.edges {
            adj[a][b] = true;
            adj[b][a] = true;
        }
        adj
    }
}

/// What a single agent perceives: its own history and neighbors within `delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalObservation {
    pub ego: Sample,
    /// `(agent id, history)` ordered by agent id.
    pub neighbors: Vec<(i64, Trajectory)>,
    pub graph: InteractionGraph,
    pub delta: f64,
}

impl LocalObservation {
    /// Histories of every graph node, aligned with `graph.nodes`.
    pub fn node_histories(&self) -> Vec<&Trajectory> {
        std::iter::once(&self.ego.history)
            .chain(self.neighbors.iter().map(|(_, h)| h))
            .collect()
    }
}

fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Restricts a sample to the agents strictly closer than `delta` at t = 0.
pub fn build_local_observation(sample: &Sample, delta: f64) -> Result<LocalObservation> {
    ensure!(delta > 0.0, "delta must be positive, got {delta}");
    let origin = sample.current();
    let neighbors: Vec<(i64, Trajectory)> = sample
        .neighbor_histories
        .iter()
        .filter(|(_, h)| distance(h.last().expect("non-empty"), origin) < delta)
        .map(|(&id, h)| (id, h.clone()))
        .collect();

    let positions: Vec<Point> = std::iter::once(origin)
        .chain(neighbors.iter().map(|(_, h)| h.last().expect("non-empty")))
        .collect();
    let mut edges = Vec::new();
    for a in 0..positions.len() {
        for b in a + 1..positions.len() {
            if distance(positions[a], positions[b]) < delta {
                edges.push((a, b));
            }
        }
    }
    let nodes = std::iter::once(sample.target_id)
        .chain(neighbors.iter().map(|(id, _)| *id))
        .collect();

    let mut ego = sample.clone();
    ego.neighbor_histories = neighbors.iter().cloned().collect();
    Ok(LocalObservation {
        ego,
        neighbors,
        graph: InteractionGraph { nodes, edges },
        delta,
    })
}

/// Per-step position, velocity and acceleration (velocities in meters per step).
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicFeatures(pub Vec<[f64; 6]>);

impl KinematicFeatures {
    pub fn rows(&self) -> &[[f64; 6]] {
        &self.0
    }

    pub fn velocity(&self, t: usize) -> Point {
        [self.0[t][2], self.0[t][3]]
    }
}

/// Finite-difference kinematics with edge padding: `v[0] = v[1]` and the
/// leading acceleration rows copy the first defined one (`a[2]`).
pub fn kinematic_features(history: &Trajectory) -> Result<KinematicFeatures> {
    let p = history.points();
    ensure!(p.len() >= 2, "kinematics need at least 2 positions, got {}", p.len());
    let n = p.len();
    let mut vel = vec![[0.0; 2]; n];
    for t in 1..n {
        vel[t] = [p[t][0] - p[t - 1][0], p[t][1] - p[t - 1][1]];
    }
    vel[0] = vel[1];
    let mut acc = vec![[0.0; 2]; n];
    if n >= 3 {
        for t in 2..n {
            acc[t] = [vel[t][0] - vel[t - 1][0], vel[t][1] - vel[t - 1][1]];
        }
        acc[0] = acc[2];
        acc[1] = acc[2];
    }
    Ok(KinematicFeatures(
        (0..n)
            .map(|t| [p[t][0], p[t][1], vel[t][0], vel[t][1], acc[t][0], acc[t][1]])
            .collect(),
    ))
}

/// Position and velocity of an agent at t = 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub pos: Point,
    pub vel: Point,
}

impl AgentState {
    /// State at the last step of `history` (velocity follows the padding rule).
    pub fn from_history(history: &Trajectory) -> Result<AgentState> {
        let k = kinematic_features(history)?;
        let t = history.len() - 1;
        Ok(AgentState {
            pos: history.points()[t],
            vel: k.velocity(t),
        })
    }
}

/// Rigid-motion invariant description of agent `j` relative to agent `i`:
/// `(range, |dv|, dv·u, dv·u_perp, v_i·u, |v_i|)` with `u` the unit vector from i to j.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeFeature(pub [f64; 6]);

pub fn edge_features(i: AgentState, j: AgentState) -> EdgeFeature {
    let dp = [j.pos[0] - i.pos[0], j.pos[1] - i.pos[1]];
    let dv = [j.vel[0] - i.vel[0], j.vel[1] - i.vel[1]];
    let d = dp[0].hypot(dp[1]);
    let u = if d < COINCIDENT_EPS {
        [0.0, 0.0]
    } else {
        [dp[0] / d, dp[1] / d]
    };
    let u_perp = [-u[1], u[0]];
    let dot = |a: Point, b: Point| a[0] * b[0] + a[1] * b[1];
    EdgeFeature([
        d,
        dv[0].hypot(dv[1]),
        dot(dv, u),
        dot(dv, u_perp),
        dot(i.vel, u),
        i.vel[0].hypot(i.vel[1]),
    ])
}

/// Dataset-level residual normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mu: Point,
    pub sigma: Point,
}

impl ResidualStats {
    pub fn identity() -> ResidualStats {
        ResidualStats {
            mu: [0.0, 0.0],
            sigma: [1.0, 1.0],
        }
    }
}

/// Pooled per-coordinate mean and population standard deviation.
///
/// Values are sorted before summation so the result does not depend on the
/// order of `residuals`.
pub fn residual_stats(residuals: &[Trajectory]) -> Result<ResidualStats> {
    ensure!(!residuals.is_empty(), "residual statistics need at least one residual");
    let mut mu = [0.0; 2];
    let mut sigma = [0.0; 2];
    for c in 0..2 {
        let mut values: Vec<f64> = residuals
            .iter()
            .flat_map(|r| r.points().iter().map(move |p| p[c]))
            .collect();
        ensure!(!values.is_empty(), "residuals contain no steps");
        values.sort_by(f64::total_cmp);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        sq.sort_by(f64::total_cmp);
        mu[c] = mean;
        sigma[c] = (sq.iter().sum::<f64>() / n).sqrt().max(STD_FLOOR);
    }
    Ok(ResidualStats { mu, sigma })
}

/// Scene name to file mapping plus the default held-out scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub scenes: BTreeMap<String, PathBuf>,
    pub heldout: Option<String>,
}

impl Manifest {
    /// Reads `scene.<name>=<path>` and `heldout=<name>` lines. Relative paths
    /// resolve against `$FEPDIFF_DATA_DIR` when set, else the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) => PathBuf::from(dir),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let mut scenes = BTreeMap::new();
        let mut heldout = None;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: "expected key=value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "heldout" {
                heldout = Some(value.to_string());
            } else if let Some(name) = key.strip_prefix("scene.") {
                let file = PathBuf::from(value);
                let file = if file.is_absolute() { file } else { root.join(file) };
                scenes.insert(name.to_string(), file);
            } else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: format!("unknown manifest key `{key}`"),
                });
            }
        }
        if let Some(h) = &heldout {
            if !scenes.contains_key(h) {
                return Err(Error::MissingScene(h.clone()));
            }
        }
        Ok(Manifest { scenes, heldout })
    }

    pub fn scene_path(&self, name: &str) -> Result<&Path> {
        self.scenes
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::MissingScene(name.to_string()))
    }

    /// Leave-one-out split: every scene except `heldout` trains.
    pub fn split(&self, heldout: &str) -> Result<(Vec<String>, String)> {
        self.scene_path(heldout)?;
        let train = self.scenes.keys().filter(|k| k.as_str() != heldout).cloned().collect();
        Ok((train, heldout.to_string()))
    }
}
