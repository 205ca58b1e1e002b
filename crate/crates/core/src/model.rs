//! Domain types: scenes, trajectories, perturbations, distance matrices,
//! collision detection and the evaluation metrics (CR, P-avg, ADE/FDE).
//!
//! All coordinates are double-precision meters. Every type is an immutable
//! value after construction; the operations here are pure functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D point in meters.
pub type Point = [f64; 2];

pub fn dist(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// An ordered sequence of xy positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    pub points: Vec<Point>,
}

impl Trajectory {
    pub fn new(points: Vec<Point>) -> Self {
        Trajectory { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Point {
        *self.points.last().expect("trajectory is nonempty")
    }

    pub fn is_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

/// One pedestrian in a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: String,
    #[serde(rename = "obs")]
    pub observation: Trajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub future: Option<Trajectory>,
}

/// Observation + ground-truth-future trajectories of n agents; the unit of
/// attack. `candidate_index` selects the agent whose observation receives
/// the perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub agents: Vec<Agent>,
    #[serde(default)]
    pub candidate_index: usize,
}

impl Scene {
    /// Number of agents.
    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn t_obs(&self) -> usize {
        self.agents.first().map_or(0, |a| a.observation.len())
    }

    pub fn candidate(&self) -> &Agent {
        &self.agents[self.candidate_index]
    }

    /// Same scene with a different candidate agent.
    pub fn with_candidate(&self, index: usize) -> Scene {
        let mut s = self.clone();
        s.candidate_index = index;
        s
    }

    pub fn has_futures(&self) -> bool {
        self.agents.iter().all(|a| a.future.is_some())
    }

    /// Checks the structural invariants: nonempty, consistent lengths,
    /// finite coordinates, distinct agent ids, valid candidate index.
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::Scene(format!("{}: no agents", self.scene_id)));
        }
        if self.candidate_index >= self.agents.len() {
            return Err(Error::Scene(format!(
                "{}: candidate_index {} out of range",
                self.scene_id, self.candidate_index
            )));
        }
        let t_obs = self.agents[0].observation.len();
        if t_obs == 0 {
            return Err(Error::Scene(format!("{}: empty observation", self.scene_id)));
        }
        let t_pred = self.agents.iter().find_map(|a| a.future.as_ref().map(|f| f.len()));
        let mut seen = std::collections::HashSet::new();
        for a in &self.agents {
            if !seen.insert(a.id.as_str()) {
                return Err(Error::Scene(format!(
                    "{}: duplicate agent id {}",
                    self.scene_id, a.id
                )));
            }
            if a.observation.len() != t_obs {
                return Err(Error::Scene(format!(
                    "{}: agent {} observation length {} != {}",
                    self.scene_id,
                    a.id,
                    a.observation.len(),
                    t_obs
                )));
            }
            if !a.observation.is_finite() {
                return Err(Error::Scene(format!(
                    "{}: agent {} has non-finite observation",
                    self.scene_id, a.id
                )));
            }
            if let Some(f) = &a.future {
                if Some(f.len()) != t_pred || f.is_empty() {
                    return Err(Error::Scene(format!(
                        "{}: agent {} future length mismatch",
                        self.scene_id, a.id
                    )));
                }
                if !f.is_finite() {
                    return Err(Error::Scene(format!(
                        "{}: agent {} has non-finite future",
                        self.scene_id, a.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Additive offset applied to the candidate agent's observation,
/// one (dx, dy) row per observation timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Perturbation {
    pub offsets: Vec<Point>,
}

impl Perturbation {
    pub fn zeros(t_obs: usize) -> Self {
        Perturbation {
            offsets: vec![[0.0, 0.0]; t_obs],
        }
    }

    pub fn row_norm(&self, t: usize) -> f64 {
        let [dx, dy] = self.offsets[t];
        (dx * dx + dy * dy).sqrt()
    }

    /// Maximum over timesteps of the per-row Euclidean norm.
    pub fn max_row_norm(&self) -> f64 {
        (0..self.offsets.len())
            .map(|t| self.row_norm(t))
            .fold(0.0, f64::max)
    }

    /// Frobenius norm of the offset matrix.
    pub fn frobenius_norm(&self) -> f64 {
        self.offsets
            .iter()
            .map(|[dx, dy]| dx * dx + dy * dy)
            .sum::<f64>()
            .sqrt()
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Per-agent predicted trajectories, aligned with `Scene::agents`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictionSet {
    pub trajectories: Vec<Trajectory>,
}

impl PredictionSet {
    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    pub fn t_pred(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.len())
    }
}

/// (n-1) x T_pred grid of candidate-to-neighbor distances over the
/// predicted futures. `neighbor_order` maps matrix rows back to agent
/// indices within the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub neighbor_order: Vec<usize>,
}

impl DistanceMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Minimal entry with its cell, ties broken by lowest row then column.
    pub fn min_cell(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = self.get(r, c);
                if best.map_or(true, |(_, _, bv)| v < bv) {
                    best = Some((r, c, v));
                }
            }
        }
        best
    }
}

/// Pairwise candidate-to-neighbor distances at every prediction timestep.
pub fn distance_matrix(predictions: &PredictionSet, candidate_index: usize) -> Result<DistanceMatrix> {
    let n = predictions.n();
    if candidate_index >= n {
        return Err(Error::Shape(format!(
            "candidate_index {candidate_index} out of range for {n} agents"
        )));
    }
    if n < 2 {
        return Err(Error::NoNeighbors);
    }
    let t_pred = predictions.t_pred();
    let cand = &predictions.trajectories[candidate_index];
    let mut values = Vec::with_capacity((n - 1) * t_pred);
    let mut neighbor_order = Vec::with_capacity(n - 1);
    for (j, traj) in predictions.trajectories.iter().enumerate() {
        if j == candidate_index {
            continue;
        }
        neighbor_order.push(j);
        for t in 0..t_pred {
            values.push(dist(traj.points[t], cand.points[t]));
        }
    }
    Ok(DistanceMatrix {
        values,
        rows: n - 1,
        cols: t_pred,
        neighbor_order,
    })
}

/// Returns the minimal-distance cell if that minimum is strictly below
/// gamma, else `None`. Ties at exactly gamma are non-collisions.
pub fn check_collision(d: &DistanceMatrix, gamma: f64) -> Option<(usize, usize)> {
    match d.min_cell() {
        Some((r, c, v)) if v < gamma => Some((r, c)),
        _ => None,
    }
}

/// Rescales every row whose Euclidean norm exceeds epsilon back onto the
/// sphere of radius epsilon; rows inside the ball are untouched.
pub fn project_perturbation(r: &Perturbation, epsilon: f64) -> Perturbation {
    let offsets = r
        .offsets
        .iter()
        .map(|&[dx, dy]| {
            // iterate to a floating-point fixed point so projecting twice
            // is exactly the identity on already-projected rows
            let mut row = [dx, dy];
            loop {
                let norm = (row[0] * row[0] + row[1] * row[1]).sqrt();
                if !(norm > epsilon) {
                    break;
                }
                let s = epsilon / norm;
                let next = [row[0] * s, row[1] * s];
                if next == row {
                    break;
                }
                row = next;
            }
            row
        })
        .collect();
    Perturbation { offsets }
}

/// Shifts the candidate agent's observation pointwise by `r`; every other
/// agent and all futures are untouched.
pub fn apply_perturbation(scene: &Scene, r: &Perturbation) -> Result<Scene> {
    let t_obs = scene.t_obs();
    if r.len() != t_obs {
        return Err(Error::Shape(format!(
            "perturbation has {} rows, observation has {t_obs}",
            r.len()
        )));
    }
    let mut out = scene.clone();
    let obs = &mut out.agents[scene.candidate_index].observation;
    for (p, o) in obs.points.iter_mut().zip(&r.offsets) {
        p[0] += o[0];
        p[1] += o[1];
    }
    Ok(out)
}

/// True when the candidate's predicted trajectory comes within gamma of
/// any neighbor's at any timestep. Single-agent scenes never collide.
pub fn collision_flag(predictions: &PredictionSet, candidate_index: usize, gamma: f64) -> bool {
    match distance_matrix(predictions, candidate_index) {
        Ok(d) => check_collision(&d, gamma).is_some(),
        Err(_) => false,
    }
}

/// Counts predicted collisions among neighbor pairs (candidate excluded
/// from both sides). Reported only; never optimized.
pub fn neighbor_pair_collides(
    predictions: &PredictionSet,
    candidate_index: usize,
    gamma: f64,
) -> bool {
    let n = predictions.n();
    let t_pred = predictions.t_pred();
    for a in 0..n {
        if a == candidate_index {
            continue;
        }
        for b in (a + 1)..n {
            if b == candidate_index {
                continue;
            }
            for t in 0..t_pred {
                if dist(
                    predictions.trajectories[a].points[t],
                    predictions.trajectories[b].points[t],
                ) < gamma
                {
                    return true;
                }
            }
        }
    }
    false
}

/// Collision rate: percentage of instances flagged as colliding.
pub fn metric_cr(collided: &[bool]) -> Result<f64> {
    if collided.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = collided.iter().filter(|&&c| c).count();
    Ok(100.0 * hits as f64 / collided.len() as f64)
}

/// Mean over observation timesteps of the per-timestep perturbation norm.
pub fn metric_pavg(r: &Perturbation) -> f64 {
    if r.is_empty() {
        return 0.0;
    }
    (0..r.len()).map(|t| r.row_norm(t)).sum::<f64>() / r.len() as f64
}

/// Average and final displacement error of `predictions` against the
/// scene's ground-truth futures. Aggregates over all agents by default;
/// `candidate_only` restricts to the candidate.
pub fn metric_ade_fde(
    predictions: &PredictionSet,
    scene: &Scene,
    candidate_only: bool,
) -> Result<(f64, f64)> {
    let mut ade_sum = 0.0;
    let mut ade_count = 0usize;
    let mut fde_sum = 0.0;
    let mut fde_count = 0usize;
    for (i, agent) in scene.agents.iter().enumerate() {
        if candidate_only && i != scene.candidate_index {
            continue;
        }
        let future = agent
            .future
            .as_ref()
            .ok_or_else(|| Error::NoGroundTruth(agent.id.clone()))?;
        let pred = &predictions.trajectories[i];
        if pred.len() != future.len() {
            return Err(Error::Shape(format!(
                "prediction length {} != future length {}",
                pred.len(),
                future.len()
            )));
        }
        for t in 0..future.len() {
            ade_sum += dist(pred.points[t], future.points[t]);
            ade_count += 1;
        }
        fde_sum += dist(pred.last(), future.last());
        fde_count += 1;
    }
    if ade_count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((ade_sum / ade_count as f64, fde_sum / fde_count as f64))
}

/// Attack mode selecting the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Frobenius norm of the whole distance matrix.
    NoAttention,
    /// One-hot attention at the current closest (neighbor, timestep).
    Hard,
    /// Simplex-constrained attention optimized jointly with R.
    Soft,
    /// Unoptimized baseline: rows sampled uniformly at norm epsilon.
    Random,
}

impl AttackMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackMode::NoAttention),
            "hard" => Ok(AttackMode::Hard),
            "soft" => Ok(AttackMode::Soft),
            "random" => Ok(AttackMode::Random),
            _ => Err(Error::Config(format!(
                "unknown attack mode {s:?} (expected none|hard|soft|random)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackMode::NoAttention => "none",
            AttackMode::Hard => "hard",
            AttackMode::Soft => "soft",
            AttackMode::Random => "random",
        }
    }
}

/// Attack hyperparameters. Defaults are the standard evaluation setting:
/// epsilon 0.2 m, gamma 0.2 m, lambda_r 0.1, lambda_w 0.5, 100 iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Per-timestep row-norm cap on the perturbation, meters.
    pub epsilon: f64,
    /// Collision distance threshold, meters.
    pub gamma: f64,
    /// Weight of the perturbation-size regularizer.
    pub lambda_r: f64,
    /// Weight of the attention anti-uniformity term (soft mode).
    pub lambda_w: f64,
    pub max_iters: usize,
    /// Normalized-gradient step length for R, meters per iteration.
    pub step_size_r: f64,
    /// Gradient step size for the attention weights.
    pub step_size_w: f64,
    pub mode: AttackMode,
    /// Hold neighbor predictions fixed inside the attack loss.
    pub freeze_neighbors: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.2,
            gamma: 0.2,
            lambda_r: 0.1,
            lambda_w: 0.5,
            max_iters: 100,
            step_size_r: 0.01,
            step_size_w: 0.1,
            mode: AttackMode::Soft,
            freeze_neighbors: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        // epsilon 0 is allowed: the perturbation stays pinned at zero and
        // the attack degenerates to a collision check on the clean scene
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be >= 0".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be > 0".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !(self.step_size_r > 0.0) || !(self.step_size_w > 0.0) {
            return Err(Error::Config("step sizes must be > 0".into()));
        }
        if self.lambda_r < 0.0 || self.lambda_w < 0.0 {
            return Err(Error::Config("lambdas must be >= 0".into()));
        }
        Ok(())
    }

    /// Stable hash of the serialized config, for archive provenance.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        hex
    }
}

/// Per-instance attack outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub scene_id: String,
    pub candidate_index: usize,
    pub candidate_id: String,
    pub collided: bool,
    /// (distance-matrix row, prediction timestep) of the colliding cell.
    pub collision_cell: Option<(usize, usize)>,
    pub iterations_used: usize,
    pub p_avg: f64,
    pub perturbation: Perturbation,
    pub predictions_before: PredictionSet,
    pub predictions_after: PredictionSet,
}
