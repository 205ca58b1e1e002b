//! The attention-guided attack engine: three collision-inducing losses,
//! joint optimization of the perturbation R and attention weights W with
//! per-row epsilon-ball projection of R and simplex projection of W, and
//! early stopping at the first collision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    check_collision, distance_matrix, metric_cr, metric_pavg, project_perturbation,
    AttackConfig, AttackMode, AttackReport, Perturbation, PredictionSet, Scene,
};
use crate::predictors::{DifferentiablePredictor, TapedPrediction};

/// Attention weight matrix over (neighbor, prediction-timestep) cells.
/// Soft mode keeps it on the probability simplex; hard mode keeps it
/// one-hot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl AttentionWeights {
    pub fn uniform(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        AttentionWeights {
            values: vec![1.0 / n as f64; n],
            rows,
            cols,
        }
    }

    pub fn one_hot(rows: usize, cols: usize, row: usize, col: usize) -> Self {
        let mut values = vec![0.0; rows * cols];
        values[row * cols + col] = 1.0;
        AttentionWeights { values, rows, cols }
    }

    /// Entries nonnegative and summing to one, within tolerance.
    pub fn check_simplex(&self, tol: f64) -> std::result::Result<(), String> {
        if let Some(v) = self.values.iter().find(|&&v| v < -tol) {
            return Err(format!("negative entry {v}"));
        }
        let sum: f64 = self.values.iter().sum();
        if (sum - 1.0).abs() > tol.max(1e-9) {
            return Err(format!("entries sum to {sum}"));
        }
        Ok(())
    }
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Frobenius norm of the entire distance matrix (no attention).
pub fn loss_no_attention(tape: &mut Tape, d: Var) -> Result<Var> {
    tape.frobenius(d)
}

/// Picks the current argmin cell of D (ties: lowest row, then column) and
/// returns d_min + lambda_r * ||R||_F together with the one-hot weights.
/// W is treated as a constant within the step.
pub fn loss_hard_attention(
    tape: &mut Tape,
    d: Var,
    r: Var,
    lambda_r: f64,
) -> Result<(Var, AttentionWeights)> {
    let shape = tape.shape(d).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("distance matrix must be 2-D, got {shape:?}")));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let values = tape.value(d);
    let mut best = (0usize, f64::INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    let (idx, _) = best;
    let w = AttentionWeights::one_hot(rows, cols, idx / cols, idx % cols);

    let flat = tape.reshape(d, &[rows * cols])?;
    let cell = tape.slice_rows(flat, idx, 1)?;
    let d_min = tape.reshape(cell, &[])?;
    let r_norm = tape.frobenius(r)?;
    let reg = tape.scale(r_norm, lambda_r);
    let loss = tape.add(d_min, reg)?;
    Ok((loss, w))
}

/// Soft-attention loss: sum(W .* tanh(D)) + lambda_r ||R||_F
/// - lambda_w ||W||_F, differentiable in both R (through D) and W.
pub fn loss_soft_attention(
    tape: &mut Tape,
    d: Var,
    w: Var,
    r: Var,
    lambda_r: f64,
    lambda_w: f64,
) -> Result<Var> {
    let w_check = AttentionWeights {
        values: tape.value(w).to_vec(),
        rows: tape.shape(w).first().copied().unwrap_or(1),
        cols: tape.shape(w).get(1).copied().unwrap_or(1),
    };
    w_check
        .check_simplex(1e-9)
        .map_err(Error::InvalidWeights)?;

    let th = tape.tanh(d);
    let weighted = tape.mul(w, th)?;
    let attended = tape.sum(weighted);
    let r_norm = tape.frobenius(r)?;
    let reg_r = tape.scale(r_norm, lambda_r);
    let w_norm = tape.frobenius(w)?;
    let reg_w = tape.scale(w_norm, -lambda_w);
    let partial = tape.add(attended, reg_r)?;
    tape.add(partial, reg_w)
}

/// Builds the distance matrix D as a tape node from taped predictions.
/// With `frozen` set, neighbor positions are replaced by constants from
/// the pre-attack prediction while the candidate stays live.
fn distance_var(
    tape: &mut Tape,
    taped: &TapedPrediction,
    candidate_index: usize,
    frozen: Option<&PredictionSet>,
) -> Result<Var> {
    let n = taped.positions.len();
    if n < 2 {
        return Err(Error::NoNeighbors);
    }
    let t_pred = taped.positions[0].len();
    let cand: Vec<Var> = taped.positions[candidate_index].clone();
    let cand_mat = tape.stack(&cand)?; // [t_pred, 2]
    let mut rows = Vec::with_capacity(n - 1);
    for j in 0..n {
        if j == candidate_index {
            continue;
        }
        let nbr_mat = match frozen {
            Some(pre) => {
                let flat: Vec<f64> = pre.trajectories[j].points.iter().flatten().copied().collect();
                tape.constant(&[t_pred, 2], flat)
            }
            None => tape.stack(&taped.positions[j])?,
        };
        let diff = tape.sub(nbr_mat, cand_mat)?;
        rows.push(tape.norm_rows(diff)?);
    }
    let stacked = tape.stack(&rows)?; // [n-1, t_pred]
    Ok(stacked)
}

fn flatten_perturbation(r: &Perturbation) -> Vec<f64> {
    r.offsets.iter().flatten().copied().collect()
}

fn make_report(
    scene: &Scene,
    collided_cell: Option<(usize, usize)>,
    iterations_used: usize,
    r: Perturbation,
    before: PredictionSet,
    after: PredictionSet,
) -> AttackReport {
    AttackReport {
        scene_id: scene.scene_id.clone(),
        candidate_index: scene.candidate_index,
        candidate_id: scene.candidate().id.clone(),
        collided: collided_cell.is_some(),
        collision_cell: collided_cell,
        iterations_used,
        p_avg: metric_pavg(&r),
        perturbation: r,
        predictions_before: before,
        predictions_after: after,
    }
}

/// Runs the configured attack on one scene. `seed` drives the random
/// baseline; gradient modes are deterministic given (scene, params, cfg).
pub fn run_attack(
    scene: &Scene,
    predictor: &dyn DifferentiablePredictor,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackReport> {
    cfg.validate()?;
    scene.validate()?;
    let n = scene.n();
    if n < 2 {
        return Err(Error::NoNeighbors);
    }
    if cfg.mode != AttackMode::Random && !predictor.differentiable() {
        return Err(Error::NotDifferentiable(predictor.name().to_string()));
    }
    let t_obs = scene.t_obs();
    let ci = scene.candidate_index;

    let before = predict_with(predictor, scene, &Perturbation::zeros(t_obs))?;
    let d0 = distance_matrix(&before, ci)?;
    if let Some(cell) = check_collision(&d0, cfg.gamma) {
        // the unattacked prediction already collides
        let after = before.clone();
        return Ok(make_report(
            scene,
            Some(cell),
            0,
            Perturbation::zeros(t_obs),
            before,
            after,
        ));
    }

    if cfg.mode == AttackMode::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offsets = (0..t_obs)
            .map(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                [cfg.epsilon * angle.cos(), cfg.epsilon * angle.sin()]
            })
            .collect();
        let r = Perturbation { offsets };
        let after = predict_with(predictor, scene, &r)?;
        let d = distance_matrix(&after, ci)?;
        let cell = check_collision(&d, cfg.gamma);
        return Ok(make_report(scene, cell, 1, r, before, after));
    }

    let t_pred = before.t_pred();
    let mut r = Perturbation::zeros(t_obs);
    let mut w = AttentionWeights::uniform(n - 1, t_pred);

    for it in 1..=cfg.max_iters {
        let mut tape = Tape::new();
        let r_var = tape.leaf(&[t_obs, 2], flatten_perturbation(&r), true);
        let taped = predictor.predict_taped(&mut tape, scene, r_var)?;

        // collision check at the R produced by the previous update; judged
        // on the full joint predictions even in freeze mode
        if it > 1 {
            let live = taped.to_prediction_set(&tape);
            let d_now = distance_matrix(&live, ci)?;
            if let Some(cell) = check_collision(&d_now, cfg.gamma) {
                return Ok(make_report(scene, Some(cell), it - 1, r, before, live));
            }
        }

        let frozen = if cfg.freeze_neighbors { Some(&before) } else { None };
        let d_var = distance_var(&mut tape, &taped, ci, frozen)?;

        let (loss, w_var) = match cfg.mode {
            AttackMode::NoAttention => (loss_no_attention(&mut tape, d_var)?, None),
            AttackMode::Hard => {
                let (loss, hard_w) = loss_hard_attention(&mut tape, d_var, r_var, cfg.lambda_r)?;
                w = hard_w;
                (loss, None)
            }
            AttackMode::Soft => {
                let w_var = tape.leaf(&[n - 1, t_pred], w.values.clone(), true);
                let loss = loss_soft_attention(
                    &mut tape,
                    d_var,
                    w_var,
                    r_var,
                    cfg.lambda_r,
                    cfg.lambda_w,
                )?;
                (loss, Some(w_var))
            }
            AttackMode::Random => unreachable!("handled above"),
        };
        if !tape.scalar_value(loss).is_finite() {
            return Err(Error::NonFinite(format!("attack loss at iteration {it}")));
        }

        let grads = tape.backward(loss)?;

        // normalized-gradient step on R, then projection onto the
        // per-row epsilon ball
        let g_r = grads.get_or_zeros(r_var, t_obs * 2);
        let g_norm = g_r.iter().map(|g| g * g).sum::<f64>().sqrt();
        if g_norm > 1e-12 {
            let scale = cfg.step_size_r / g_norm;
            for (t, row) in r.offsets.iter_mut().enumerate() {
                row[0] -= scale * g_r[t * 2];
                row[1] -= scale * g_r[t * 2 + 1];
            }
        }
        r = project_perturbation(&r, cfg.epsilon);

        if let Some(w_var) = w_var {
            let g_w = grads.get_or_zeros(w_var, w.values.len());
            for (x, g) in w.values.iter_mut().zip(&g_w) {
                *x -= cfg.step_size_w * g;
            }
            w.values = project_simplex(&w.values);
        }
    }

    // final evaluation after the last update
    let after = predict_with(predictor, scene, &r)?;
    let d = distance_matrix(&after, ci)?;
    let cell = check_collision(&d, cfg.gamma);
    Ok(make_report(scene, cell, cfg.max_iters, r, before, after))
}

/// Numeric prediction of the perturbed scene through the taped forward
/// pass, so attack-time and evaluation-time predictions share one path.
fn predict_with(
    predictor: &dyn DifferentiablePredictor,
    scene: &Scene,
    r: &Perturbation,
) -> Result<PredictionSet> {
    let mut tape = Tape::new();
    let r_var = tape.leaf(&[r.len(), 2], flatten_perturbation(r), false);
    let taped = predictor.predict_taped(&mut tape, scene, r_var)?;
    Ok(taped.to_prediction_set(&tape))
}

/// Aggregate statistics over an attacked dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummaryStats {
    pub instances: usize,
    pub collided: usize,
    pub cr_original: f64,
    pub cr_attacked: f64,
    /// Mean P-avg over instances where a collision was found.
    pub mean_p_avg_collided: Option<f64>,
    pub mean_p_avg_all: f64,
}

/// Expands every scene into one attack instance per agent as candidate,
/// attacks each instance, and aggregates. Instances run on the rayon pool
/// with order-deterministic aggregation.
pub fn attack_dataset(
    scenes: &[Scene],
    predictor: &(dyn DifferentiablePredictor + Sync),
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(Vec<AttackReport>, AttackSummaryStats)> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let instances: Vec<Scene> = scenes
        .iter()
        .flat_map(|s| (0..s.n()).map(move |i| s.with_candidate(i)))
        .collect();

    let reports: Vec<AttackReport> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, scene)| {
            let instance_seed = seed.wrapping_add((idx as u64).wrapping_mul(0x9e3779b97f4a7c15));
            run_attack(scene, predictor, cfg, instance_seed)
        })
        .collect::<Result<Vec<_>>>()?;

    let stats = summarize(&reports, cfg.gamma)?;
    Ok((reports, stats))
}

/// Aggregates a slice of reports into summary statistics.
pub fn summarize(reports: &[AttackReport], gamma: f64) -> Result<AttackSummaryStats> {
    if reports.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let original_flags: Vec<bool> = reports
        .iter()
        .map(|r| {
            distance_matrix(&r.predictions_before, r.candidate_index)
                .map(|d| check_collision(&d, gamma).is_some())
                .unwrap_or(false)
        })
        .collect();
    let attacked_flags: Vec<bool> = reports.iter().map(|r| r.collided).collect();
    let collided = attacked_flags.iter().filter(|&&c| c).count();
    let mean_p_avg_collided = if collided > 0 {
        Some(
            reports
                .iter()
                .filter(|r| r.collided)
                .map(|r| r.p_avg)
                .sum::<f64>()
                / collided as f64,
        )
    } else {
        None
    };
    Ok(AttackSummaryStats {
        instances: reports.len(),
        collided,
        cr_original: metric_cr(&original_flags)?,
        cr_attacked: metric_cr(&attacked_flags)?,
        mean_p_avg_collided,
        mean_p_avg_all: reports.iter().map(|r| r.p_avg).sum::<f64>() / reports.len() as f64,
    })
}

// ---------------------------------------------------------------------
// Perturbation archive
// ---------------------------------------------------------------------

/// One archived attack instance, serialized as line-delimited JSON for the
/// transfer harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub scene_id: String,
    pub agent_id: String,
    pub mode: AttackMode,
    pub cfg_hash: String,
    pub rows: Vec<[f64; 2]>,
    pub collided: bool,
    pub collision_cell: Option<(usize, usize)>,
    pub p_avg: f64,
}

impl ArchiveRecord {
    pub fn from_report(report: &AttackReport, cfg: &AttackConfig) -> Self {
        ArchiveRecord {
            scene_id: report.scene_id.clone(),
            agent_id: report.candidate_id.clone(),
            mode: cfg.mode,
            cfg_hash: cfg.hash(),
            rows: report.perturbation.offsets.clone(),
            collided: report.collided,
            collision_cell: report.collision_cell,
            p_avg: report.p_avg,
        }
    }

    pub fn perturbation(&self) -> Perturbation {
        Perturbation {
            offsets: self.rows.clone(),
        }
    }
}

pub fn write_archive(records: &[ArchiveRecord], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        writeln!(file)?;
    }
    Ok(())
}

pub fn read_archive(path: &std::path::Path) -> Result<Vec<ArchiveRecord>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(records)
}
