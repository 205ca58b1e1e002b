//! Study orchestration: transferability of archived perturbations,
//! adversarial fine-tuning, per-timestep sensitivity curves, the
//! frozen-neighbor ablation and the neighbor-collision scan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_dataset, run_attack, ArchiveRecord};
use crate::error::{Error, Result};
use crate::model::{
    apply_perturbation, collision_flag, metric_ade_fde, metric_cr, neighbor_pair_collides,
    AttackConfig, AttackReport, Scene,
};
use crate::predictors::{
    finetune_pool_lite, DifferentiablePredictor, PoolLite, PoolLiteParams, Predictor, TrainConfig,
};

// ---------------------------------------------------------------------
// Transferability
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    /// Collision rate of the archived perturbations on the target, percent.
    pub cr: f64,
    /// Per-archive-record collision flags, in archive order.
    pub flags: Vec<bool>,
}

/// Applies each archived perturbation to its scene (candidate looked up by
/// agent id) and runs the target predictor with no further optimization.
pub fn transfer_eval(
    archive: &[ArchiveRecord],
    target: &dyn Predictor,
    scenes: &[Scene],
    gamma: f64,
) -> Result<TransferResult> {
    if archive.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let flags = archive
        .iter()
        .map(|rec| {
            let scene = scenes
                .iter()
                .find(|s| s.scene_id == rec.scene_id)
                .ok_or_else(|| {
                    Error::SceneMismatch(format!("archive references unknown scene {}", rec.scene_id))
                })?;
            let candidate = scene
                .agents
                .iter()
                .position(|a| a.id == rec.agent_id)
                .ok_or_else(|| {
                    Error::SceneMismatch(format!(
                        "scene {} has no agent {}",
                        rec.scene_id, rec.agent_id
                    ))
                })?;
            let instance = scene.with_candidate(candidate);
            let perturbed = apply_perturbation(&instance, &rec.perturbation())?;
            let preds = target.predict(&perturbed)?;
            Ok(collision_flag(&preds, candidate, gamma))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(TransferResult {
        cr: metric_cr(&flags)?,
        flags,
    })
}

// ---------------------------------------------------------------------
// Adversarial fine-tuning
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    /// Epoch count and learning rate are repo defaults (unstated upstream);
    /// the learning rate is deliberately below the training rate so the
    /// clean behavior is not destroyed.
    fn default() -> Self {
        FinetuneConfig {
            epochs: 5,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Clean-accuracy and robustness metrics in the layout of the fine-tuning
/// comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessMetrics {
    pub ade: f64,
    pub fde: f64,
    pub cr_original: f64,
    pub cr_attacked: f64,
}

/// Mean metrics of a differentiable predictor on `scenes`: clean ADE/FDE
/// over all agents plus original and attacked CR under `cfg`.
pub fn evaluate_robustness(
    predictor: &(dyn DifferentiablePredictor + Sync),
    scenes: &[Scene],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<RobustnessMetrics> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ade = 0.0;
    let mut fde = 0.0;
    for scene in scenes {
        let preds = predictor.predict(scene)?;
        let (a, f) = metric_ade_fde(&preds, scene, false)?;
        ade += a;
        fde += f;
    }
    let (_, stats) = attack_dataset(scenes, predictor, cfg, seed)?;
    Ok(RobustnessMetrics {
        ade: ade / scenes.len() as f64,
        fde: fde / scenes.len() as f64,
        cr_original: stats.cr_original,
        cr_attacked: stats.cr_attacked,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: PoolLiteParams,
    pub before: RobustnessMetrics,
    pub after: RobustnessMetrics,
}

/// Adversarially fine-tunes a pool-lite snapshot. Per epoch: every training
/// scene is attacked under `attack_cfg` (soft mode at a small epsilon, or
/// random mode as the noise-augmentation control), and supervised steps are
/// taken on the 1:1 mix of original and perturbed scenes, both labeled with
/// the clean ground-truth futures. Metrics are measured on `holdout` under
/// `eval_cfg` before and after. The input snapshot is not mutated.
pub fn adversarial_finetune(
    start: &PoolLiteParams,
    t_pred: usize,
    train: &[Scene],
    holdout: &[Scene],
    attack_cfg: &AttackConfig,
    eval_cfg: &AttackConfig,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if train.is_empty() || holdout.is_empty() {
        return Err(Error::EmptyDataset);
    }
    attack_cfg.validate()?;
    let baseline = PoolLite::new(start.clone(), t_pred);
    let before = evaluate_robustness(&baseline, holdout, eval_cfg, cfg.seed)?;

    let mut params = start.clone();
    for epoch in 0..cfg.epochs {
        let model = PoolLite::new(params.clone(), t_pred);
        let adversarial: Vec<Scene> = train
            .par_iter()
            .enumerate()
            .map(|(idx, scene)| {
                let seed = cfg
                    .seed
                    .wrapping_add(epoch as u64)
                    .wrapping_add((idx as u64).wrapping_mul(0x9e3779b97f4a7c15));
                let report = run_attack(scene, &model, attack_cfg, seed)?;
                // perturbed observation, clean targets
                apply_perturbation(scene, &report.perturbation)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mixed = Vec::with_capacity(train.len() * 2);
        mixed.extend_from_slice(train);
        mixed.extend(adversarial);
        let step_cfg = TrainConfig {
            epochs: 1,
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size,
            hidden: 0, // fixed by the snapshot
            seed: cfg.seed.wrapping_add(epoch as u64),
        };
        params = finetune_pool_lite(&params, &mixed, &step_cfg)?.0;
    }

    let tuned = PoolLite::new(params.clone(), t_pred);
    let after = evaluate_robustness(&tuned, holdout, eval_cfg, cfg.seed)?;
    Ok(FinetuneOutcome {
        params,
        before,
        after,
    })
}

// ---------------------------------------------------------------------
// Per-timestep sensitivity
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    /// Mean prediction change (meters, averaged over all agents, prediction
    /// timesteps, trials and scenes) per observation timestep.
    pub prediction_change: Vec<f64>,
}

/// Perturbs the candidate observation at one timestep at a time with a
/// random direction of fixed magnitude and measures the mean displacement
/// of all predicted positions relative to the unperturbed prediction.
pub fn timestep_sensitivity(
    predictor: &(dyn Predictor + Sync),
    scenes: &[Scene],
    magnitude: f64,
    trials: usize,
    seed: u64,
) -> Result<SensitivityCurve> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t_obs = scenes[0].t_obs();
    let per_scene: Vec<Vec<f64>> = scenes
        .par_iter()
        .enumerate()
        .map(|(idx, scene)| {
            let base = predictor.predict(scene)?;
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_add((idx as u64).wrapping_mul(0x9e37)));
            let mut curve = vec![0.0; t_obs];
            for (t, slot) in curve.iter_mut().enumerate() {
                let mut total = 0.0;
                for _ in 0..trials.max(1) {
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    let mut r = crate::model::Perturbation::zeros(t_obs);
                    r.offsets[t] = [magnitude * angle.cos(), magnitude * angle.sin()];
                    let perturbed = apply_perturbation(scene, &r)?;
                    let preds = predictor.predict(&perturbed)?;
                    let mut change = 0.0;
                    let mut count = 0usize;
                    for (a, b) in preds.trajectories.iter().zip(&base.trajectories) {
                        for (pa, pb) in a.points.iter().zip(&b.points) {
                            change += crate::model::dist(*pa, *pb);
                            count += 1;
                        }
                    }
                    total += change / count.max(1) as f64;
                }
                *slot = total / trials.max(1) as f64;
            }
            Ok(curve)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut mean = vec![0.0; t_obs];
    for curve in &per_scene {
        for (m, c) in mean.iter_mut().zip(curve) {
            *m += c;
        }
    }
    for m in &mut mean {
        *m /= per_scene.len() as f64;
    }
    Ok(SensitivityCurve {
        prediction_change: mean,
    })
}

/// Companion curve: mean per-timestep perturbation norm across an archive
/// of attack perturbations.
pub fn archive_timestep_profile(archive: &[ArchiveRecord]) -> Result<Vec<f64>> {
    if archive.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t_obs = archive[0].rows.len();
    let mut mean = vec![0.0; t_obs];
    for rec in archive {
        if rec.rows.len() != t_obs {
            return Err(Error::Shape(format!(
                "archive row counts differ: {} vs {t_obs}",
                rec.rows.len()
            )));
        }
        for (m, [dx, dy]) in mean.iter_mut().zip(&rec.rows) {
            *m += (dx * dx + dy * dy).sqrt();
        }
    }
    for m in &mut mean {
        *m /= archive.len() as f64;
    }
    Ok(mean)
}

// ---------------------------------------------------------------------
// Frozen-neighbor ablation
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenStudy {
    pub cr_live: f64,
    pub cr_frozen: f64,
    /// (scene_id, candidate_id, collided live, collided frozen) per instance.
    pub paired: Vec<(String, String, bool, bool)>,
}

/// Runs the attack twice with identical seeds, neighbors live vs frozen.
pub fn frozen_neighbor_study(
    predictor: &(dyn DifferentiablePredictor + Sync),
    scenes: &[Scene],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<FrozenStudy> {
    let live_cfg = AttackConfig {
        freeze_neighbors: false,
        ..cfg.clone()
    };
    let frozen_cfg = AttackConfig {
        freeze_neighbors: true,
        ..cfg.clone()
    };
    let (live, live_stats) = attack_dataset(scenes, predictor, &live_cfg, seed)?;
    let (frozen, frozen_stats) = attack_dataset(scenes, predictor, &frozen_cfg, seed)?;
    let paired = live
        .iter()
        .zip(&frozen)
        .map(|(l, f)| (l.scene_id.clone(), l.candidate_id.clone(), l.collided, f.collided))
        .collect();
    Ok(FrozenStudy {
        cr_live: live_stats.cr_attacked,
        cr_frozen: frozen_stats.cr_attacked,
        paired,
    })
}

// ---------------------------------------------------------------------
// Neighbor-collision scan
// ---------------------------------------------------------------------

/// Counts instances where some neighbor pair (candidate excluded) is
/// predicted to collide after the attack but not before.
pub fn neighbor_collision_scan(reports: &[AttackReport], gamma: f64) -> usize {
    reports
        .iter()
        .filter(|r| {
            !neighbor_pair_collides(&r.predictions_before, r.candidate_index, gamma)
                && neighbor_pair_collides(&r.predictions_after, r.candidate_index, gamma)
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_synthetic, parallel_scene, SyntheticTemplate};
    use crate::model::{AttackMode, PredictionSet, Trajectory};
    use crate::predictors::ConstantVelocity;

    fn small_dataset() -> Vec<Scene> {
        generate_synthetic(SyntheticTemplate::Parallel, 0.0, 4, 7)
    }

    fn archive_from(
        scenes: &[Scene],
        cfg: &AttackConfig,
    ) -> (Vec<ArchiveRecord>, crate::attack::AttackSummaryStats) {
        let cv = ConstantVelocity::default();
        let (reports, stats) = attack_dataset(scenes, &cv, cfg, 11).unwrap();
        let archive = reports
            .iter()
            .map(|r| ArchiveRecord::from_report(r, cfg))
            .collect();
        (archive, stats)
    }

    #[test]
    fn self_transfer_reproduces_attacked_cr() {
        let scenes = small_dataset();
        let cfg = AttackConfig::default();
        let (archive, stats) = archive_from(&scenes, &cfg);
        let result =
            transfer_eval(&archive, &ConstantVelocity::default(), &scenes, cfg.gamma).unwrap();
        assert_eq!(result.cr, stats.cr_attacked);
        for (flag, rec) in result.flags.iter().zip(&archive) {
            assert_eq!(*flag, rec.collided);
        }
    }

    #[test]
    fn zero_perturbation_archive_gives_original_cr() {
        let scenes = small_dataset();
        let cfg = AttackConfig::default();
        let (mut archive, stats) = archive_from(&scenes, &cfg);
        for rec in &mut archive {
            rec.rows = vec![[0.0, 0.0]; rec.rows.len()];
        }
        let result =
            transfer_eval(&archive, &ConstantVelocity::default(), &scenes, cfg.gamma).unwrap();
        assert_eq!(result.cr, stats.cr_original);
    }

    #[test]
    fn transfer_rejects_unknown_scene_and_agent() {
        let scenes = small_dataset();
        let cfg = AttackConfig::default();
        let (archive, _) = archive_from(&scenes, &cfg);

        let mut bad_scene = archive.clone();
        bad_scene[0].scene_id = "nope".into();
        assert!(matches!(
            transfer_eval(&bad_scene, &ConstantVelocity::default(), &scenes, cfg.gamma),
            Err(Error::SceneMismatch(_))
        ));

        let mut bad_agent = archive;
        bad_agent[0].agent_id = "ghost".into();
        assert!(matches!(
            transfer_eval(&bad_agent, &ConstantVelocity::default(), &scenes, cfg.gamma),
            Err(Error::SceneMismatch(_))
        ));
    }

    #[test]
    fn zero_magnitude_sensitivity_is_zero() {
        let scenes = small_dataset();
        let curve =
            timestep_sensitivity(&ConstantVelocity::default(), &scenes, 0.0, 3, 0).unwrap();
        assert!(curve.prediction_change.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_velocity_sensitivity_lives_in_last_two_timesteps() {
        let scenes = small_dataset();
        let curve =
            timestep_sensitivity(&ConstantVelocity::default(), &scenes, 0.2, 5, 1).unwrap();
        let c = &curve.prediction_change;
        assert_eq!(c.len(), 9);
        for &v in &c[..7] {
            assert_eq!(v, 0.0);
        }
        assert!(c[7] > 0.0 && c[8] > 0.0);
        assert!(c[8] > c[..7].iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn archive_profile_means_row_norms() {
        let rec = |rows: Vec<[f64; 2]>| ArchiveRecord {
            scene_id: "s".into(),
            agent_id: "a".into(),
            mode: AttackMode::Soft,
            cfg_hash: "x".into(),
            rows,
            collided: true,
            collision_cell: None,
            p_avg: 0.0,
        };
        let a = rec(vec![[0.3, 0.4], [0.0, 0.0]]);
        let b = rec(vec![[0.0, 0.1], [0.0, 0.0]]);
        let profile = archive_timestep_profile(&[a, b]).unwrap();
        assert!((profile[0] - 0.3).abs() < 1e-12);
        assert_eq!(profile[1], 0.0);
        assert!(matches!(archive_timestep_profile(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn frozen_equals_live_for_constant_velocity() {
        let scenes = small_dataset();
        let study = frozen_neighbor_study(
            &ConstantVelocity::default(),
            &scenes,
            &AttackConfig::default(),
            2,
        )
        .unwrap();
        // constant-velocity neighbors never react, so freezing is a no-op
        assert_eq!(study.cr_live, study.cr_frozen);
        for (_, _, live, frozen) in &study.paired {
            assert_eq!(live, frozen);
        }
    }

    fn report_with_preds(before: PredictionSet, after: PredictionSet) -> AttackReport {
        AttackReport {
            scene_id: "s".into(),
            candidate_index: 0,
            candidate_id: "a".into(),
            collided: true,
            collision_cell: None,
            iterations_used: 1,
            p_avg: 0.0,
            perturbation: crate::model::Perturbation::zeros(9),
            predictions_before: before,
            predictions_after: after,
        }
    }

    #[test]
    fn neighbor_scan_counts_new_pair_collisions_only() {
        let traj = |p: [f64; 2]| Trajectory::new(vec![p; 12]);
        let apart = PredictionSet {
            trajectories: vec![traj([50.0, 50.0]), traj([0.0, 0.0]), traj([5.0, 0.0])],
        };
        let together = PredictionSet {
            trajectories: vec![traj([50.0, 50.0]), traj([0.0, 0.0]), traj([0.1, 0.0])],
        };
        // neighbors collide only after the attack
        let hit = report_with_preds(apart.clone(), together.clone());
        assert_eq!(neighbor_collision_scan(&[hit], 0.2), 1);
        // identical before/after
        let same = report_with_preds(apart.clone(), apart.clone());
        assert_eq!(neighbor_collision_scan(&[same], 0.2), 0);
        // already colliding before does not count
        let pre = report_with_preds(together.clone(), together);
        assert_eq!(neighbor_collision_scan(&[pre], 0.2), 0);
        // two-agent scenes have no neighbor pair
        let two = PredictionSet {
            trajectories: vec![traj([0.0, 0.0]), traj([0.1, 0.0])],
        };
        let two_report = report_with_preds(two.clone(), two);
        assert_eq!(neighbor_collision_scan(&[two_report], 0.2), 0);
    }

    #[test]
    fn zero_epoch_finetune_is_identity() {
        let scenes: Vec<Scene> = (0..3)
            .map(|i| parallel_scene(&format!("ft{i}"), 2, &[1.0, 1.0], &[i as f64 * 0.1, 0.0]))
            .collect();
        let start = PoolLiteParams::init(8, 4);
        let eval_cfg = AttackConfig {
            max_iters: 5,
            ..AttackConfig::default()
        };
        let attack_cfg = AttackConfig {
            epsilon: 0.03,
            max_iters: 5,
            ..AttackConfig::default()
        };
        let cfg = FinetuneConfig {
            epochs: 0,
            ..FinetuneConfig::default()
        };
        let out =
            adversarial_finetune(&start, 12, &scenes, &scenes, &attack_cfg, &eval_cfg, &cfg)
                .unwrap();
        assert_eq!(out.params, start);
        assert_eq!(out.before, out.after);
    }

    #[test]
    fn finetune_rejects_empty_inputs() {
        let start = PoolLiteParams::init(8, 0);
        let cfg = FinetuneConfig::default();
        let attack_cfg = AttackConfig::default();
        assert!(matches!(
            adversarial_finetune(&start, 12, &[], &[], &attack_cfg, &attack_cfg, &cfg),
            Err(Error::EmptyDataset)
        ));
    }
}
