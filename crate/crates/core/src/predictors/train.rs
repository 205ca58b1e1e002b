//! Supervised training of the pool-lite predictor with mini-batch Adam on
//! mean-squared displacement against ground-truth futures.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::Scene;

use super::pool_lite::{pool_lite_forward, PoolLiteParams};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 3e-3,
            batch_size: 8,
            hidden: 32,
            seed: 0,
        }
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut PoolLiteParams, grads: &[Vec<f64>], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for (k, (_, tensor)) in params.tensors_mut().into_iter().enumerate() {
            for (i, g) in grads[k].iter().enumerate() {
                self.m[k][i] = B1 * self.m[k][i] + (1.0 - B1) * g;
                self.v[k][i] = B2 * self.v[k][i] + (1.0 - B2) * g * g;
                let mh = self.m[k][i] / bc1;
                let vh = self.v[k][i] / bc2;
                tensor.data[i] -= lr * mh / (vh.sqrt() + EPS);
            }
        }
    }
}

/// One forward pass and parameter gradient for a single scene. Returns the
/// per-coordinate mean squared displacement and d(loss)/d(params).
fn scene_loss_and_grads(
    params: &PoolLiteParams,
    scene: &Scene,
    t_pred: usize,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, with_grads);
    let taped = pool_lite_forward(&mut tape, scene, &vars, t_pred, None)?;

    let mut diffs = Vec::new();
    for (i, agent) in scene.agents.iter().enumerate() {
        let future = agent
            .future
            .as_ref()
            .ok_or_else(|| Error::NoGroundTruth(agent.id.clone()))?;
        for t in 0..t_pred {
            let target = tape.constant(&[2], future.points[t].to_vec());
            diffs.push(tape.sub(taped.positions[i][t], target)?);
        }
    }
    let stacked = tape.stack(&diffs)?;
    let sq = tape.mul(stacked, stacked)?;
    let loss = tape.mean(sq);
    let loss_value = tape.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    if !with_grads {
        return Ok((loss_value, None));
    }
    let grads = tape.backward(loss)?;
    let out = PoolLiteParams::var_list(&vars)
        .into_iter()
        .map(|(_, v)| grads.get_or_zeros(v, tape.value(v).len()))
        .collect();
    Ok((loss_value, Some(out)))
}

/// Mean training loss over a slice of scenes without updating parameters.
pub fn mean_loss(params: &PoolLiteParams, scenes: &[Scene], t_pred: usize) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for s in scenes {
        total += scene_loss_and_grads(params, s, t_pred, false)?.0;
    }
    Ok(total / scenes.len() as f64)
}

/// Trains pool-lite from a seeded initialization; returns the final
/// parameter snapshot and the per-epoch mean loss curve.
pub fn train_pool_lite(scenes: &[Scene], cfg: &TrainConfig) -> Result<(PoolLiteParams, Vec<f64>)> {
    fit(None, scenes, cfg)
}

/// Continues training from an existing parameter snapshot (`cfg.hidden`
/// is ignored; the snapshot fixes the architecture). The optimizer state
/// starts fresh.
pub fn finetune_pool_lite(
    start: &PoolLiteParams,
    scenes: &[Scene],
    cfg: &TrainConfig,
) -> Result<(PoolLiteParams, Vec<f64>)> {
    fit(Some(start.clone()), scenes, cfg)
}

fn fit(
    start: Option<PoolLiteParams>,
    scenes: &[Scene],
    cfg: &TrainConfig,
) -> Result<(PoolLiteParams, Vec<f64>)> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t_pred = scenes
        .iter()
        .find_map(|s| s.agents.iter().find_map(|a| a.future.as_ref().map(|f| f.len())))
        .ok_or_else(|| Error::NoGroundTruth("dataset".into()))?;
    for s in scenes {
        s.validate()?;
        if !s.has_futures() {
            return Err(Error::NoGroundTruth(s.scene_id.clone()));
        }
    }

    let mut params = start.unwrap_or_else(|| PoolLiteParams::init(cfg.hidden, cfg.seed));
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.data.len()).collect();
    let mut adam = Adam::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xadad_adad);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (loss, grads) = scene_loss_and_grads(&params, &scenes[idx], t_pred, true)?;
                batch_loss += loss;
                for (a, g) in acc.iter_mut().zip(grads.expect("gradients requested")) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for a in &mut acc {
                for x in a.iter_mut() {
                    *x *= scale;
                }
            }
            adam.step(&mut params, &acc, cfg.learning_rate);
            epoch_loss += batch_loss * scale;
            batches += 1;
        }
        curve.push(epoch_loss / batches as f64);
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
    }
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_synthetic, SyntheticTemplate};
    use crate::model::metric_ade_fde;
    use crate::predictors::{PoolLite, Predictor};

    fn training_scenes(count: usize, seed: u64) -> Vec<Scene> {
        generate_synthetic(SyntheticTemplate::Parallel, 0.01, count, seed)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let scenes = training_scenes(4, 0);
        let cfg = TrainConfig {
            epochs: 0,
            hidden: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let (params, curve) = train_pool_lite(&scenes, &cfg).unwrap();
        assert_eq!(params, PoolLiteParams::init(8, 3));
        assert!(curve.is_empty());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let scenes = training_scenes(4, 1);
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            hidden: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let (params, _) = train_pool_lite(&scenes, &cfg).unwrap();
        assert_eq!(params, PoolLiteParams::init(8, 3));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            train_pool_lite(&[], &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn missing_futures_are_rejected() {
        let mut scenes = training_scenes(2, 2);
        scenes[0].agents[0].future = None;
        assert!(train_pool_lite(&scenes, &TrainConfig::default()).is_err());
    }

    #[test]
    fn training_on_straight_walks_reaches_low_ade() {
        let train = training_scenes(60, 10);
        let holdout = training_scenes(20, 99);
        let cfg = TrainConfig {
            epochs: 120,
            learning_rate: 3e-3,
            batch_size: 8,
            hidden: 16,
            seed: 0,
        };
        let (params, curve) = train_pool_lite(&train, &cfg).unwrap();

        // smoothed curve is non-increasing up to 5% noise
        let window = 3usize;
        let smooth: Vec<f64> = (0..curve.len())
            .map(|i| {
                let lo = i.saturating_sub(window);
                let s = &curve[lo..=i];
                s.iter().sum::<f64>() / s.len() as f64
            })
            .collect();
        // clear overall progress, with only occasional small upticks in
        // the smoothed curve (Adam wobbles near the plateau)
        assert!(
            *smooth.last().unwrap() < smooth[0] * 0.2,
            "final loss {} vs initial {}",
            smooth.last().unwrap(),
            smooth[0]
        );
        let spikes = smooth
            .windows(2)
            .filter(|w| w[1] > w[0] * 1.05 + 1e-4)
            .count();
        assert!(spikes <= curve.len() / 10, "{spikes} loss-curve spikes");

        let model = PoolLite::new(params, 12);
        let mut ade_sum = 0.0;
        for scene in &holdout {
            let preds = model.predict(scene).unwrap();
            let (ade, _) = metric_ade_fde(&preds, scene, false).unwrap();
            ade_sum += ade;
        }
        let mean_ade = ade_sum / holdout.len() as f64;
        assert!(mean_ade < 0.1, "held-out ADE {mean_ade}");
    }
}
