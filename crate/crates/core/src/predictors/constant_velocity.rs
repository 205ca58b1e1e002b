//! Constant-velocity extrapolation: each agent continues with its last
//! observed per-frame displacement. Differentiable sanity predictor and
//! the substrate for the brute-force attack oracle.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{PredictionSet, Scene, Trajectory};

use super::{DifferentiablePredictor, Predictor, TapedPrediction};

#[derive(Debug, Clone)]
pub struct ConstantVelocity {
    pub t_pred: usize,
}

impl ConstantVelocity {
    pub fn new(t_pred: usize) -> Self {
        ConstantVelocity { t_pred }
    }
}

impl Default for ConstantVelocity {
    fn default() -> Self {
        ConstantVelocity::new(12)
    }
}

impl Predictor for ConstantVelocity {
    fn name(&self) -> &str {
        "cv"
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn predict(&self, scene: &Scene) -> Result<PredictionSet> {
        let t_obs = scene.t_obs();
        if t_obs < 2 {
            return Err(Error::InsufficientHistory);
        }
        let trajectories = scene
            .agents
            .iter()
            .map(|a| {
                let last = a.observation.points[t_obs - 1];
                let prev = a.observation.points[t_obs - 2];
                let v = [last[0] - prev[0], last[1] - prev[1]];
                Trajectory::new(
                    (1..=self.t_pred)
                        .map(|t| [last[0] + t as f64 * v[0], last[1] + t as f64 * v[1]])
                        .collect(),
                )
            })
            .collect();
        Ok(PredictionSet { trajectories })
    }
}

impl DifferentiablePredictor for ConstantVelocity {
    fn predict_taped(&self, tape: &mut Tape, scene: &Scene, r: Var) -> Result<TapedPrediction> {
        let t_obs = scene.t_obs();
        if t_obs < 2 {
            return Err(Error::InsufficientHistory);
        }
        if tape.shape(r) != [t_obs, 2] {
            return Err(Error::Shape(format!(
                "perturbation shape {:?}, expected [{t_obs}, 2]",
                tape.shape(r)
            )));
        }
        let mut positions = Vec::with_capacity(scene.n());
        for (i, agent) in scene.agents.iter().enumerate() {
            let flat: Vec<f64> = agent.observation.points.iter().flatten().copied().collect();
            let obs_const = tape.constant(&[t_obs, 2], flat);
            let obs = if i == scene.candidate_index {
                tape.add(obs_const, r)?
            } else {
                obs_const
            };
            let last = tape.row(obs, t_obs - 1)?;
            let prev = tape.row(obs, t_obs - 2)?;
            let v = tape.sub(last, prev)?;
            let mut steps = Vec::with_capacity(self.t_pred);
            for t in 1..=self.t_pred {
                let vt = tape.scale(v, t as f64);
                steps.push(tape.add(last, vt)?);
            }
            positions.push(steps);
        }
        Ok(TapedPrediction { positions })
    }
}
