//! The predictor zoo: differentiable predictors attackable by gradient
//! (constant-velocity, pool-lite) and a rule-based transfer target
//! (social forces).

mod constant_velocity;
mod pool_lite;
mod social_forces;
mod train;

pub use constant_velocity::ConstantVelocity;
pub use pool_lite::{PoolLite, PoolLiteParams, ParamTensor};
pub use social_forces::{SocialForces, SocialForcesParams};
pub use train::{finetune_pool_lite, mean_loss, train_pool_lite, TrainConfig};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{PredictionSet, Scene, Trajectory};

/// A trajectory predictor f: scene -> per-agent futures.
pub trait Predictor: Send + Sync {
    fn name(&self) -> &str;
    /// Whether predictions can be tape-recorded for gradient attacks.
    fn differentiable(&self) -> bool;
    /// Predicts T_pred positions for every agent in the scene.
    fn predict(&self, scene: &Scene) -> Result<PredictionSet>;
}

/// Predictors whose forward pass can be recorded on a [`Tape`] so attack
/// losses backpropagate to a perturbation of the candidate observation.
pub trait DifferentiablePredictor: Predictor {
    /// Taped forward pass. `r` is a [T_obs, 2] tape node added to the
    /// candidate agent's observation; gradients flow back into it.
    fn predict_taped(&self, tape: &mut Tape, scene: &Scene, r: Var) -> Result<TapedPrediction>;
}

/// Predicted positions as tape nodes: `positions[agent][t]` has shape [2].
pub struct TapedPrediction {
    pub positions: Vec<Vec<Var>>,
}

impl TapedPrediction {
    pub fn to_prediction_set(&self, tape: &Tape) -> PredictionSet {
        PredictionSet {
            trajectories: self
                .positions
                .iter()
                .map(|agent| {
                    Trajectory::new(
                        agent
                            .iter()
                            .map(|&v| {
                                let d = tape.value(v);
                                [d[0], d[1]]
                            })
                            .collect(),
                    )
                })
                .collect(),
        }
    }
}
