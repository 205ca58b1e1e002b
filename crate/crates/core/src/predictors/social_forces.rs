//! Rule-based social-forces predictor: goal attraction with relaxation
//! plus exponential inter-agent repulsion, integrated with symplectic
//! Euler. Collision avoidance is explicit, which makes it a transfer
//! target rather than an attack substrate; it is not differentiable.

use crate::error::{Error, Result};
use crate::model::{PredictionSet, Scene, Trajectory};

use super::Predictor;

/// Force-model parameters. The combined body radius of an agent pair is
/// fixed at 0.6 m and folded into the repulsion term.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialForcesParams {
    /// Desired speed in m/s; `None` uses each agent's last observed speed.
    pub v0: Option<f64>,
    /// Relaxation time toward the desired velocity, seconds.
    pub tau: f64,
    /// Repulsion strength, m/s^2.
    pub a: f64,
    /// Repulsion range, meters.
    pub b: f64,
    /// Integration step, seconds (one frame at 2.5 fps).
    pub dt: f64,
}

/// Combined body radius of an interacting pair, meters.
const PAIR_RADIUS: f64 = 0.6;

impl Default for SocialForcesParams {
    /// tau and dt follow the frame convention; A and B were calibrated on
    /// the two-agent head-on template (6 m apart at 1 m/s must keep a
    /// minimum predicted distance above 0.2 m) and frozen.
    fn default() -> Self {
        SocialForcesParams {
            v0: None,
            tau: 0.5,
            a: 4.0,
            b: 0.4,
            dt: 0.4,
        }
    }
}

impl SocialForcesParams {
    pub fn validate(&self) -> Result<()> {
        let positive = self.tau > 0.0 && self.a >= 0.0 && self.b > 0.0 && self.dt > 0.0;
        if !positive || self.v0.map_or(false, |v| v <= 0.0) {
            return Err(Error::Config("social-forces parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SocialForces {
    pub params: SocialForcesParams,
    pub t_pred: usize,
}

impl SocialForces {
    pub fn new(params: SocialForcesParams, t_pred: usize) -> Self {
        SocialForces { params, t_pred }
    }
}

impl Default for SocialForces {
    fn default() -> Self {
        SocialForces::new(SocialForcesParams::default(), 12)
    }
}

impl Predictor for SocialForces {
    fn name(&self) -> &str {
        "social-forces"
    }

    fn differentiable(&self) -> bool {
        false
    }

    fn predict(&self, scene: &Scene) -> Result<PredictionSet> {
        let t_obs = scene.t_obs();
        if t_obs < 2 {
            return Err(Error::InsufficientHistory);
        }
        self.params.validate()?;
        let p = &self.params;
        let n = scene.n();

        let mut pos: Vec<[f64; 2]> = Vec::with_capacity(n);
        let mut vel: Vec<[f64; 2]> = Vec::with_capacity(n); // m/s
        let mut goal: Vec<[f64; 2]> = Vec::with_capacity(n);
        let mut speed: Vec<f64> = Vec::with_capacity(n);
        for a in &scene.agents {
            let last = a.observation.points[t_obs - 1];
            let prev = a.observation.points[t_obs - 2];
            let step = [last[0] - prev[0], last[1] - prev[1]];
            let v = [step[0] / p.dt, step[1] / p.dt];
            pos.push(last);
            vel.push(v);
            // goal frozen at prediction start: straight continuation
            goal.push([
                last[0] + step[0] * self.t_pred as f64,
                last[1] + step[1] * self.t_pred as f64,
            ]);
            speed.push(p.v0.unwrap_or_else(|| (v[0] * v[0] + v[1] * v[1]).sqrt()));
        }

        let mut out: Vec<Vec<[f64; 2]>> = vec![Vec::with_capacity(self.t_pred); n];
        for _ in 0..self.t_pred {
            let mut acc = vec![[0.0f64; 2]; n];
            for i in 0..n {
                // goal attraction with relaxation
                let to_goal = [goal[i][0] - pos[i][0], goal[i][1] - pos[i][1]];
                let dist_goal = (to_goal[0] * to_goal[0] + to_goal[1] * to_goal[1]).sqrt();
                let desired = if dist_goal > 1e-9 {
                    [
                        speed[i] * to_goal[0] / dist_goal,
                        speed[i] * to_goal[1] / dist_goal,
                    ]
                } else {
                    [0.0, 0.0]
                };
                acc[i][0] += (desired[0] - vel[i][0]) / p.tau;
                acc[i][1] += (desired[1] - vel[i][1]) / p.tau;

                // exponential repulsion from every other agent
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let away = [pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]];
                    let d = (away[0] * away[0] + away[1] * away[1]).sqrt();
                    if d < 1e-9 {
                        continue;
                    }
                    let mag = p.a * ((PAIR_RADIUS - d) / p.b).exp();
                    acc[i][0] += mag * away[0] / d;
                    acc[i][1] += mag * away[1] / d;
                }
            }
            for i in 0..n {
                vel[i][0] += acc[i][0] * p.dt;
                vel[i][1] += acc[i][1] * p.dt;
                pos[i][0] += vel[i][0] * p.dt;
                pos[i][1] += vel[i][1] * p.dt;
                out[i].push(pos[i]);
            }
        }
        Ok(PredictionSet {
            trajectories: out.into_iter().map(Trajectory::new).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Agent;
    use crate::predictors::ConstantVelocity;

    fn agent(id: &str, start: [f64; 2], step: [f64; 2]) -> Agent {
        Agent {
            id: id.into(),
            observation: Trajectory::new(
                (0..9)
                    .map(|t| [start[0] + step[0] * t as f64, start[1] + step[1] * t as f64])
                    .collect(),
            ),
            future: None,
        }
    }

    /// Two agents walking straight at each other, 6 m apart at the last
    /// observed frame, 1 m/s each.
    fn head_on_scene() -> Scene {
        Scene {
            scene_id: "head-on".into(),
            agents: vec![
                agent("a", [0.0, 0.0], [0.4, 0.0]),
                agent("b", [12.4, 0.0], [-0.4, 0.0]),
            ],
            candidate_index: 0,
        }
    }

    fn min_pairwise(p: &PredictionSet) -> f64 {
        (0..p.t_pred())
            .map(|t| {
                crate::model::dist(p.trajectories[0].points[t], p.trajectories[1].points[t])
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn single_agent_matches_constant_velocity() {
        let scene = Scene {
            scene_id: "solo".into(),
            agents: vec![agent("a", [0.0, 0.0], [0.4, 0.0])],
            candidate_index: 0,
        };
        let sf = SocialForces::default().predict(&scene).unwrap();
        let cv = ConstantVelocity::default().predict(&scene).unwrap();
        for t in 0..12 {
            let a = sf.trajectories[0].points[t];
            let b = cv.trajectories[0].points[t];
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn head_on_agents_keep_distance() {
        let scene = head_on_scene();
        let sep_start = crate::model::dist(
            scene.agents[0].observation.last(),
            scene.agents[1].observation.last(),
        );
        assert!((sep_start - 6.0).abs() < 1e-9);
        let sf = SocialForces::default().predict(&scene).unwrap();
        let min_sf = min_pairwise(&sf);
        assert!(min_sf > 0.2, "social forces min distance {min_sf}");

        // strictly better than constant velocity on the same scene
        let cv = ConstantVelocity::default().predict(&scene).unwrap();
        assert!(min_sf > min_pairwise(&cv));
    }

    #[test]
    fn zero_repulsion_never_deviates_laterally() {
        let mut params = SocialForcesParams::default();
        params.a = 0.0;
        let scene = Scene {
            scene_id: "s".into(),
            agents: vec![
                agent("a", [0.0, 0.0], [0.4, 0.0]),
                agent("b", [0.0, 1.0], [0.4, 0.0]),
            ],
            candidate_index: 0,
        };
        let p = SocialForces::new(params, 12).predict(&scene).unwrap();
        for t in 0..12 {
            assert!((p.trajectories[0].points[t][1]).abs() < 1e-9);
            assert!((p.trajectories[1].points[t][1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn output_shape_and_finiteness() {
        let scene = head_on_scene();
        let p = SocialForces::default().predict(&scene).unwrap();
        assert_eq!(p.n(), 2);
        assert!(p.trajectories.iter().all(|t| t.len() == 12 && t.is_finite()));
    }
}
