//! Pool-lite: a small recurrent predictor with neighbor max-pooling.
//!
//! Architecture: a single tanh recurrent cell (hidden size H) encodes each
//! agent's observed velocity sequence; at every decoding step each
//! neighbor's relative position and relative velocity are embedded by a
//! two-layer perceptron and max-pooled; the pooled feature is concatenated
//! with the agent's hidden state and a two-layer decoder emits the next
//! per-frame velocity, which is integrated to a position. Decoding is
//! autoregressive and re-pools at every step from each agent's latest
//! predicted position, so all agents react jointly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{PredictionSet, Scene};

use super::{DifferentiablePredictor, Predictor, TapedPrediction};

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    fn init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        ParamTensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    fn zeros(shape: &[usize]) -> Self {
        ParamTensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

/// Pool-lite parameter snapshot. Immutable during prediction; training
/// produces a new snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolLiteParams {
    pub h: usize,
    pub seed: u64,
    /// Encoder recurrent cell.
    pub w_ih: ParamTensor,
    pub w_hh: ParamTensor,
    pub b_h: ParamTensor,
    /// Neighbor embedder (relative position + relative velocity -> H).
    pub w_n1: ParamTensor,
    pub b_n1: ParamTensor,
    pub w_n2: ParamTensor,
    pub b_n2: ParamTensor,
    /// Decoder (hidden + pooled -> velocity).
    pub w_d1: ParamTensor,
    pub b_d1: ParamTensor,
    pub w_d2: ParamTensor,
    pub b_d2: ParamTensor,
}

impl PoolLiteParams {
    /// Seeded uniform initialization in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn init(h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PoolLiteParams {
            h,
            seed,
            w_ih: ParamTensor::init(&[h, 2], 2, &mut rng),
            w_hh: ParamTensor::init(&[h, h], h, &mut rng),
            b_h: ParamTensor::zeros(&[h]),
            w_n1: ParamTensor::init(&[h, 4], 4, &mut rng),
            b_n1: ParamTensor::zeros(&[h]),
            w_n2: ParamTensor::init(&[h, h], h, &mut rng),
            b_n2: ParamTensor::zeros(&[h]),
            w_d1: ParamTensor::init(&[h, 2 * h], 2 * h, &mut rng),
            b_d1: ParamTensor::zeros(&[h]),
            w_d2: ParamTensor::init(&[2, h], h, &mut rng),
            b_d2: ParamTensor::zeros(&[2]),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &ParamTensor)> {
        vec![
            ("w_ih", &self.w_ih),
            ("w_hh", &self.w_hh),
            ("b_h", &self.b_h),
            ("w_n1", &self.w_n1),
            ("b_n1", &self.b_n1),
            ("w_n2", &self.w_n2),
            ("b_n2", &self.b_n2),
            ("w_d1", &self.w_d1),
            ("b_d1", &self.b_d1),
            ("w_d2", &self.w_d2),
            ("b_d2", &self.b_d2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut ParamTensor)> {
        vec![
            ("w_ih", &mut self.w_ih),
            ("w_hh", &mut self.w_hh),
            ("b_h", &mut self.b_h),
            ("w_n1", &mut self.w_n1),
            ("b_n1", &mut self.b_n1),
            ("w_n2", &mut self.w_n2),
            ("b_n2", &mut self.b_n2),
            ("w_d1", &mut self.w_d1),
            ("b_d1", &mut self.b_d1),
            ("w_d2", &mut self.w_d2),
            ("b_d2", &mut self.b_d2),
        ]
    }

    /// Hash of the architecture descriptor (name, hidden size, tensor
    /// shapes). Checkpoint loading rejects mismatches.
    pub fn arch_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"pool-lite-v1");
        hasher.update(self.h.to_le_bytes());
        for (name, t) in self.tensors() {
            hasher.update(name.as_bytes());
            for d in &t.shape {
                hasher.update(d.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    /// Persists the snapshot as a versioned JSON checkpoint.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: 1,
            arch: "pool-lite".into(),
            arch_hash: self.arch_hash(),
            h: self.h,
            seed: self.seed,
            tensors: self
                .tensors()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        };
        let json = serde_json::to_string(&ckpt)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != 1 || ckpt.arch != "pool-lite" {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint: version {} arch {}",
                ckpt.version, ckpt.arch
            )));
        }
        let mut params = PoolLiteParams::init(ckpt.h, ckpt.seed);
        for (name, tensor) in params.tensors_mut() {
            let stored = ckpt
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if stored.shape != tensor.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    stored.shape, tensor.shape
                )));
            }
            *tensor = stored.clone();
        }
        if ckpt.arch_hash != params.arch_hash() {
            return Err(Error::Checkpoint(format!(
                "architecture hash mismatch: checkpoint {} vs expected {}",
                ckpt.arch_hash,
                params.arch_hash()
            )));
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    arch: String,
    arch_hash: String,
    h: usize,
    seed: u64,
    tensors: BTreeMap<String, ParamTensor>,
}

/// Tape handles for every parameter tensor.
pub(crate) struct PoolLiteVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_h: Var,
    pub w_n1: Var,
    pub b_n1: Var,
    pub w_n2: Var,
    pub b_n2: Var,
    pub w_d1: Var,
    pub b_d1: Var,
    pub w_d2: Var,
    pub b_d2: Var,
}

impl PoolLiteParams {
    pub(crate) fn to_tape(&self, tape: &mut Tape, requires_grad: bool) -> PoolLiteVars {
        let mut mk = |t: &ParamTensor| tape.leaf(&t.shape, t.data.clone(), requires_grad);
        PoolLiteVars {
            w_ih: mk(&self.w_ih),
            w_hh: mk(&self.w_hh),
            b_h: mk(&self.b_h),
            w_n1: mk(&self.w_n1),
            b_n1: mk(&self.b_n1),
            w_n2: mk(&self.w_n2),
            b_n2: mk(&self.b_n2),
            w_d1: mk(&self.w_d1),
            b_d1: mk(&self.b_d1),
            w_d2: mk(&self.w_d2),
            b_d2: mk(&self.b_d2),
        }
    }

    pub(crate) fn var_list(vars: &PoolLiteVars) -> Vec<(&'static str, Var)> {
        vec![
            ("w_ih", vars.w_ih),
            ("w_hh", vars.w_hh),
            ("b_h", vars.b_h),
            ("w_n1", vars.w_n1),
            ("b_n1", vars.b_n1),
            ("w_n2", vars.w_n2),
            ("b_n2", vars.b_n2),
            ("w_d1", vars.w_d1),
            ("b_d1", vars.b_d1),
            ("w_d2", vars.w_d2),
            ("b_d2", vars.b_d2),
        ]
    }
}

/// The predictor wrapper around a parameter snapshot.
#[derive(Debug, Clone)]
pub struct PoolLite {
    pub params: PoolLiteParams,
    pub t_pred: usize,
}

impl PoolLite {
    pub fn new(params: PoolLiteParams, t_pred: usize) -> Self {
        PoolLite { params, t_pred }
    }
}

fn linear(tape: &mut Tape, w: Var, x: Var, b: Var) -> Result<Var> {
    let wx = tape.matmul(w, x)?;
    tape.add(wx, b)
}

/// Full taped forward pass. `r` optionally perturbs the candidate agent's
/// observation; `param_vars` lets training expose parameters as leaves.
pub(crate) fn pool_lite_forward(
    tape: &mut Tape,
    scene: &Scene,
    vars: &PoolLiteVars,
    t_pred: usize,
    r: Option<Var>,
) -> Result<TapedPrediction> {
    let t_obs = scene.t_obs();
    if t_obs < 2 {
        return Err(Error::InsufficientHistory);
    }
    if let Some(rv) = r {
        if tape.shape(rv) != [t_obs, 2] {
            return Err(Error::Shape(format!(
                "perturbation shape {:?}, expected [{t_obs}, 2]",
                tape.shape(rv)
            )));
        }
    }
    let n = scene.n();
    let h_size = tape.shape(vars.b_h)[0];

    // encode observed velocity sequences
    let mut hidden: Vec<Var> = Vec::with_capacity(n);
    let mut pos: Vec<Var> = Vec::with_capacity(n);
    let mut vel: Vec<Var> = Vec::with_capacity(n);
    for (i, agent) in scene.agents.iter().enumerate() {
        let flat: Vec<f64> = agent.observation.points.iter().flatten().copied().collect();
        let obs_const = tape.constant(&[t_obs, 2], flat);
        let obs = match r {
            Some(rv) if i == scene.candidate_index => tape.add(obs_const, rv)?,
            _ => obs_const,
        };
        let tail = tape.slice_rows(obs, 1, t_obs - 1)?;
        let head = tape.slice_rows(obs, 0, t_obs - 1)?;
        let vels = tape.sub(tail, head)?; // [t_obs-1, 2]

        let mut h = tape.constant(&[h_size], vec![0.0; h_size]);
        for t in 0..t_obs - 1 {
            let v_t = tape.row(vels, t)?;
            let ih = linear(tape, vars.w_ih, v_t, vars.b_h)?;
            let hh = tape.matmul(vars.w_hh, h)?;
            let pre = tape.add(ih, hh)?;
            h = tape.tanh(pre);
        }
        hidden.push(h);
        pos.push(tape.row(obs, t_obs - 1)?);
        vel.push(tape.row(vels, t_obs - 2)?);
    }

    // autoregressive decoding with re-pooling at every step
    let mut positions: Vec<Vec<Var>> = vec![Vec::with_capacity(t_pred); n];
    for _step in 0..t_pred {
        let mut new_vel = Vec::with_capacity(n);
        for i in 0..n {
            let mut embeds = Vec::with_capacity(n - 1);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let rel_p = tape.sub(pos[j], pos[i])?;
                let rel_v = tape.sub(vel[j], vel[i])?;
                let feat = tape.concat(&[rel_p, rel_v])?; // [4]
                let e1 = linear(tape, vars.w_n1, feat, vars.b_n1)?;
                let e1 = tape.relu(e1);
                let e2 = linear(tape, vars.w_n2, e1, vars.b_n2)?;
                embeds.push(e2);
            }
            let pooled = if embeds.is_empty() {
                // empty neighbor pool is defined as the zero vector
                tape.constant(&[h_size], vec![0.0; h_size])
            } else {
                let stacked = tape.stack(&embeds)?;
                tape.max_axis0(stacked)?
            };
            let dec_in = tape.concat(&[hidden[i], pooled])?; // [2H]
            let d1 = linear(tape, vars.w_d1, dec_in, vars.b_d1)?;
            let d1 = tape.relu(d1);
            let v_out = linear(tape, vars.w_d2, d1, vars.b_d2)?; // [2]
            new_vel.push(v_out);
        }
        // synchronous update of positions, velocities and hidden states
        for i in 0..n {
            let p_next = tape.add(pos[i], new_vel[i])?;
            positions[i].push(p_next);
            pos[i] = p_next;
            vel[i] = new_vel[i];
            let ih = linear(tape, vars.w_ih, new_vel[i], vars.b_h)?;
            let hh = tape.matmul(vars.w_hh, hidden[i])?;
            let pre = tape.add(ih, hh)?;
            hidden[i] = tape.tanh(pre);
        }
    }
    Ok(TapedPrediction { positions })
}

impl Predictor for PoolLite {
    fn name(&self) -> &str {
        "pool-lite"
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn predict(&self, scene: &Scene) -> Result<PredictionSet> {
        let mut tape = Tape::new();
        let vars = self.params.to_tape(&mut tape, false);
        let taped = pool_lite_forward(&mut tape, scene, &vars, self.t_pred, None)?;
        Ok(taped.to_prediction_set(&tape))
    }
}

impl DifferentiablePredictor for PoolLite {
    fn predict_taped(&self, tape: &mut Tape, scene: &Scene, r: Var) -> Result<TapedPrediction> {
        let vars = self.params.to_tape(tape, false);
        pool_lite_forward(tape, scene, &vars, self.t_pred, Some(r))
    }
}
