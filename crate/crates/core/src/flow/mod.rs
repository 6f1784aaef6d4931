//! Rectified flow: the straight noise/data path, its velocity-regression
//! loss, an Euler sampler, and reward backpropagation through the sampler.
//!
//! Convention: `t = 1` is pure noise and `t = 0` is data,
//! `x_t = (1 - t)·x0 + t·eps`, target velocity `eps - x0`, and each Euler step
//! moves against the predicted velocity.

mod finetune;
mod optim;
mod reward;

pub use finetune::{
    reward_finetune, truncated_reward_objective, LogRow, Prompt, RewardObjective, RewardTrainerConfig, TrainingLog,
};
pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};
pub use reward::{brightness_target, center_mass, combine_rewards, smoothness, DecoderStub, RewardKind, RewardSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LoraAdapters, Model, TextFeatures, Weights};
use crate::numerics::{Graph, Tensor, Var};

/// Strictly decreasing time grid `1 = t_0 > t_1 > … > t_T = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSchedule {
    timesteps: Vec<f64>,
}

impl FlowSchedule {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("sampling needs at least one step"));
        }
        Self::new((0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect())
    }

    pub fn new(timesteps: Vec<f64>) -> Result<Self> {
        let ok = timesteps.len() >= 2
            && timesteps[0] == 1.0
            && *timesteps.last().unwrap() == 0.0
            && timesteps.windows(2).all(|w| w[0] > w[1]);
        if !ok {
            return Err(Error::config("timesteps must decrease strictly from 1 to 0"));
        }
        Ok(Self { timesteps })
    }

    /// Number of Euler steps `T`.
    pub fn steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    /// `(t_i, t_i - t_{i+1})` for step `i`.
    pub fn step(&self, i: usize) -> (f64, f64) {
        (self.timesteps[i], self.timesteps[i] - self.timesteps[i + 1])
    }
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            what: "t",
            value: t,
            expected: "[0, 1]",
        })
    }
}

pub fn add_noise(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "add_noise",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    x0.zip_with(eps, "add_noise", |a, b| (1.0 - t) * a + t * b)
}

/// Anything that predicts a velocity for a state at time `t`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, text: &TextFeatures, t: f64) -> Result<Tensor>;
}

impl VelocityField for Model {
    fn velocity(&self, x: &Tensor, text: &TextFeatures, t: f64) -> Result<Tensor> {
        self.forward(x, text, t)
    }
}

/// A model running with its adapters attached.
pub struct Adapted<'a> {
    pub model: &'a Model,
    pub adapters: &'a LoraAdapters,
}

impl VelocityField for Adapted<'_> {
    fn velocity(&self, x: &Tensor, text: &TextFeatures, t: f64) -> Result<Tensor> {
        self.model.forward_with(x, text, t, Some(self.adapters))
    }
}

/// Wraps a closure as a velocity field.
pub struct FnField<F>(pub F);

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VelocityField for FnField<F> {
    fn velocity(&self, x: &Tensor, _text: &TextFeatures, t: f64) -> Result<Tensor> {
        (self.0)(x, t)
    }
}

/// Euler integration from `t = 1` to `t = 0`. Returns the final state and the
/// whole trajectory (`T + 1` states, starting with `x_T`).
pub fn euler_sample(field: &impl VelocityField, x_t: &Tensor, text: &TextFeatures, sched: &FlowSchedule) -> Result<(Tensor, Vec<Tensor>)> {
    if !x_t.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    let mut traj = Vec::with_capacity(sched.steps() + 1);
    traj.push(x_t.clone());
    let mut x = x_t.clone();
    for i in 0..sched.steps() {
        let (t, dt) = sched.step(i);
        let v = field.velocity(&x, text, t).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step: i + 1 },
            other => other,
        })?;
        x = x.zip_with(&v, "euler", |a, b| a - dt * b)?;
        if !x.is_finite() {
            return Err(Error::Diverged { step: i + 1 });
        }
        traj.push(x.clone());
    }
    Ok((x, traj))
}

/// Records the rectified-flow loss `mean((v_θ(x_t, t) - (eps - x0))²)`.
pub fn rf_loss_graph(g: &Graph, model: &Model, w: &Weights, x0: &Tensor, text: &TextFeatures, t: f64, eps: &Tensor) -> Result<Var> {
    let xt = g.constant(add_noise(x0, eps, t)?);
    let target = g.constant(eps.zip_with(x0, "rf_target", |e, x| e - x)?);
    let pred = model.forward_graph(g, w, xt, text, t)?;
    let diff = g.sub(pred, target)?;
    g.mean(g.square(diff)?)
}

pub fn rf_loss(model: &Model, x0: &Tensor, text: &TextFeatures, t: f64, eps: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let bound = g.bind_frozen(model.params());
    let loss = rf_loss_graph(&g, model, &Weights::base(&bound), x0, text, t, eps)?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Trains `model` with the rectified-flow loss on a fixed set of data
/// samples using Adam. Each step draws one sample, fresh noise and
/// `t ~ U(0, 1)` from the seeded stream. Returns the per-step loss.
pub fn train_rectified_flow(model: &mut Model, data: &[Tensor], text: &TextFeatures, cfg: &RfTrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::config("training needs at least one data sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x0 = &data[rng.gen_range(0..data.len())];
        let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
        let t: f64 = rng.gen();
        let g = Graph::new();
        let bound = g.bind(model.params());
        let loss = rf_loss_graph(&g, model, &Weights::base(&bound), x0, text, t, &eps).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step },
            other => other,
        })?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = g.grad(loss, &bound)?;
        opt.step(model.params_mut(), &grads)?;
        if !model.params().is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(value);
    }
    Ok(losses)
}

/// Mean over a trailing or leading window, used for smoothed curves.
pub fn window_mean(values: &[f64], range: std::ops::Range<usize>) -> f64 {
    let s = &values[range];
    s.iter().sum::<f64>() / s.len() as f64
}
