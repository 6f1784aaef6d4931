//! Reward backpropagation through a truncated Euler sampling chain.
//!
//! The loss for one prompt is `-Σ weight_i · R_i(decode_F(sample))`. Only the
//! last `K` Euler steps are recorded on the gradient graph; the first `T - K`
//! steps run on frozen parameters and enter the graph as a constant state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use super::reward::{DecoderStub, RewardSpec};
use super::{Adapted, FlowSchedule, VelocityField};
use crate::error::{Error, Result};
use crate::model::{LoraAdapters, Model, TextFeatures, Weights};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardTrainerConfig {
    /// Gradient-tracked (last) sampling steps.
    pub k: usize,
    /// Decoded frames scored by the rewards.
    pub f: usize,
    /// Euler steps `T` per sample.
    pub sampling_steps: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub rewards: Vec<RewardSpec>,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for RewardTrainerConfig {
    fn default() -> Self {
        Self {
            k: 10,
            f: 1,
            sampling_steps: 20,
            steps: 200,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            rewards: vec![],
            seed: 0,
            lora_rank: 4,
            lora_alpha: 4.0,
        }
    }
}

impl RewardTrainerConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.k == 0 || self.k > self.sampling_steps {
            return Err(Error::OutOfRange {
                what: "K",
                value: self.k as f64,
                expected: "1 <= K <= T",
            });
        }
        if self.f == 0 || self.f > frames {
            return Err(Error::OutOfRange {
                what: "F",
                value: self.f as f64,
                expected: "1 <= F <= frame count",
            });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::OutOfRange {
                what: "learning rate",
                value: self.learning_rate,
                expected: ">= 0",
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub name: String,
    pub text: TextFeatures,
}

impl Prompt {
    /// A prompt whose conditioning features are seeded Gaussian noise.
    pub fn synthetic(name: impl Into<String>, text_len: usize, text_dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            text: TextFeatures::random(text_len, text_dim, 4.0, seed)?,
        })
    }
}

pub struct RewardObjective {
    /// `-Σ weight · reward`, scalar.
    pub loss: Var,
    /// Unweighted reward values, in spec order.
    pub rewards: Vec<(String, f64)>,
    /// Model evaluations recorded on the gradient graph.
    pub live_evals: usize,
    /// Final sampled latent.
    pub sample: Tensor,
    /// Decoded frames `[F, H, W]`.
    pub frames: Tensor,
}

/// Records the truncated reward objective on `g`.
///
/// `frozen` evaluates the detached prefix and `w` the live suffix; both must
/// describe the same parameters.
#[allow(clippy::too_many_arguments)]
pub fn truncated_reward_objective(
    g: &Graph,
    model: &Model,
    w: &Weights,
    frozen: &dyn VelocityField,
    prompt: &Prompt,
    x_t: &Tensor,
    sched: &FlowSchedule,
    decoder: &DecoderStub,
    cfg: &RewardTrainerConfig,
) -> Result<RewardObjective> {
    let dims = model.config().dims;
    let steps = sched.steps();
    if cfg.k == 0 || cfg.k > steps {
        return Err(Error::OutOfRange {
            what: "K",
            value: cfg.k as f64,
            expected: "1 <= K <= T",
        });
    }
    let mut x = x_t.clone();
    for i in 0..steps - cfg.k {
        let (t, dt) = sched.step(i);
        let v = frozen.velocity(&x, &prompt.text, t)?;
        x = x.zip_with(&v, "euler", |a, b| a - dt * b)?;
        if !x.is_finite() {
            return Err(Error::Diverged { step: i + 1 });
        }
    }
    let mut state = g.constant(x);
    let mut live_evals = 0;
    for i in steps - cfg.k..steps {
        let (t, dt) = sched.step(i);
        let v = model.forward_graph(g, w, state, &prompt.text, t)?;
        state = g.sub(state, g.scale(v, dt)?)?;
        live_evals += 1;
    }
    let frames = decoder.decode_graph(g, state, dims, cfg.f)?;
    let mut loss = g.constant(Tensor::scalar(0.0));
    let mut rewards = Vec::with_capacity(cfg.rewards.len());
    for spec in &cfg.rewards {
        let r = spec.graph(g, frames)?;
        rewards.push((spec.name.clone(), g.value(r).item()));
        loss = g.add(loss, g.scale(r, -spec.weight)?)?;
    }
    Ok(RewardObjective {
        loss,
        rewards,
        live_evals,
        sample: (*g.value(state)).clone(),
        frames: (*g.value(frames)).clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Prompt-averaged unweighted rewards, in spec order.
    pub rewards: Vec<f64>,
    pub combined: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub update_norm: f64,
    /// Variance across decoded frames of the combined reward (0 for F = 1).
    pub frame_reward_var: f64,
    /// Mean squared difference between consecutive latent frames of the samples.
    pub temporal_energy: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainingLog {
    pub reward_names: Vec<String>,
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn combined(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.combined).collect()
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["step".to_string()];
        cols.extend(self.reward_names.iter().map(|n| format!("reward_{n}")));
        cols.extend(
            ["combined_reward", "loss", "grad_norm", "update_norm", "frame_reward_var", "temporal_energy"]
                .map(String::from),
        );
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.rows {
            let mut fields = vec![r.step.to_string()];
            fields.extend(r.rewards.iter().map(|v| v.to_string()));
            fields.extend(
                [r.combined, r.loss, r.grad_norm, r.update_norm, r.frame_reward_var, r.temporal_energy].map(|v| v.to_string()),
            );
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

fn temporal_energy(sample: &Tensor, frame_rows: usize) -> f64 {
    let frames: Vec<&[f64]> = sample.data().chunks(frame_rows).collect();
    if frames.len() < 2 {
        return 0.0;
    }
    let total: f64 = frames
        .windows(2)
        .map(|w| w[0].iter().zip(w[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    total / ((frames.len() - 1) * frame_rows) as f64
}

fn frame_reward_variance(frames: &Tensor, specs: &[RewardSpec]) -> Result<f64> {
    let n = frames.shape()[0];
    if n < 2 {
        return Ok(0.0);
    }
    let mut vals = Vec::with_capacity(n);
    for i in 0..n {
        let one = frames.gather(0, &[i])?;
        let mut c = 0.0;
        for s in specs {
            c += s.weight * s.evaluate(&one)?;
        }
        vals.push(c);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    Ok(vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64)
}

/// Fine-tunes `adapters` (the base model stays frozen) by descending the
/// prompt-averaged truncated reward objective. One fresh `x_T` per prompt per
/// step is drawn from the seeded stream; prompts are reduced in order.
pub fn reward_finetune(
    model: &Model,
    adapters: &mut LoraAdapters,
    prompts: &[Prompt],
    decoder: &DecoderStub,
    cfg: &RewardTrainerConfig,
) -> Result<TrainingLog> {
    let mcfg = model.config();
    cfg.validate(mcfg.dims.f)?;
    if prompts.is_empty() {
        return Err(Error::config("reward fine-tuning needs at least one prompt"));
    }
    adapters.check_targets(model.params())?;
    let sched = FlowSchedule::uniform(cfg.sampling_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer.build(cfg.learning_rate);
    let shape = [mcfg.dims.seq(), mcfg.hidden()];
    let frame_rows = mcfg.dims.h * mcfg.dims.w;
    let mut log = TrainingLog {
        reward_names: cfg.rewards.iter().map(|r| r.name.clone()).collect(),
        rows: Vec::with_capacity(cfg.steps),
    };
    let inv = 1.0 / prompts.len() as f64;

    for step in 0..cfg.steps {
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } | Error::Diverged { .. } => Error::Diverged { step },
            other => other,
        };
        let g = Graph::new();
        let base = g.bind_frozen(model.params());
        let lora = g.bind(adapters.params());
        let w = Weights {
            base: &base,
            lora: Some((&lora, adapters.config())),
        };
        let frozen = Adapted { model, adapters };

        let mut total: Option<Var> = None;
        let mut reward_sum = vec![0.0; cfg.rewards.len()];
        let (mut var_sum, mut energy_sum) = (0.0, 0.0);
        for prompt in prompts {
            let x_t = Tensor::randn(&shape, 1.0, &mut rng);
            let obj = truncated_reward_objective(&g, model, &w, &frozen, prompt, &x_t, &sched, decoder, cfg).map_err(diverged)?;
            for (acc, (_, v)) in reward_sum.iter_mut().zip(&obj.rewards) {
                *acc += v * inv;
            }
            var_sum += frame_reward_variance(&obj.frames, &cfg.rewards)? * inv;
            energy_sum += temporal_energy(&obj.sample, frame_rows) * inv;
            total = Some(match total {
                Some(t) => g.add(t, obj.loss).map_err(diverged)?,
                None => obj.loss,
            });
        }
        let loss = g.scale(total.expect("at least one prompt"), inv).map_err(diverged)?;
        let loss_value = g.value(loss).item();
        let grads = g.grad(loss, &lora)?;
        if !loss_value.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step });
        }
        drop(frozen);
        let update_norm = opt.step(adapters.params_mut(), &grads)?;
        if !adapters.params().is_finite() {
            return Err(Error::Diverged { step });
        }
        let combined = cfg.rewards.iter().zip(&reward_sum).map(|(s, v)| s.weight * v).sum();
        log.rows.push(LogRow {
            step,
            rewards: reward_sum,
            combined,
            loss: loss_value,
            grad_norm: grads.global_norm(),
            update_norm,
            frame_reward_var: var_sum,
            temporal_energy: energy_sum,
        });
    }
    Ok(log)
}
