use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use hwlab_core::attention::{build_schedule, GridDims, Placement, WindowSpec};
use hwlab_core::flow::{
    reward_finetune, train_rectified_flow, DecoderStub, OptimizerKind, Prompt, RewardSpec, RewardTrainerConfig,
    RfTrainConfig,
};
use hwlab_core::model::{load_checkpoint, save_checkpoint, LoraAdapters, LoraConfig, Model, ModelConfig, TextFeatures};
use hwlab_core::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::smoothed_ends;
use crate::output::{num, RunOutput, Table};

pub const SMOOTHING: usize = 20;

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value = "2,4,4")]
    pub dims: GridDims,
    #[arg(long, default_value_t = 6)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Window size S of the MSWA layers [default: h·w].
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value = "middle")]
    pub placement: Placement,
    #[arg(long, default_value_t = 4)]
    pub text_len: usize,
    #[arg(long, default_value_t = 8)]
    pub text_dim: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    /// Number of fixed data samples drawn for the seed.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Per-sample spread around the shared data mean.
    #[arg(long, default_value_t = 0.3)]
    pub spread: f64,
}

pub fn toy_config(a: &TrainArgs) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::toy(a.dims, a.heads, a.head_dim, a.layers, a.text_len, a.text_dim)?;
    let win = WindowSpec::new(a.window.unwrap_or(a.dims.h * a.dims.w))?;
    cfg.schedule = build_schedule(a.layers, a.placement, win)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Fixed synthetic data: a shared random mean plus per-sample noise.
pub fn toy_data(cfg: &ModelConfig, samples: usize, spread: f64, seed: u64) -> Vec<Tensor> {
    let shape = [cfg.dims.seq(), cfg.hidden()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a);
    let mean = Tensor::randn(&shape, 1.0, &mut rng);
    (0..samples)
        .map(|_| {
            let noise = Tensor::randn(&shape, spread, &mut rng);
            mean.zip_with(&noise, "data", |m, n| m + n).expect("same shape")
        })
        .collect()
}

pub fn train_toy(a: &TrainArgs, out: &mut RunOutput) -> Result<()> {
    ensure!(a.samples >= 1, "--samples must be >= 1");
    let seed = out.seed();
    let cfg = toy_config(a)?;
    let mut model = Model::init(cfg.clone(), seed)?;
    let data = toy_data(&cfg, a.samples, a.spread, seed);
    let text = TextFeatures::random(a.text_len, a.text_dim, 1.0, seed ^ 0x7e77)?;
    let run = RfTrainConfig {
        steps: a.steps,
        learning_rate: a.lr,
        seed,
    };
    let losses = train_rectified_flow(&mut model, &data, &text, &run)?;

    let mut curve = Table::new(&["step", "loss"]);
    for (i, l) in losses.iter().enumerate() {
        curve.push(vec![i.to_string(), num(*l)]);
    }
    out.write_table("loss.csv", &curve)?;

    let ckpt = out.path("model.ckpt");
    save_checkpoint(&ckpt, &model)?;
    out.record("model.ckpt", vec![])?;

    let mut summary = Table::new(&["steps", "params", "initial_smoothed_loss", "final_smoothed_loss", "ratio"]);
    let n_params: usize = model.params().iter().map(|(_, t)| t.numel()).sum();
    let (first, last) = match smoothed_ends(&losses, SMOOTHING) {
        Some((f, l)) => (num(f), num(l)),
        None => (String::new(), String::new()),
    };
    let ratio = smoothed_ends(&losses, SMOOTHING).map(|(f, l)| num(l / f)).unwrap_or_default();
    summary.push(vec![a.steps.to_string(), n_params.to_string(), first, last, ratio]);
    out.write_table("train_summary.csv", &summary)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    #[default]
    Sgd,
    Adam,
}

/// Flags of `reward-ft`. A `--config` JSON file uses the same field names
/// (snake_case) and replaces the flags; missing fields take the defaults.
#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardArgs {
    /// Checkpoint written by train-toy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Gradient-tracked sampling steps; a list runs a sweep.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub k: Vec<usize>,
    /// Decoded frames scored by the rewards; a list runs a sweep.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub f: Vec<usize>,
    /// Rewards as name:weight,...
    #[arg(long, default_value = "brightness:1")]
    pub rewards: String,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Euler steps T per sample.
    #[arg(long, default_value_t = 20)]
    pub sampling_steps: usize,
    #[arg(long, default_value_t = 2)]
    pub prompts: usize,
    #[arg(long, default_value_t = 4)]
    pub lora_rank: usize,
    #[arg(long, default_value_t = 4.0)]
    pub lora_alpha: f64,
    #[arg(long, value_enum, default_value_t = OptimizerChoice::Sgd)]
    pub optimizer: OptimizerChoice,
    /// Heavy-ball momentum for sgd.
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// JSON file with the fields above; replaces the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl Default for RewardArgs {
    fn default() -> Self {
        Self {
            checkpoint: None,
            k: vec![10],
            f: vec![1],
            rewards: "brightness:1".into(),
            steps: 200,
            lr: 0.1,
            sampling_steps: 20,
            prompts: 2,
            lora_rank: 4,
            lora_alpha: 4.0,
            optimizer: OptimizerChoice::Sgd,
            momentum: 0.0,
            config: None,
        }
    }
}

impl RewardArgs {
    pub fn resolve(self) -> Result<Self> {
        let Some(path) = &self.config else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut file: RewardArgs =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if file.checkpoint.is_none() {
            file.checkpoint = self.checkpoint;
        }
        Ok(file)
    }

    pub fn trainer_config(&self, k: usize, f: usize, seed: u64) -> Result<RewardTrainerConfig> {
        Ok(RewardTrainerConfig {
            k,
            f,
            sampling_steps: self.sampling_steps,
            steps: self.steps,
            learning_rate: self.lr,
            optimizer: match self.optimizer {
                OptimizerChoice::Sgd => OptimizerKind::Sgd { momentum: self.momentum },
                OptimizerChoice::Adam => OptimizerKind::Adam,
            },
            rewards: RewardSpec::parse_list(&self.rewards)?,
            seed,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
        })
    }
}

pub fn reward_ft(a: &RewardArgs, out: &mut RunOutput) -> Result<()> {
    let Some(ckpt) = &a.checkpoint else {
        bail!("reward-ft needs --checkpoint (written by train-toy)");
    };
    ensure!(!a.k.is_empty() && !a.f.is_empty(), "--k and --f need at least one value");
    ensure!(a.prompts >= 1, "--prompts must be >= 1");
    let specs = RewardSpec::parse_list(&a.rewards)?;
    ensure!(!specs.is_empty(), "--rewards is empty");
    let model = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    out.input(ckpt)?;
    let seed = out.seed();
    let mcfg = model.config().clone();
    let decoder = DecoderStub::new(mcfg.hidden(), 2, seed ^ 0xdec0)?;
    let prompts = (0..a.prompts)
        .map(|i| Prompt::synthetic(format!("prompt{i}"), mcfg.text_len, mcfg.text_dim, seed.wrapping_add(1000 + i as u64)))
        .collect::<hwlab_core::Result<Vec<_>>>()?;
    let lora = LoraConfig {
        rank: a.lora_rank,
        alpha: a.lora_alpha,
        targets: mcfg.attention_projections(),
    };

    let mut summary = Table::new(&[
        "k",
        "f",
        "steps",
        "initial_smoothed_reward",
        "final_smoothed_reward",
        "gap_closed",
        "mean_grad_norm",
        "final_grad_norm",
    ]);
    for &k in &a.k {
        for &f in &a.f {
            let cfg = a.trainer_config(k, f, seed)?;
            let mut adapters = LoraAdapters::new(lora.clone(), model.params(), seed ^ 0x10_7a)?;
            let log = reward_finetune(&model, &mut adapters, &prompts, &decoder, &cfg)?;

            let header = log.csv_header();
            let cols: Vec<&str> = header.split(',').collect();
            let mut table = Table::new(&cols);
            for r in &log.rows {
                let mut row = vec![r.step.to_string()];
                row.extend(r.rewards.iter().map(|v| num(*v)));
                row.extend(
                    [r.combined, r.loss, r.grad_norm, r.update_norm, r.frame_reward_var, r.temporal_energy].map(num),
                );
                table.push(row);
            }
            out.write_table(&format!("reward_k{k}_f{f}.csv"), &table)?;

            let combined = log.combined();
            let grads: Vec<f64> = log.rows.iter().map(|r| r.grad_norm).collect();
            let ends = smoothed_ends(&combined, SMOOTHING);
            summary.push(vec![
                k.to_string(),
                f.to_string(),
                a.steps.to_string(),
                ends.map(|e| num(e.0)).unwrap_or_default(),
                ends.map(|e| num(e.1)).unwrap_or_default(),
                ends.filter(|e| e.0 != 0.0).map(|(s, e)| num((e - s) / -s)).unwrap_or_default(),
                smoothed_ends(&grads, grads.len()).map(|e| num(e.0)).unwrap_or_default(),
                grads.last().map(|g| num(*g)).unwrap_or_default(),
            ]);
        }
    }
    out.write_table("reward_summary.csv", &summary)
}
