//! One module per subcommand. Every experiment is a plain value so a run can
//! be echoed into its manifest and replayed later.

mod attn;
mod bucket;
mod train;

use anyhow::Result;
use clap::Subcommand;
use serde::{Deserialize, Serialize};

pub use attn::{AblateArgs, BenchArgs};
pub use bucket::{BucketArgs, ManifestArgs};
pub use train::{RewardArgs, TrainArgs};

use crate::output::RunOutput;

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Experiment {
    /// Time full and hybrid attention stacks and count their FLOPs.
    BenchAttn(BenchArgs),
    /// Sweep MSWA placement, window size or direction count.
    Ablate(AblateArgs),
    /// Train the toy model with the rectified-flow loss.
    TrainToy(TrainArgs),
    /// Fine-tune LoRA adapters on synthetic rewards over K and F sweeps.
    RewardFt(RewardArgs),
    /// Compare naive and token-length bucketing in a data-parallel simulation.
    BucketSim(BucketArgs),
    /// Write a synthetic dataset manifest.
    MakeManifest(ManifestArgs),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::BenchAttn(_) => "bench-attn",
            Experiment::Ablate(_) => "ablate",
            Experiment::TrainToy(_) => "train-toy",
            Experiment::RewardFt(_) => "reward-ft",
            Experiment::BucketSim(_) => "bucket-sim",
            Experiment::MakeManifest(_) => "make-manifest",
        }
    }

    /// Folds any config file into the flags so the manifest is self-contained.
    pub fn resolve(self) -> Result<Self> {
        Ok(match self {
            Experiment::RewardFt(a) => Experiment::RewardFt(a.resolve()?),
            other => other,
        })
    }

    pub fn run(&self, out: &mut RunOutput) -> Result<()> {
        match self {
            Experiment::BenchAttn(a) => attn::bench(a, out),
            Experiment::Ablate(a) => attn::ablate(a, out),
            Experiment::TrainToy(a) => train::train_toy(a, out),
            Experiment::RewardFt(a) => train::reward_ft(a, out),
            Experiment::BucketSim(a) => bucket::bucket_sim(a, out),
            Experiment::MakeManifest(a) => bucket::make_manifest(a, out),
        }
    }
}

/// Mean of the first and last `window` values (fewer if the series is short).
pub(crate) fn smoothed_ends(values: &[f64], window: usize) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let w = window.min(values.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..w]), mean(&values[values.len() - w..])))
}
