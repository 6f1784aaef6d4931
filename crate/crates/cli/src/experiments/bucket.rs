use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use clap::{Args, ValueEnum};
use hwlab_core::bucketing::{
    build_naive_plan, build_ttl_plan, clip_mixture, parse_manifest, simulate_throughput, token_length, write_manifest,
    CostModel, SampleMeta, TokenFormula,
};
use serde::{Deserialize, Serialize};

use crate::output::{num, RunOutput, Table};

/// Throughput ratio reported for the reference 256-GPU environment.
pub const REFERENCE_RATIO: f64 = 2.2091;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostChoice {
    Linear,
    Quadratic,
    Both,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct BucketArgs {
    /// JSONL dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Samples per iteration, one per worker [default: --workers].
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub workers: usize,
    #[arg(long, value_enum, default_value_t = CostChoice::Both)]
    pub cost: CostChoice,
    /// Number of shuffle seeds, starting at the global seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 16)]
    pub spatial_factor: usize,
    #[arg(long, default_value_t = 4)]
    pub temporal_factor: usize,
    /// Round partial patches up instead of rejecting them.
    #[arg(long)]
    pub ceil_mode: bool,
}

pub fn bucket_sim(a: &BucketArgs, out: &mut RunOutput) -> Result<()> {
    ensure!(a.seeds >= 1, "--seeds must be >= 1");
    let text = std::fs::read_to_string(&a.manifest).with_context(|| format!("reading manifest {}", a.manifest.display()))?;
    let data = parse_manifest(&text).with_context(|| format!("parsing manifest {}", a.manifest.display()))?;
    out.input(&a.manifest)?;
    let formula = TokenFormula {
        spatial_factor: a.spatial_factor,
        temporal_factor: a.temporal_factor,
        ceil_mode: a.ceil_mode,
    };
    let batch = a.batch.unwrap_or(a.workers);
    let costs: Vec<(&str, CostModel)> = match a.cost {
        CostChoice::Linear => vec![("linear", CostModel::linear())],
        CostChoice::Quadratic => vec![("quadratic", CostModel::quadratic())],
        CostChoice::Both => vec![("linear", CostModel::linear()), ("quadratic", CostModel::quadratic())],
    };

    let mut detail = Table::new(&[
        "cost",
        "seed",
        "strategy",
        "iterations",
        "sum_of_maxima",
        "total_tokens",
        "total_time",
        "tokens_per_time",
        "mean_idle_fraction",
    ]);
    let mut summary = Table::new(&[
        "cost",
        "samples",
        "workers",
        "seeds",
        "naive_tokens_per_time",
        "ttl_tokens_per_time",
        "ratio",
        "naive_mean_idle",
        "ttl_mean_idle",
        "reference_ratio",
    ]);
    for (name, cost) in &costs {
        let (mut naive_tp, mut ttl_tp, mut naive_idle, mut ttl_idle) = (0.0, 0.0, 0.0, 0.0);
        for seed in out.seed()..out.seed() + a.seeds {
            let plans = [
                ("naive", build_naive_plan(&data, batch, &formula, seed)?),
                ("ttl", build_ttl_plan(&data, batch, &formula, seed)?),
            ];
            for (strategy, plan) in &plans {
                let rep = simulate_throughput(plan, a.workers, cost)?;
                if *strategy == "naive" {
                    naive_tp += rep.tokens_per_time;
                    naive_idle += rep.mean_idle();
                } else {
                    ttl_tp += rep.tokens_per_time;
                    ttl_idle += rep.mean_idle();
                }
                detail.push(vec![
                    name.to_string(),
                    seed.to_string(),
                    strategy.to_string(),
                    plan.iterations.len().to_string(),
                    plan.sum_of_maxima().to_string(),
                    rep.total_tokens.to_string(),
                    num(rep.total_time),
                    num(rep.tokens_per_time),
                    num(rep.mean_idle()),
                ]);
            }
        }
        let n = a.seeds as f64;
        summary.push(vec![
            name.to_string(),
            data.len().to_string(),
            a.workers.to_string(),
            a.seeds.to_string(),
            num(naive_tp / n),
            num(ttl_tp / n),
            num(ttl_tp / naive_tp),
            num(naive_idle / n),
            num(ttl_idle / n),
            num(REFERENCE_RATIO),
        ]);
    }
    out.write_table("bucket_sim.csv", &detail)?;
    out.write_table("bucket_summary.csv", &summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestKind {
    /// 20% long 512×512×49 clips, the rest spread over shorter 49-frame clips.
    Mixture,
    /// Six samples with token lengths 1, 1, 2, 2, 9, 9.
    Six,
    /// Every sample 512×512×49.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ManifestArgs {
    #[arg(long, value_enum)]
    pub kind: ManifestKind,
    #[arg(long, default_value_t = 10240)]
    pub n: usize,
    /// File name inside the output directory.
    #[arg(long, default_value = "manifest.jsonl")]
    pub file: String,
}

pub fn make_manifest(a: &ManifestArgs, out: &mut RunOutput) -> Result<()> {
    ensure!(a.file != crate::output::MANIFEST_FILE, "--file must not be {}", crate::output::MANIFEST_FILE);
    let samples = match a.kind {
        ManifestKind::Mixture => clip_mixture(a.n, out.seed()),
        ManifestKind::Uniform => (0..a.n).map(|i| SampleMeta::new(format!("u{i:05}"), 512, 512, 49)).collect(),
        ManifestKind::Six => [(1, 1), (3, 3), (1, 1), (1, 2), (3, 3), (2, 1)]
            .into_iter()
            .enumerate()
            .map(|(i, (h, w))| SampleMeta::new(format!("t{i}"), 16 * h, 16 * w, 1))
            .collect(),
    };
    let formula = TokenFormula::default();
    for s in &samples {
        token_length(s, &formula)?;
    }
    out.write_text(&a.file, &write_manifest(&samples))
}
