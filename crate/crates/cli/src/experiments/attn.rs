use anyhow::{ensure, Result};
use clap::{Args, ValueEnum};
use hwlab_core::attention::{
    build_schedule, flop_count, receptive_field, AttentionStack, Direction, GridDims, HybridSchedule, LayerKind,
    Placement, WindowSpec,
};
use hwlab_core::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::output::{num, time_ms, RunOutput, Table};

const TIMING: [&str; 3] = ["median_ms", "min_ms", "max_ms"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleChoice {
    Full,
    Hybrid,
    Both,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    /// Latent grid as f,h,w.
    #[arg(long, default_value = "4,32,32")]
    pub dims: GridDims,
    #[arg(long, default_value_t = 6)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub head_dim: usize,
    /// Window size S [default: h·w].
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, value_enum, default_value_t = ScheduleChoice::Both)]
    pub schedule: ScheduleChoice,
    /// MSWA layers of the hybrid stack: none, shallow, middle, deep or start..end.
    #[arg(long, default_value = "middle")]
    pub placement: Placement,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
}

fn window_or_default(window: Option<usize>, dims: GridDims) -> Result<WindowSpec> {
    Ok(WindowSpec::new(window.unwrap_or(dims.h * dims.w))?)
}

fn stack_flops(schedule: &HybridSchedule, dims: GridDims, heads: usize, head_dim: usize) -> f64 {
    schedule
        .kinds()
        .iter()
        .map(|&k| flop_count(k, dims, schedule.window(), heads, head_dim))
        .sum()
}

fn mswa_layers(schedule: &HybridSchedule) -> usize {
    schedule.kinds().iter().filter(|&&k| k == LayerKind::Mswa).count()
}

fn dims_label(d: GridDims) -> String {
    format!("{}x{}x{}", d.f, d.h, d.w)
}

struct Timed {
    median: f64,
    min: f64,
    max: f64,
}

fn time_stack(stack: &AttentionStack, x: &Tensor, warmup: usize, repeats: usize) -> Result<Timed> {
    let (median, min, max) = time_ms(warmup, repeats, || {
        stack.forward(x)?;
        Ok(())
    })?;
    Ok(Timed { median, min, max })
}

pub fn bench(a: &BenchArgs, out: &mut RunOutput) -> Result<()> {
    ensure!(a.repeats >= 1, "--repeats must be >= 1");
    let win = window_or_default(a.window, a.dims)?;
    let full = HybridSchedule::all_full(a.layers, win)?;
    let hybrid = build_schedule(a.layers, a.placement, win)?;
    let mut runs = vec![];
    if a.schedule != ScheduleChoice::Hybrid {
        runs.push(("full", full.clone()));
    }
    if a.schedule != ScheduleChoice::Full {
        runs.push(("hybrid", hybrid));
    }
    let full_flops = stack_flops(&full, a.dims, a.heads, a.head_dim);
    let x = Tensor::randn(&[a.dims.seq(), a.heads * a.head_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(out.seed()));

    let mut results = vec![];
    for (label, schedule) in runs {
        let mut rng = ChaCha8Rng::seed_from_u64(out.seed() ^ 0x5eed);
        let stack = AttentionStack::new(a.dims, a.heads, a.head_dim, schedule.clone(), &mut rng)?;
        let t = time_stack(&stack, &x, a.warmup, a.repeats)?;
        results.push((label, schedule, t));
    }
    let full_median = results.iter().find(|r| r.0 == "full").map(|r| r.2.median);

    let mut table = Table::new(&[
        "schedule",
        "layers",
        "mswa_layers",
        "dims",
        "seq",
        "heads",
        "head_dim",
        "window",
        "attention_flops",
        "flops_vs_full",
        "median_ms",
        "min_ms",
        "max_ms",
        "speedup_vs_full",
    ])
    .timing(&["median_ms", "min_ms", "max_ms", "speedup_vs_full"]);
    for (label, schedule, t) in &results {
        let flops = stack_flops(schedule, a.dims, a.heads, a.head_dim);
        table.push(vec![
            label.to_string(),
            a.layers.to_string(),
            mswa_layers(schedule).to_string(),
            dims_label(a.dims),
            a.dims.seq().to_string(),
            a.heads.to_string(),
            a.head_dim.to_string(),
            win.size().to_string(),
            num(flops),
            num(flops / full_flops),
            num(t.median),
            num(t.min),
            num(t.max),
            full_median.map(|f| num(f / t.median)).unwrap_or_default(),
        ]);
    }
    out.write_table("bench_attn.csv", &table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblateAxis {
    Positions,
    Window,
    Directions,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: AblateAxis,
    #[arg(long, default_value = "4,4,4")]
    pub dims: GridDims,
    #[arg(long, default_value_t = 6)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub head_dim: usize,
    /// Window size S for the positions and directions sweeps [default: h·w].
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
}

/// Direction subsets for the directions sweep; the three-way subset makes
/// each axis the fastest-varying one exactly once.
pub fn direction_subsets() -> Vec<Vec<Direction>> {
    vec![
        vec![Direction::Fhw],
        vec![Direction::Fhw, Direction::Hwf, Direction::Wfh],
        Direction::ALL.to_vec(),
    ]
}

struct AblationPoint {
    setting: String,
    schedule: HybridSchedule,
    directions: Vec<Direction>,
}

pub fn ablate(a: &AblateArgs, out: &mut RunOutput) -> Result<()> {
    ensure!(a.repeats >= 1, "--repeats must be >= 1");
    let win = window_or_default(a.window, a.dims)?;
    let all_mswa = |w: WindowSpec| build_schedule(a.layers, Placement::Custom { start: 0, end: a.layers }, w);
    let hw = a.dims.h * a.dims.w;
    let points: Vec<AblationPoint> = match a.axis {
        AblateAxis::Positions => [Placement::None, Placement::Shallow, Placement::Middle, Placement::Deep]
            .into_iter()
            .zip(["none", "shallow", "middle", "deep"])
            .map(|(p, name)| {
                Ok(AblationPoint {
                    setting: name.to_string(),
                    schedule: build_schedule(a.layers, p, win)?,
                    directions: Direction::ALL.to_vec(),
                })
            })
            .collect::<Result<_>>()?,
        AblateAxis::Window => [("hw/8", hw / 8), ("hw/2", hw / 2), ("hw", hw), ("2hw", 2 * hw)]
            .into_iter()
            .map(|(name, s)| {
                Ok(AblationPoint {
                    setting: name.to_string(),
                    schedule: all_mswa(WindowSpec::new(s.max(1))?)?,
                    directions: Direction::ALL.to_vec(),
                })
            })
            .collect::<Result<_>>()?,
        AblateAxis::Directions => direction_subsets()
            .into_iter()
            .map(|dirs| {
                Ok(AblationPoint {
                    setting: dirs.len().to_string(),
                    schedule: all_mswa(win)?,
                    directions: dirs,
                })
            })
            .collect::<Result<_>>()?,
    };

    let axis = match a.axis {
        AblateAxis::Positions => "positions",
        AblateAxis::Window => "window",
        AblateAxis::Directions => "directions",
    };
    let mut table = Table::new(&[
        "axis",
        "setting",
        "layers",
        "mswa_layers",
        "window",
        "directions",
        "mswa_coverage_mean",
        "mswa_coverage_min",
        "seq",
        "attention_flops",
        "median_ms",
        "min_ms",
        "max_ms",
    ])
    .timing(&TIMING);
    let x = Tensor::randn(&[a.dims.seq(), a.heads * a.head_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(out.seed()));
    for p in points {
        let n_mswa = mswa_layers(&p.schedule);
        let (cov_mean, cov_min) = if n_mswa == 0 {
            (String::new(), String::new())
        } else {
            let rf = receptive_field(a.dims, p.schedule.window(), n_mswa, &p.directions)?;
            let mean = rf.iter().sum::<usize>() as f64 / rf.len() as f64;
            (num(mean), rf.iter().min().copied().unwrap_or(0).to_string())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(out.seed() ^ 0x5eed);
        let stack = AttentionStack::new(a.dims, a.heads, a.head_dim, p.schedule.clone(), &mut rng)?
            .with_directions(&p.directions)?;
        let t = time_stack(&stack, &x, a.warmup, a.repeats)?;
        let dirs: Vec<&str> = p.directions.iter().map(|d| d.as_str()).collect();
        table.push(vec![
            axis.to_string(),
            p.setting,
            a.layers.to_string(),
            n_mswa.to_string(),
            p.schedule.window().size().to_string(),
            dirs.join("+"),
            cov_mean,
            cov_min,
            a.dims.seq().to_string(),
            num(stack_flops(&p.schedule, a.dims, a.heads, a.head_dim)),
            num(t.median),
            num(t.min),
            num(t.max),
        ]);
    }
    out.write_table(&format!("ablate_{axis}.csv"), &table)
}
