//! Training with token length: group samples of similar token counts into the
//! same iteration so synchronous data-parallel workers finish together, and a
//! simulator that compares this against random batching.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training sample's pixel extents and frame count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "F")]
    pub frames: usize,
}

impl SampleMeta {
    pub fn new(id: impl Into<String>, height: usize, width: usize, frames: usize) -> Self {
        Self {
            id: id.into(),
            height,
            width,
            frames,
        }
    }
}

/// Latent token count: `((F - 1) / temporal + 1) · (H / spatial) · (W / spatial)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFormula {
    /// VAE spatial downsampling times patch size.
    pub spatial_factor: usize,
    pub temporal_factor: usize,
    /// Round partial patches / frame groups up instead of rejecting them.
    pub ceil_mode: bool,
}

impl Default for TokenFormula {
    fn default() -> Self {
        Self {
            spatial_factor: 16,
            temporal_factor: 4,
            ceil_mode: false,
        }
    }
}

pub fn token_length(meta: &SampleMeta, formula: &TokenFormula) -> Result<u64> {
    let (sf, tf) = (formula.spatial_factor, formula.temporal_factor);
    if sf == 0 || tf == 0 {
        return Err(Error::config("token formula factors must be >= 1"));
    }
    if meta.height == 0 || meta.width == 0 || meta.frames == 0 {
        return Err(Error::config(format!("sample `{}` has a zero extent", meta.id)));
    }
    let exact = meta.height % sf == 0 && meta.width % sf == 0 && (meta.frames - 1) % tf == 0;
    if !exact && !formula.ceil_mode {
        return Err(Error::config(format!(
            "sample `{}` ({}x{}x{}) needs H, W divisible by {sf} and F = 1 mod {tf}",
            meta.id, meta.height, meta.width, meta.frames
        )));
    }
    let f = (meta.frames - 1).div_ceil(tf) + 1;
    let h = meta.height.div_ceil(sf);
    let w = meta.width.div_ceil(sf);
    Ok((f * h * w) as u64)
}

/// Assignment of samples to iterations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketPlan {
    /// Per iteration, indices into the dataset.
    pub iterations: Vec<Vec<usize>>,
    /// Token length of every dataset sample.
    pub tokens: Vec<u64>,
    pub batch_size: usize,
}

impl BucketPlan {
    /// True when some iteration holds fewer than `batch_size` samples.
    pub fn is_ragged(&self) -> bool {
        self.iterations.iter().any(|it| it.len() < self.batch_size)
    }

    pub fn iteration_max(&self) -> Vec<u64> {
        self.iterations
            .iter()
            .map(|it| it.iter().map(|&i| self.tokens[i]).max().unwrap_or(0))
            .collect()
    }

    pub fn sum_of_maxima(&self) -> u64 {
        self.iteration_max().iter().sum()
    }

    pub fn total_tokens(&self) -> u64 {
        self.iterations.iter().flatten().map(|&i| self.tokens[i]).sum()
    }
}

fn tokens_for(dataset: &[SampleMeta], formula: &TokenFormula, batch_size: usize) -> Result<Vec<u64>> {
    if dataset.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    dataset.iter().map(|m| token_length(m, formula)).collect()
}

/// Sorted-block plan. Samples are sorted by token length (descending) and cut
/// into consecutive batches, so a short final batch holds the shortest
/// samples. Iteration order is then shuffled by `seed`; batch contents are not.
pub fn build_ttl_plan(dataset: &[SampleMeta], batch_size: usize, formula: &TokenFormula, seed: u64) -> Result<BucketPlan> {
    let tokens = tokens_for(dataset, formula, batch_size)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| tokens[b].cmp(&tokens[a]).then(a.cmp(&b)));
    let mut iterations: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    iterations.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BucketPlan {
        iterations,
        tokens,
        batch_size,
    })
}

/// Uniformly random sample-to-iteration assignment.
pub fn build_naive_plan(dataset: &[SampleMeta], batch_size: usize, formula: &TokenFormula, seed: u64) -> Result<BucketPlan> {
    let tokens = tokens_for(dataset, formula, batch_size)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BucketPlan {
        iterations: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        tokens,
        batch_size,
    })
}

/// Per-sample step time `a·tokens + b·tokens²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub a: f64,
    pub b: f64,
}

impl CostModel {
    pub const CROSSOVER_TOKENS: f64 = 16_384.0;

    pub fn linear() -> Self {
        Self { a: 1.0, b: 0.0 }
    }

    /// Quadratic term equal to the linear one at 16384 tokens.
    pub fn quadratic() -> Self {
        Self {
            a: 1.0,
            b: 1.0 / Self::CROSSOVER_TOKENS,
        }
    }

    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a >= 0.0 && b >= 0.0 && a + b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::config("cost model needs a, b >= 0 and not both zero"));
        }
        Ok(Self { a, b })
    }

    pub fn cost(&self, tokens: u64) -> f64 {
        let t = tokens as f64;
        self.a * t + self.b * t * t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub total_tokens: u64,
    pub total_time: f64,
    pub tokens_per_time: f64,
    /// `1 - mean(cost) / max(cost)` per iteration, idle workers counting as 0.
    pub idle_fractions: Vec<f64>,
}

impl ThroughputReport {
    pub fn mean_idle(&self) -> f64 {
        self.idle_fractions.iter().sum::<f64>() / self.idle_fractions.len() as f64
    }
}

/// Synchronous data parallelism: each worker takes one sample per iteration
/// and the iteration lasts as long as the slowest worker.
pub fn simulate_throughput(plan: &BucketPlan, n_workers: usize, cost: &CostModel) -> Result<ThroughputReport> {
    if plan.batch_size != n_workers {
        return Err(Error::config(format!(
            "batch size {} does not match {} workers",
            plan.batch_size, n_workers
        )));
    }
    let mut total_time = 0.0;
    let mut idle_fractions = Vec::with_capacity(plan.iterations.len());
    for it in &plan.iterations {
        let costs: Vec<f64> = it.iter().map(|&i| cost.cost(plan.tokens[i])).collect();
        let max = costs.iter().copied().fold(0.0, f64::max);
        let mean = costs.iter().sum::<f64>() / n_workers as f64;
        total_time += max;
        idle_fractions.push(if max > 0.0 { 1.0 - mean / max } else { 0.0 });
    }
    let total_tokens = plan.total_tokens();
    Ok(ThroughputReport {
        total_tokens,
        total_time,
        tokens_per_time: total_tokens as f64 / total_time,
        idle_fractions,
    })
}

/// Parses a line-delimited JSON manifest (`{"id":…,"H":…,"W":…,"F":…}` per
/// line). Blank lines and lines starting with `#` are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<SampleMeta>> {
    let mut out = vec![];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let meta: SampleMeta = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(meta);
    }
    if out.is_empty() {
        return Err(Error::Manifest {
            line: 0,
            msg: "manifest has no samples".into(),
        });
    }
    Ok(out)
}

pub fn write_manifest(samples: &[SampleMeta]) -> String {
    let mut out = String::new();
    for s in samples {
        let _ = writeln!(out, "{}", serde_json::to_string(s).expect("sample serializes"));
    }
    out
}

/// Synthetic mixture: 20% of samples are 512×512×49 (13312 tokens), the rest
/// are 49-frame clips whose token counts spread roughly uniformly over
/// `[832, 13312]`.
pub fn clip_mixture(n: usize, seed: u64) -> Vec<SampleMeta> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let id = format!("s{i:05}");
            if rng.gen_bool(0.2) {
                return SampleMeta::new(id, 512, 512, 49);
            }
            let area: f64 = rng.gen_range(64.0..=1024.0);
            let (h, w) = (8..=32usize)
                .map(|h| (h, ((area / h as f64).round() as usize).clamp(8, 32)))
                .min_by(|a, b| {
                    let da = ((a.0 * a.1) as f64 - area).abs();
                    let db = ((b.0 * b.1) as f64 - area).abs();
                    da.total_cmp(&db)
                })
                .expect("non-empty range");
            SampleMeta::new(id, h * 16, w * 16, 49)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f() -> TokenFormula {
        TokenFormula::default()
    }

    #[test]
    fn token_lengths() {
        assert_eq!(token_length(&SampleMeta::new("a", 512, 512, 49), &f()).unwrap(), 13_312);
        assert_eq!(token_length(&SampleMeta::new("b", 768, 768, 21), &f()).unwrap(), 13_824);
        assert_eq!(token_length(&SampleMeta::new("c", 16, 16, 1), &f()).unwrap(), 1);
        assert!(token_length(&SampleMeta::new("d", 500, 512, 49), &f()).is_err());
        assert!(token_length(&SampleMeta::new("e", 512, 512, 48), &f()).is_err());
        let ceil = TokenFormula { ceil_mode: true, ..f() };
        assert_eq!(token_length(&SampleMeta::new("d", 500, 512, 48), &ceil).unwrap(), 13 * 32 * 32);
    }

    fn by_tokens(tokens: &[usize]) -> Vec<SampleMeta> {
        // 16 x (16·t) x 1 has exactly t tokens
        tokens.iter().enumerate().map(|(i, &t)| SampleMeta::new(format!("{i}"), 16, 16 * t, 1)).collect()
    }

    #[test]
    fn ttl_groups_equal_lengths() {
        let ds = by_tokens(&[9, 1, 2, 9, 1, 2]);
        let plan = build_ttl_plan(&ds, 2, &f(), 3).unwrap();
        let mut groups: Vec<Vec<u64>> = plan
            .iterations
            .iter()
            .map(|it| {
                let mut v: Vec<u64> = it.iter().map(|&i| plan.tokens[i]).collect();
                v.sort();
                v
            })
            .collect();
        groups.sort();
        assert_eq!(groups, vec![vec![1, 1], vec![2, 2], vec![9, 9]]);
        assert_eq!(plan.sum_of_maxima(), 12);
        assert!(!plan.is_ragged());
    }

    #[test]
    fn ragged_batch_takes_the_shortest_samples() {
        let ds = by_tokens(&[1, 5, 9]);
        let plan = build_ttl_plan(&ds, 2, &f(), 0).unwrap();
        assert!(plan.is_ragged());
        assert_eq!(plan.sum_of_maxima(), 10);
    }

    #[test]
    fn naive_plan_is_seeded() {
        let ds = clip_mixture(50, 1);
        let a = build_naive_plan(&ds, 5, &f(), 7).unwrap();
        let b = build_naive_plan(&ds, 5, &f(), 7).unwrap();
        assert_eq!(a, b);
        let single = build_naive_plan(&ds, 64, &f(), 7).unwrap();
        assert_eq!(single.iterations.len(), 1);
        assert_eq!(single.sum_of_maxima(), build_ttl_plan(&ds, 64, &f(), 7).unwrap().sum_of_maxima());
    }

    #[test]
    fn two_worker_idle_fraction() {
        let ds = by_tokens(&[1, 9]);
        let plan = build_naive_plan(&ds, 2, &f(), 0).unwrap();
        let rep = simulate_throughput(&plan, 2, &CostModel::linear()).unwrap();
        assert!((rep.idle_fractions[0] - (1.0 - 5.0 / 9.0)).abs() < 1e-15);
        assert!(simulate_throughput(&plan, 3, &CostModel::linear()).is_err());
    }

    #[test]
    fn uniform_dataset_has_no_idle_time() {
        let ds = by_tokens(&[4; 8]);
        let plan = build_naive_plan(&ds, 4, &f(), 0).unwrap();
        let rep = simulate_throughput(&plan, 4, &CostModel::quadratic()).unwrap();
        assert!(rep.idle_fractions.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn quadratic_cost_crossover() {
        let c = CostModel::quadratic();
        assert_eq!(c.cost(16_384), 2.0 * 16_384.0);
        assert!(CostModel::new(0.0, 0.0).is_err());
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let ok = "# comment\n{\"id\":\"a\",\"H\":512,\"W\":512,\"F\":49}\n\n";
        assert_eq!(parse_manifest(ok).unwrap().len(), 1);
        let bad = "{\"id\":\"a\",\"H\":512,\"W\":512,\"F\":49}\n{\"id\":\"b\",\"H\":512}\n";
        match parse_manifest(bad) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let round = parse_manifest(&write_manifest(&clip_mixture(10, 2))).unwrap();
        assert_eq!(round, clip_mixture(10, 2));
    }

    #[test]
    fn mixture_ranges() {
        let ds = clip_mixture(2000, 0);
        let toks: Vec<u64> = ds.iter().map(|m| token_length(m, &f()).unwrap()).collect();
        assert!(toks.iter().all(|&t| (832..=13_312).contains(&t)));
        let full = toks.iter().filter(|&&t| t == 13_312).count() as f64 / 2000.0;
        assert!((0.15..0.25).contains(&full), "{full}");
    }
}
