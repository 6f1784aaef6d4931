#![allow(dead_code)]

use hwlab_core::numerics::check::{finite_difference, relative_error};
use hwlab_core::numerics::{Graph, ParamSet, Tensor, Var};
use hwlab_core::Result;
use proptest::test_runner::{Config, RngSeed};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn seeded(cases: u32, seed: u64) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(seed),
        failure_persistence: None,
        ..Config::default()
    }
}

/// Fixed, non-symmetric readout weights so `Σ r ⊙ y` exercises every output entry.
pub fn readout(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| (0.7 * i as f64 + 0.3).sin() + 0.1)
}

/// Compares reverse-mode gradients of `Σ readout ⊙ build(inputs)` against
/// central differences. Returns the relative error.
pub fn gradcheck(inputs: &ParamSet, build: impl Fn(&Graph, &[Var]) -> Result<Var>) -> f64 {
    let names: Vec<String> = inputs.names().map(str::to_string).collect();
    let eval = |ps: &ParamSet, g: &Graph| -> Result<(Var, hwlab_core::numerics::BoundParams)> {
        let bound = g.bind(ps);
        let vars: Vec<Var> = names.iter().map(|n| bound.get(n)).collect::<Result<_>>()?;
        let y = build(g, &vars)?;
        let r = g.constant(readout(&g.shape(y)));
        let loss = g.sum(g.mul(y, r)?)?;
        Ok((loss, bound))
    };
    let g = Graph::new();
    let (loss, bound) = eval(inputs, &g).unwrap();
    let analytic = g.grad(loss, &bound).unwrap();
    let numeric = finite_difference(inputs, FD_STEP, |ps| {
        let g = Graph::new();
        let (loss, _) = eval(ps, &g)?;
        Ok(g.value(loss).item())
    })
    .unwrap();
    relative_error(&analytic, &numeric)
}

pub fn params(entries: Vec<(&str, Tensor)>) -> ParamSet {
    entries.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Rank of token `(f, h, w)` when the grid is flattened with axes in `order`
/// (slowest first), computed from coordinates alone.
pub fn rank_in_order(order: &str, extents: [usize; 3], coord: [usize; 3]) -> usize {
    order.chars().fold(0, |acc, c| {
        let axis = match c {
            'f' => 0,
            'h' => 1,
            'w' => 2,
            _ => unreachable!(),
        };
        acc * extents[axis] + coord[axis]
    })
}

pub const ORDERS: [&str; 6] = ["fhw", "fwh", "hfw", "hwf", "wfh", "whf"];

/// Dense masked attention over `[heads, seq, d]` with the per-head mask
/// `allowed(head, i, j)`, written with plain loops.
pub fn dense_masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, allowed: impl Fn(usize, usize, usize) -> bool) -> Tensor {
    let (heads, seq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; heads * seq * d];
    let scale = 1.0 / (d as f64).sqrt();
    for h in 0..heads {
        let at = |i: usize, c: usize| h * seq * d + i * d + c;
        for i in 0..seq {
            let scores: Vec<Option<f64>> = (0..seq)
                .map(|j| allowed(h, i, j).then(|| (0..d).map(|c| qd[at(i, c)] * kd[at(j, c)]).sum::<f64>() * scale))
                .collect();
            let m = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - m).exp())).collect();
            let z: f64 = w.iter().sum();
            for c in 0..d {
                out[at(i, c)] = (0..seq).map(|j| w[j] * vd[at(j, c)]).sum::<f64>() / z;
            }
        }
    }
    Tensor::new(vec![heads, seq, d], out).unwrap()
}

/// MSWA oracle: head `h` belongs to group `h / (heads / 6)`, whose order is
/// `ORDERS[group]`; keys within `size / 2` ranks are visible.
pub fn mswa_oracle(q: &Tensor, k: &Tensor, v: &Tensor, extents: [usize; 3], size: usize) -> Tensor {
    let heads = q.shape()[0];
    let per = heads / 6;
    let coord = |i: usize| [i / (extents[1] * extents[2]), (i / extents[2]) % extents[1], i % extents[2]];
    dense_masked_attention(q, k, v, |h, i, j| {
        let order = ORDERS[h / per];
        rank_in_order(order, extents, coord(i)).abs_diff(rank_in_order(order, extents, coord(j))) <= size / 2
    })
}

/// Six heads of width 2, two layers (the first MSWA with window 4), on a
/// 2×2×2 grid with two text tokens: under 5k parameters.
pub fn tiny_config() -> hwlab_core::model::ModelConfig {
    let dims = hwlab_core::attention::GridDims::new(2, 2, 2).unwrap();
    let mut cfg = hwlab_core::model::ModelConfig::toy(dims, 6, 2, 2, 2, 3).unwrap();
    cfg.ffn_mult = 1;
    cfg
}

pub struct RewardFixture {
    pub model: hwlab_core::model::Model,
    pub adapters: hwlab_core::model::LoraAdapters,
    pub decoder: hwlab_core::flow::DecoderStub,
    pub prompt: hwlab_core::flow::Prompt,
    pub cfg: hwlab_core::flow::RewardTrainerConfig,
    pub x_t: Tensor,
}

/// Random tiny model with random (nonzero) rank-2 adapters on every attention
/// projection and all three rewards active.
pub fn reward_fixture(k: usize, steps: usize, seed: u64) -> RewardFixture {
    use hwlab_core::flow::{DecoderStub, Prompt, RewardSpec, RewardTrainerConfig};
    use hwlab_core::model::{LoraAdapters, LoraConfig, Model};
    use rand::SeedableRng;

    let cfg = tiny_config();
    let model = Model::randomized(cfg.clone(), seed, 0.3).unwrap();
    let lcfg = LoraConfig {
        rank: 2,
        alpha: 2.0,
        targets: cfg.attention_projections(),
    };
    let mut adapters = LoraAdapters::new(lcfg, model.params(), seed + 1).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 2);
    let names: Vec<String> = adapters.params().names().map(str::to_string).collect();
    for n in names {
        let t = adapters.params_mut().get_mut(&n).unwrap();
        *t = Tensor::randn(t.shape(), 0.3, &mut rng);
    }
    let trainer = RewardTrainerConfig {
        k,
        f: 1,
        sampling_steps: steps,
        rewards: RewardSpec::parse_list("brightness:1,smoothness:0.5,center_mass:0.25").unwrap(),
        ..RewardTrainerConfig::default()
    };
    RewardFixture {
        decoder: DecoderStub::new(cfg.hidden(), 2, seed + 3).unwrap(),
        prompt: Prompt::synthetic("p", cfg.text_len, cfg.text_dim, seed + 4).unwrap(),
        x_t: Tensor::randn(&[cfg.dims.seq(), cfg.hidden()], 1.0, &mut rng),
        model,
        adapters,
        cfg: trainer,
    }
}

/// Truncated objective value and its gradient w.r.t. `live` adapter values;
/// the detached prefix always runs on `fx.adapters`.
pub fn truncated_loss_and_grad(fx: &RewardFixture, live: &ParamSet) -> (f64, ParamSet) {
    use hwlab_core::flow::{truncated_reward_objective, Adapted, FlowSchedule};
    use hwlab_core::model::Weights;

    let g = Graph::new();
    let base = g.bind_frozen(fx.model.params());
    let lora = g.bind(live);
    let w = Weights {
        base: &base,
        lora: Some((&lora, fx.adapters.config())),
    };
    let frozen = Adapted {
        model: &fx.model,
        adapters: &fx.adapters,
    };
    let sched = FlowSchedule::uniform(fx.cfg.sampling_steps).unwrap();
    let obj = truncated_reward_objective(&g, &fx.model, &w, &frozen, &fx.prompt, &fx.x_t, &sched, &fx.decoder, &fx.cfg).unwrap();
    assert_eq!(obj.live_evals, fx.cfg.k);
    let value = g.value(obj.loss).item();
    (value, g.grad(obj.loss, &lora).unwrap())
}

pub fn truncated_gradcheck(fx: &RewardFixture) -> f64 {
    let (_, analytic) = truncated_loss_and_grad(fx, fx.adapters.params());
    let numeric = finite_difference(fx.adapters.params(), FD_STEP, |ps| Ok(truncated_loss_and_grad(fx, ps).0)).unwrap();
    relative_error(&analytic, &numeric)
}

/// Same objective built as one graph over all `T` steps, with the state
/// detached in-graph after step `T - K`.
pub fn detached_chain_grad(fx: &RewardFixture) -> (f64, ParamSet) {
    use hwlab_core::flow::FlowSchedule;
    use hwlab_core::model::Weights;

    let g = Graph::new();
    let base = g.bind_frozen(fx.model.params());
    let lora = g.bind(fx.adapters.params());
    let w = Weights {
        base: &base,
        lora: Some((&lora, fx.adapters.config())),
    };
    let sched = FlowSchedule::uniform(fx.cfg.sampling_steps).unwrap();
    let steps = sched.steps();
    let mut state = g.constant(fx.x_t.clone());
    for i in 0..steps {
        if i == steps - fx.cfg.k {
            state = g.detach(state);
        }
        let (t, dt) = sched.step(i);
        let v = fx.model.forward_graph(&g, &w, state, &fx.prompt.text, t).unwrap();
        state = g.sub(state, g.scale(v, dt).unwrap()).unwrap();
    }
    let frames = fx.decoder.decode_graph(&g, state, fx.model.config().dims, fx.cfg.f).unwrap();
    let mut loss = g.constant(Tensor::scalar(0.0));
    for spec in &fx.cfg.rewards {
        let r = spec.graph(&g, frames).unwrap();
        loss = g.add(loss, g.scale(r, -spec.weight).unwrap()).unwrap();
    }
    (g.value(loss).item(), g.grad(loss, &lora).unwrap())
}

/// Minimum over every partition of `tokens` into groups of `batch` (plus one
/// group of `len % batch` when that is nonzero) of the sum of group maxima.
pub fn exhaustive_min_sum_of_maxima(tokens: &[u64], batch: usize) -> u64 {
    // `ragged` is the size of the short group still to be formed (0 if none)
    fn go(items: &[u64], batch: usize, ragged: usize) -> u64 {
        let Some((&first, rest)) = items.split_first() else { return 0 };
        let mut best = u64::MAX;
        for (size, next) in [(batch, ragged), (ragged, 0)] {
            if size == 0 || size > items.len() {
                continue;
            }
            let left = items.len() - size;
            if left < next || (left - next) % batch != 0 {
                continue;
            }
            for_each_subset(rest, size - 1, &mut |chosen, others| {
                let max = chosen.iter().copied().fold(first, u64::max);
                best = best.min(max + go(others, batch, next));
            });
        }
        best
    }
    go(tokens, batch, tokens.len() % batch)
}

/// Calls `f(chosen, others)` for every `k`-subset of `items`.
fn for_each_subset(items: &[u64], k: usize, f: &mut dyn FnMut(&[u64], &[u64])) {
    fn rec(items: &[u64], k: usize, i: usize, chosen: &mut Vec<u64>, others: &mut Vec<u64>, f: &mut dyn FnMut(&[u64], &[u64])) {
        if chosen.len() == k {
            let n = others.len();
            others.extend_from_slice(&items[i..]);
            f(chosen, others);
            others.truncate(n);
            return;
        }
        if items.len() - i < k - chosen.len() {
            return;
        }
        chosen.push(items[i]);
        rec(items, k, i + 1, chosen, others, f);
        chosen.pop();
        others.push(items[i]);
        rec(items, k, i + 1, chosen, others, f);
        others.pop();
    }
    rec(items, k, 0, &mut vec![], &mut vec![], f);
}

/// Samples `16 × 16t × 1`, which have exactly `t` tokens each.
pub fn samples_with_tokens(tokens: &[u64]) -> Vec<hwlab_core::bucketing::SampleMeta> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| hwlab_core::bucketing::SampleMeta::new(format!("s{i}"), 16, 16 * t as usize, 1))
        .collect()
}
