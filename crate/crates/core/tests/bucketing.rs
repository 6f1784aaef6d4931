mod common;

use common::{exhaustive_min_sum_of_maxima, samples_with_tokens, seeded};
use hwlab_core::bucketing::{
    build_naive_plan, build_ttl_plan, clip_mixture, parse_manifest, simulate_throughput, token_length, CostModel,
    SampleMeta, TokenFormula,
};
use proptest::prelude::*;

fn formula() -> TokenFormula {
    TokenFormula::default()
}

#[test]
fn oracle_hand_cases() {
    assert_eq!(exhaustive_min_sum_of_maxima(&[1, 1, 2, 2, 9, 9], 2), 12);
    assert_eq!(exhaustive_min_sum_of_maxima(&[9, 1, 5], 2), 10);
    assert_eq!(exhaustive_min_sum_of_maxima(&[3, 1, 2], 1), 6);
    assert_eq!(exhaustive_min_sum_of_maxima(&[4, 8, 1, 2, 7], 5), 8);
}

proptest! {
    #![proptest_config(seeded(80, 51))]

    #[test]
    fn ttl_attains_the_exhaustive_minimum(
        tokens in prop::collection::vec(1u64..=40, 1..=10),
        batch in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let plan = build_ttl_plan(&samples_with_tokens(&tokens), batch, &formula(), seed).unwrap();
        prop_assert_eq!(plan.sum_of_maxima(), exhaustive_min_sum_of_maxima(&tokens, batch));
    }

    #[test]
    fn plans_cover_every_sample_once(tokens in prop::collection::vec(1u64..=50, 1..=40), batch in 1usize..=7, seed in any::<u64>()) {
        let ds = samples_with_tokens(&tokens);
        let ttl = build_ttl_plan(&ds, batch, &formula(), seed).unwrap();
        let naive = build_naive_plan(&ds, batch, &formula(), seed).unwrap();
        for plan in [&ttl, &naive] {
            let mut seen: Vec<usize> = plan.iterations.iter().flatten().copied().collect();
            seen.sort();
            prop_assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
            prop_assert!(plan.iterations.iter().filter(|it| it.len() != batch).count() <= 1);
            prop_assert_eq!(plan.is_ragged(), ds.len() % batch != 0);
        }
        prop_assert_eq!(ttl.total_tokens(), naive.total_tokens());
        prop_assert!(ttl.sum_of_maxima() <= naive.sum_of_maxima());
        for cost in [CostModel::linear(), CostModel::quadratic()] {
            let a = simulate_throughput(&ttl, batch, &cost).unwrap();
            let b = simulate_throughput(&naive, batch, &cost).unwrap();
            prop_assert_eq!(a.total_tokens, b.total_tokens);
            prop_assert!(a.tokens_per_time >= b.tokens_per_time * (1.0 - 1e-12));
        }
    }

    #[test]
    fn token_length_is_monotone(h in 1usize..=48, w in 1usize..=48, f in 0usize..=20) {
        let frames = 4 * f + 1;
        let base = token_length(&SampleMeta::new("x", 16 * h, 16 * w, frames), &formula()).unwrap();
        prop_assert!(base >= 1);
        prop_assert!(token_length(&SampleMeta::new("x", 16 * (h + 1), 16 * w, frames), &formula()).unwrap() > base);
        prop_assert!(token_length(&SampleMeta::new("x", 16 * h, 16 * (w + 1), frames), &formula()).unwrap() > base);
        prop_assert!(token_length(&SampleMeta::new("x", 16 * h, 16 * w, frames + 4), &formula()).unwrap() > base);
    }
}

#[test]
fn naive_is_never_better_over_seeds() {
    let ds = clip_mixture(100, 3);
    let ttl = build_ttl_plan(&ds, 8, &formula(), 0).unwrap();
    for seed in 0..50 {
        let naive = build_naive_plan(&ds, 8, &formula(), seed).unwrap();
        assert!(naive.sum_of_maxima() >= ttl.sum_of_maxima());
    }
}

#[test]
fn batch_of_one_matches_naive() {
    let ds = clip_mixture(30, 4);
    let ttl = simulate_throughput(&build_ttl_plan(&ds, 1, &formula(), 1).unwrap(), 1, &CostModel::quadratic()).unwrap();
    let naive = simulate_throughput(&build_naive_plan(&ds, 1, &formula(), 2).unwrap(), 1, &CostModel::quadratic()).unwrap();
    assert_eq!(ttl.total_tokens, naive.total_tokens);
    assert!((ttl.tokens_per_time - naive.tokens_per_time).abs() < 1e-9 * ttl.tokens_per_time);
}

#[test]
fn shipped_manifests_parse() {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let small = parse_manifest(&std::fs::read_to_string(format!("{root}/six_samples.jsonl")).unwrap()).unwrap();
    let toks: Vec<u64> = small.iter().map(|m| token_length(m, &formula()).unwrap()).collect();
    let mut sorted = toks.clone();
    sorted.sort();
    assert_eq!(sorted, vec![1, 1, 2, 2, 9, 9]);
    assert_eq!(build_ttl_plan(&small, 2, &formula(), 0).unwrap().sum_of_maxima(), 12);

    let mix = parse_manifest(&std::fs::read_to_string(format!("{root}/clip_mixture.jsonl")).unwrap()).unwrap();
    assert!(mix.len() >= 256 * 8);
    assert!(mix.iter().all(|m| token_length(m, &formula()).is_ok()));
}
