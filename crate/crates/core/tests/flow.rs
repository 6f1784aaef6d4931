mod common;

use common::{detached_chain_grad, reward_fixture, seeded, tiny_config, truncated_gradcheck, truncated_loss_and_grad, FD_TOL};
use hwlab_core::attention::GridDims;
use hwlab_core::flow::{
    add_noise, euler_sample, reward_finetune, rf_loss, rf_loss_graph, train_rectified_flow, window_mean, DecoderStub,
    FlowSchedule, FnField, OptimizerKind, Prompt, RewardSpec, RewardTrainerConfig, RfTrainConfig,
};
use hwlab_core::model::{LoraAdapters, LoraConfig, Model, TextFeatures, Weights};
use hwlab_core::numerics::check::relative_error;
use hwlab_core::numerics::{Graph, ParamSet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn noise(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(seeded(32, 41))]

    #[test]
    fn exact_velocity_recovers_data(steps in 1usize..=50, seed in any::<u64>()) {
        let x0 = noise(&[3, 4], seed);
        let eps = noise(&[3, 4], seed ^ 9);
        // on the straight path the velocity at (x, t) is (x - x0) / t
        let field = FnField(|x: &Tensor, t: f64| x.zip_with(&x0, "v", |a, b| (a - b) / t));
        let (out, _) = euler_sample(&field, &eps, &TextFeatures::empty(), &FlowSchedule::uniform(steps).unwrap()).unwrap();
        prop_assert!(out.max_abs_diff(&x0) < 1e-9);
    }

    #[test]
    fn constant_fields_integrate_exactly(steps in 1usize..=40, seed in any::<u64>()) {
        let x = noise(&[5], seed);
        let c = noise(&[5], seed ^ 3);
        let field = FnField(|_: &Tensor, _| Ok(c.clone()));
        let (out, _) = euler_sample(&field, &x, &TextFeatures::empty(), &FlowSchedule::uniform(steps).unwrap()).unwrap();
        let want = x.zip_with(&c, "d", |a, b| a - b).unwrap();
        prop_assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn noising_path_is_linear(t in 0.0f64..=1.0, seed in any::<u64>()) {
        let x0 = noise(&[4], seed);
        let eps = noise(&[4], seed ^ 5);
        let xt = add_noise(&x0, &eps, t).unwrap();
        for i in 0..4 {
            let want = (1.0 - t) * x0.data()[i] + t * eps.data()[i];
            prop_assert!((xt.data()[i] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn rf_loss_is_the_velocity_mse() {
    let cfg = tiny_config();
    let model = Model::randomized(cfg.clone(), 1, 0.3).unwrap();
    let text = TextFeatures::random(2, 3, 1.0, 2).unwrap();
    let x0 = noise(&[8, 12], 3);
    let eps = noise(&[8, 12], 4);
    let t = 0.3;
    let pred = model.forward(&add_noise(&x0, &eps, t).unwrap(), &text, t).unwrap();
    let mut mse = 0.0;
    for i in 0..pred.numel() {
        let d = pred.data()[i] - (eps.data()[i] - x0.data()[i]);
        mse += d * d;
    }
    mse /= pred.numel() as f64;
    assert!((rf_loss(&model, &x0, &text, t, &eps).unwrap() - mse).abs() < 1e-14);
}

#[test]
fn zero_model_has_zero_loss_and_gradient_on_matching_endpoints() {
    let cfg = tiny_config();
    let zero: ParamSet = cfg.param_shapes().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect();
    let model = Model::from_parts(cfg, zero).unwrap();
    let x0 = noise(&[8, 12], 5);
    let g = Graph::new();
    let bound = g.bind(model.params());
    let loss = rf_loss_graph(&g, &model, &Weights::base(&bound), &x0, &TextFeatures::empty(), 0.5, &x0).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
    assert_eq!(g.grad(loss, &bound).unwrap().global_norm(), 0.0);
}

#[test]
fn toy_training_reduces_the_loss() {
    let cfg = tiny_config();
    let mut model = Model::init(cfg, 6).unwrap();
    let data: Vec<Tensor> = (0..4).map(|i| noise(&[8, 12], 100 + i).scale(0.5)).collect();
    let text = TextFeatures::random(2, 3, 1.0, 7).unwrap();
    let run = RfTrainConfig {
        steps: 150,
        learning_rate: 1e-2,
        seed: 8,
    };
    let losses = train_rectified_flow(&mut model, &data, &text, &run).unwrap();
    assert!(window_mean(&losses, 130..150) < window_mean(&losses, 0..20));
}

#[test]
fn full_truncation_is_the_whole_chain() {
    let fx = reward_fixture(3, 3, 50);
    let (loss_a, ga) = truncated_loss_and_grad(&fx, fx.adapters.params());
    let (loss_b, gb) = detached_chain_grad(&fx);
    assert_eq!(loss_a, loss_b);
    assert!(relative_error(&ga, &gb) < 1e-12);
}

#[test]
fn detached_prefix_equals_constant_state() {
    for k in [1, 2, 3] {
        let fx = reward_fixture(k, 4, 60 + k as u64);
        let (loss_a, ga) = truncated_loss_and_grad(&fx, fx.adapters.params());
        let (loss_b, gb) = detached_chain_grad(&fx);
        assert_eq!(loss_a, loss_b);
        for (name, t) in ga.iter() {
            assert!(t.max_abs_diff(gb.get(name).unwrap()) <= 1e-12, "{name}");
        }
    }
}

#[test]
fn truncated_gradients_match_finite_differences() {
    let fx = reward_fixture(2, 4, 70);
    let err = truncated_gradcheck(&fx);
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn decoding_one_frame_ignores_later_latent_frames() {
    let dims = GridDims::new(3, 2, 2).unwrap();
    let dec = DecoderStub::new(5, 2, 1).unwrap();
    let specs = RewardSpec::parse_list("brightness:1,smoothness:1,center_mass:1").unwrap();
    let latent = noise(&[12, 5], 2);
    let mut perturbed = latent.clone();
    for v in &mut perturbed.data_mut()[4 * 5..] {
        *v += 3.7;
    }
    let eval = |z: &Tensor| {
        let g = Graph::new();
        let x = g.variable(z.clone());
        let frames = dec.decode_graph(&g, x, dims, 1).unwrap();
        let mut total = g.constant(Tensor::scalar(0.0));
        for s in &specs {
            total = g.add(total, s.graph(&g, frames).unwrap()).unwrap();
        }
        let grads = g.backward(total).unwrap();
        (g.value(total).item(), grads.wrt(&g, x))
    };
    let (r0, g0) = eval(&latent);
    let (r1, g1) = eval(&perturbed);
    assert_eq!(r0, r1);
    assert_eq!(g0, g1);
    assert!(g0.data()[4 * 5..].iter().all(|&v| v == 0.0));
    assert!(g0.data()[..4 * 5].iter().any(|&v| v != 0.0));
}

fn finetune_setup(cfg: &RewardTrainerConfig) -> (Model, LoraAdapters, DecoderStub, Vec<Prompt>) {
    let mcfg = tiny_config();
    let model = Model::init(mcfg.clone(), 80).unwrap();
    let lcfg = LoraConfig {
        rank: cfg.lora_rank,
        alpha: cfg.lora_alpha,
        targets: mcfg.attention_projections(),
    };
    let adapters = LoraAdapters::new(lcfg, model.params(), 81).unwrap();
    let decoder = DecoderStub::new(mcfg.hidden(), 2, 82).unwrap();
    let prompts = vec![Prompt::synthetic("a", 2, 3, 83).unwrap(), Prompt::synthetic("b", 2, 3, 84).unwrap()];
    (model, adapters, decoder, prompts)
}

fn short_run() -> RewardTrainerConfig {
    RewardTrainerConfig {
        k: 2,
        f: 1,
        sampling_steps: 4,
        steps: 4,
        learning_rate: 0.05,
        rewards: RewardSpec::parse_list("brightness:1,smoothness:0.5").unwrap(),
        seed: 5,
        ..RewardTrainerConfig::default()
    }
}

#[test]
fn finetuning_is_reproducible() {
    let cfg = short_run();
    let run = || {
        let (model, mut ad, dec, prompts) = finetune_setup(&cfg);
        let log = reward_finetune(&model, &mut ad, &prompts, &dec, &cfg).unwrap();
        (log.to_csv(), ad)
    };
    let (a, ad_a) = run();
    let (b, ad_b) = run();
    assert_eq!(a, b);
    assert_eq!(ad_a, ad_b);
    assert!(a.starts_with("step,reward_brightness,reward_smoothness,combined_reward,loss,grad_norm,update_norm"));
}

#[test]
fn zero_learning_rate_leaves_adapters() {
    let cfg = RewardTrainerConfig {
        learning_rate: 0.0,
        ..short_run()
    };
    let (model, mut ad, dec, prompts) = finetune_setup(&cfg);
    let before = ad.clone();
    let log = reward_finetune(&model, &mut ad, &prompts, &dec, &cfg).unwrap();
    assert_eq!(ad, before);
    assert!(log.rows.iter().all(|r| r.update_norm == 0.0));
}

#[test]
fn zero_reward_weights_give_flat_curves() {
    let cfg = RewardTrainerConfig {
        rewards: RewardSpec::parse_list("brightness:0,smoothness:0").unwrap(),
        ..short_run()
    };
    let (model, mut ad, dec, prompts) = finetune_setup(&cfg);
    let log = reward_finetune(&model, &mut ad, &prompts, &dec, &cfg).unwrap();
    assert!(log.rows.iter().all(|r| r.combined == 0.0 && r.grad_norm == 0.0));
}

#[test]
fn momentum_and_adam_configs_run() {
    for opt in [OptimizerKind::Sgd { momentum: 0.9 }, OptimizerKind::Adam] {
        let cfg = RewardTrainerConfig {
            optimizer: opt,
            learning_rate: 1e-3,
            ..short_run()
        };
        let (model, mut ad, dec, prompts) = finetune_setup(&cfg);
        let log = reward_finetune(&model, &mut ad, &prompts, &dec, &cfg).unwrap();
        assert_eq!(log.rows.len(), 4);
    }
}

#[test]
fn invalid_truncation_is_rejected() {
    let cfg = RewardTrainerConfig { k: 5, ..short_run() };
    let (model, mut ad, dec, prompts) = finetune_setup(&cfg);
    assert!(reward_finetune(&model, &mut ad, &prompts, &dec, &cfg).is_err());
    let cfg = RewardTrainerConfig { f: 3, ..short_run() };
    assert!(reward_finetune(&model, &mut ad, &prompts, &dec, &cfg).is_err());
}
