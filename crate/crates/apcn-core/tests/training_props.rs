//! Reward-ledger algebra, location-penalty shape, and training smoke tests.

mod common;

use apcn_core::autodiff::{ParamStore, Tape, Tensor};
use apcn_core::model::{Apcn, EpisodeModel, Mode};
use apcn_core::training::{
    dense_rewards, episode_losses, location_penalty, rewards_from_losses, Adam,
};
use common::{test_image, tiny_config};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn reward_arithmetic_matches_worked_example() {
    // losses 1.0 -> 0.7 -> 0.6 give rewards 0.3, 0.1 and a return of 0.4
    let ledger = rewards_from_losses(&[1.0], &[vec![0.7, 0.6]]);
    assert_eq!(ledger.micro_rewards[0], vec![
        0.30000000000000004,
        0.09999999999999998
    ]);
    assert!((ledger.micro_returns[0][0] - 0.4).abs() < 1e-12);
    assert!((ledger.micro_returns[0][1] - 0.1).abs() < 1e-12);
    // the single macro reward spans entry to final loss
    assert!((ledger.macro_rewards[0] - 0.4).abs() < 1e-12);
}

#[test]
fn constant_task_loss_gives_zero_rewards() {
    let ledger = rewards_from_losses(&[0.5, 0.5], &[vec![0.5; 3], vec![0.5; 3]]);
    assert!(ledger.micro_rewards.iter().flatten().all(|&r| r == 0.0));
    assert!(ledger.macro_rewards.iter().all(|&r| r == 0.0));
}

proptest! {
    /// Within each macro-step the micro rewards telescope exactly:
    /// Σ_j R_{t,j} = entry_t − final_t, and Φ_{t,1} equals that sum.
    #[test]
    fn micro_rewards_telescope(
        seqs in prop::collection::vec(
            (0.0f64..2.0, prop::collection::vec(0.0f64..2.0, 1..6)),
            1..5
        )
    ) {
        let entry: Vec<f64> = seqs.iter().map(|(e, _)| *e).collect();
        let micro: Vec<Vec<f64>> = seqs.iter().map(|(_, m)| m.clone()).collect();
        let ledger = rewards_from_losses(&entry, &micro);
        for t in 0..entry.len() {
            let sum: f64 = ledger.micro_rewards[t].iter().sum();
            let expected = entry[t] - micro[t].last().unwrap();
            let scale = sum.abs().max(expected.abs()).max(1.0);
            prop_assert!((sum - expected).abs() <= 1e-9 * scale);
            prop_assert!((ledger.micro_returns[t][0] - sum).abs() <= 1e-9 * scale);
        }
        // macro rewards telescope across the whole episode
        let total: f64 = ledger.macro_rewards.iter().sum();
        let expected = entry[0] - micro.last().unwrap().last().unwrap();
        let scale = total.abs().max(expected.abs()).max(1.0);
        prop_assert!((total - expected).abs() <= 1e-9 * scale);
        prop_assert!((ledger.macro_returns[0] - total).abs() <= 1e-9 * scale);
    }

    /// The location penalty is even and non-decreasing in |l| beyond the
    /// threshold.
    #[test]
    fn penalty_is_even_and_grows_outside_threshold(l in -2.0f64..2.0) {
        let c = 0.75;
        let alpha = 0.2;
        let eval = |x: f64| {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::vector(vec![x]));
            let p = location_penalty(&mut tape, v, c, alpha).unwrap();
            tape.vals(p)[0]
        };
        let here = eval(l);
        let mirrored = eval(-l);
        prop_assert!((here - mirrored).abs() < 1e-12);
        if l.abs() > c {
            let further = eval(l.signum() * (l.abs() + 0.1));
            prop_assert!(further >= here - 1e-12);
        }
        prop_assert!(here >= -1e-12);
    }
}

#[test]
fn penalty_matches_hand_computed_values() {
    let alpha = 0.2;
    let c = 0.75;
    let eval = |x: f64, c: f64| {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![x]));
        let p = location_penalty(&mut tape, v, c, alpha).unwrap();
        tape.vals(p)[0]
    };
    // center: exact zero by the leaky cancellation
    assert!(eval(0.0, c).abs() < 1e-15);
    // at the threshold: (0)² + (0.2·1.5)² − 2(0.2·0.75)² = 0.045
    assert!((eval(c, c) - 0.045).abs() < 1e-12);
    // gradient at the center is exactly zero
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
    let p = location_penalty(&mut tape, v, c, alpha).unwrap();
    tape.backward(p).unwrap();
    assert!(tape.grad(v).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn hundred_seeded_episodes_have_finite_losses() {
    let cfg = tiny_config();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Apcn::new(&mut store, &cfg, &mut rng);
    for seed in 0..100u64 {
        let img = test_image(cfg.image_side, seed as f64 * 0.017);
        let mut erng = ChaCha8Rng::seed_from_u64(seed);
        let (mut tape, trace) = model
            .run_episode(&store, &img, &Mode::Train, &mut erng)
            .unwrap();
        let ledger = dense_rewards(&tape, &trace);
        let losses = episode_losses(&mut tape, &trace, &ledger, &model, &cfg).unwrap();
        for v in [losses.total, losses.state, losses.action, losses.baseline] {
            assert!(tape.vals(v)[0].is_finite(), "seed {seed}");
        }
    }
}

#[test]
fn adam_descends_a_quadratic() {
    use apcn_core::autodiff::{GradStore, System};
    let mut store = ParamStore::new();
    let id = store.register("x", System::Action, Tensor::vector(vec![5.0, -3.0]));
    let mut adam = Adam::new(&store, 0.05);
    for _ in 0..2000 {
        let mut grads = GradStore::zeros_like(&store);
        {
            let x = store.value(id).vals();
            let g = grads.get_mut(id);
            g[0] = 2.0 * x[0];
            g[1] = 2.0 * x[1];
        }
        adam.step(&mut store, &grads);
    }
    let x = store.value(id).vals();
    assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2, "{x:?}");
}

#[test]
fn short_training_run_reduces_prediction_loss() {
    // two-level model on a handful of synthetic images: the summed loss
    // after a few dozen Adam steps must drop substantially
    let mut cfg = tiny_config();
    cfg.epochs = 4;
    cfg.batch_size = 8;
    cfg.learning_rate = 3e-3;
    cfg.eval_subset = 0;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Apcn::new(&mut store, &cfg, &mut rng);
    let train: Vec<Tensor> = (0..16).map(|i| test_image(cfg.image_side, i as f64 * 0.2)).collect();
    let eval: Vec<Tensor> = (0..4).map(|i| test_image(cfg.image_side, i as f64 * 0.2 + 0.05)).collect();

    let before = apcn_core::training::evaluate_mse(&model, &store, &eval, 9).unwrap();
    let mut adam = Adam::new(&store, cfg.learning_rate);
    let outcome = apcn_core::training::train_episodic(
        &model,
        &mut store,
        &mut adam,
        &train,
        &eval,
        &cfg,
        0,
        None,
        |_, _, _| Ok(()),
    )
    .unwrap();
    let after = outcome.final_eval_mse;
    assert!(
        after < before,
        "eval mse should improve: before {before}, after {after}"
    );
}

#[test]
fn deterministic_mode_reproduces_batch_gradients() {
    let mut cfg = tiny_config();
    cfg.deterministic = true;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Apcn::new(&mut store, &cfg, &mut rng);
    let images: Vec<Tensor> = (0..6).map(|i| test_image(cfg.image_side, i as f64 * 0.3)).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let seeds: Vec<u64> = (0..6).collect();
    let (g1, s1) =
        apcn_core::training::batch_gradients(&model, &store, &refs, &seeds, &cfg).unwrap();
    let (g2, s2) =
        apcn_core::training::batch_gradients(&model, &store, &refs, &seeds, &cfg).unwrap();
    assert_eq!(s1.total_loss.to_bits(), s2.total_loss.to_bits());
    for id in store.ids() {
        let a = g1.get(id);
        let b = g2.get(id);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
