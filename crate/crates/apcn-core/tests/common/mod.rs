//! Shared helpers for integration tests: a small configuration that keeps
//! episodes fast, and a central finite-difference oracle.

use apcn_core::autodiff::{Tape, Tensor, Var};
use apcn_core::config::ApcnConfig;

/// Desk-size configuration: 12px images, 6px frames, 3px glimpses.
pub fn tiny_config() -> ApcnConfig {
    let mut cfg = ApcnConfig::mnist();
    cfg.image_side = 12;
    cfg.macro_steps = 2;
    cfg.micro_steps = 2;
    cfg.top_size = 20;
    cfg.bottom_size = 10;
    cfg.option_size = 8;
    cfg.decoder_hidden = 16;
    cfg.feature_hidden = 16;
    cfg.rb_glimpses = 4;
    cfg.batch_size = 4;
    cfg.eval_subset = 0;
    cfg
}

/// Deterministic pseudo-image with smooth structure.
pub fn test_image(n: usize, phase: f64) -> Tensor {
    let mut vals = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let v = 0.5
                + 0.5
                    * ((x as f64 * 0.7 + phase).sin() * (y as f64 * 0.5 - phase).cos());
            vals.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![n, n], vals)
}

/// Random images drawn uniformly, for episode sweeps.
pub fn random_image(n: usize, rng: &mut impl rand::Rng) -> Tensor {
    Tensor::new(
        vec![n, n],
        (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
}

/// Analytic-vs-central-difference check for a scalar-valued graph.
///
/// `build` must construct the same graph for any leaf values; the oracle
/// perturbs each element of each leaf by ±`step` and compares the resulting
/// slope with the tape gradient at relative tolerance `tol`.
pub fn check_gradients(
    leaves: &[Tensor],
    step: f64,
    tol: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) {
    let loss_at = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.numel(loss), 1, "oracle needs a scalar loss");
        tape.vals(loss)[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("backward");

    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = tape.grad_or_zero(vars[li]);
        for i in 0..leaf.numel() {
            let mut plus = leaves.to_vec();
            plus[li].vals_mut()[i] += step;
            let mut minus = leaves.to_vec();
            minus[li].vals_mut()[i] -= step;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
            let a = analytic.vals()[i];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() <= tol * denom,
                "leaf {li} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
