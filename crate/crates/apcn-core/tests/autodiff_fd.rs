//! Finite-difference verification of the reverse-mode engine: every
//! primitive, random composite graphs, and a 3-layer network.

mod common;

use apcn_core::autodiff::{Tape, Tensor, Var};
use common::check_gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    // keep values away from relu/leaky kinks so central differences are clean
    Tensor::vector(
        (0..n)
            .map(|_| {
                let mag: f64 = rng.random_range(0.2..1.2);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
    )
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let v = rand_vec(rng, r * c);
    Tensor::matrix(r, c, v.vals().to_vec())
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // matmul, matrix × matrix and matrix × vector
    check_gradients(
        &[rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 4, 2)],
        STEP,
        TOL,
        |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            t.sum_squares(y)
        },
    );
    check_gradients(
        &[rand_matrix(&mut rng, 3, 4), rand_vec(&mut rng, 4)],
        STEP,
        TOL,
        |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            t.sum_squares(y)
        },
    );

    // elementwise pairs
    for op in ["add", "sub", "mul"] {
        check_gradients(
            &[rand_vec(&mut rng, 5), rand_vec(&mut rng, 5)],
            STEP,
            TOL,
            move |t, v| {
                let y = match op {
                    "add" => t.add(v[0], v[1]).unwrap(),
                    "sub" => t.sub(v[0], v[1]).unwrap(),
                    _ => t.mul(v[0], v[1]).unwrap(),
                };
                t.sum_squares(y)
            },
        );
    }

    // unary activations and reductions
    check_gradients(&[rand_vec(&mut rng, 6)], STEP, TOL, |t, v| {
        let y = t.relu(v[0]);
        t.sum_squares(y)
    });
    check_gradients(&[rand_vec(&mut rng, 6)], STEP, TOL, |t, v| {
        let y = t.leaky_relu(v[0], 0.2);
        t.sum_squares(y)
    });
    check_gradients(&[rand_vec(&mut rng, 6)], STEP, TOL, |t, v| {
        let y = t.tanh(v[0]);
        t.sum_squares(y)
    });
    check_gradients(&[rand_vec(&mut rng, 6)], STEP, TOL, |t, v| {
        let y = t.sigmoid(v[0]);
        t.sum_squares(y)
    });
    check_gradients(&[rand_vec(&mut rng, 6)], STEP, TOL, |t, v| t.mean(v[0]));
    check_gradients(&[rand_vec(&mut rng, 6)], STEP, TOL, |t, v| {
        t.sum_squares(v[0])
    });
    check_gradients(&[rand_vec(&mut rng, 6)], STEP, TOL, |t, v| {
        let y = t.scale(v[0], -1.7);
        t.sum_squares(y)
    });

    // structure ops
    check_gradients(
        &[rand_vec(&mut rng, 3), rand_vec(&mut rng, 4)],
        STEP,
        TOL,
        |t, v| {
            let y = t.concat(&[v[0], v[1]]).unwrap();
            t.sum_squares(y)
        },
    );
    check_gradients(&[rand_vec(&mut rng, 8)], STEP, TOL, |t, v| {
        let y = t.slice(v[0], 2, 4).unwrap();
        t.sum_squares(y)
    });
    check_gradients(&[rand_vec(&mut rng, 6)], STEP, TOL, |t, v| {
        let y = t.reshape(v[0], vec![2, 3]).unwrap();
        let z = t.matmul(y, v[0]).unwrap_or(y);
        t.sum_squares(z)
    });

    // softmax cross-entropy
    check_gradients(&[rand_vec(&mut rng, 5)], STEP, TOL, |t, v| {
        t.softmax_cross_entropy(v[0], 2).unwrap()
    });

    // bilinear patch: gradients w.r.t. image and location
    let img = rand_matrix(&mut rng, 8, 8);
    let loc = Tensor::vector(vec![0.123, -0.271]);
    check_gradients(&[img, loc], STEP, TOL, |t, v| {
        let p = t.extract_patch(v[0], v[1], 4).unwrap();
        let m = t.mean(p);
        t.scale(m, 3.0)
    });

    // downsample: gradient w.r.t. image
    let img = rand_matrix(&mut rng, 9, 9);
    check_gradients(&[img], STEP, TOL, |t, v| {
        let d = t.downsample(v[0], 4).unwrap();
        t.sum_squares(d)
    });
}

#[test]
fn glimpse_location_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for case in 0..5 {
        let img = rand_matrix(&mut rng, 10, 10);
        let loc = Tensor::vector(vec![
            rng.random_range(-0.6..0.6) + 0.013,
            rng.random_range(-0.6..0.6) + 0.007,
        ]);
        check_gradients(&[img, loc], STEP, TOL, move |t, v| {
            let p = t.extract_patch(v[0], v[1], 5).unwrap();
            let _ = case;
            t.mean(p)
        });
    }
}

/// Build a random graph over a pool of leaves; loss couples every node.
fn random_graph(ops: usize, seed: u64) -> (Vec<Tensor>, impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_leaves = rng.random_range(2..=4);
    let len = rng.random_range(3..=5);
    let leaves: Vec<Tensor> = (0..n_leaves).map(|_| rand_vec(&mut rng, len)).collect();
    let choices: Vec<u32> = (0..ops).map(|_| rng.random_range(0..8)).collect();
    let picks: Vec<(usize, usize)> = (0..ops)
        .map(|_| {
            (
                rng.random_range(0..64) as usize,
                rng.random_range(0..64) as usize,
            )
        })
        .collect();
    let build = move |t: &mut Tape, vars: &[Var]| -> Var {
        let mut pool: Vec<Var> = vars.to_vec();
        for (op, &(pa, pb)) in choices.iter().zip(&picks) {
            let a = pool[pa % pool.len()];
            let b = pool[pb % pool.len()];
            let next = match op {
                0 => t.add(a, b).ok(),
                1 => t.sub(a, b).ok(),
                2 => t.mul(a, b).ok(),
                3 => Some(t.tanh(a)),
                4 => Some(t.sigmoid(a)),
                5 => Some(t.leaky_relu(a, 0.3)),
                6 => Some(t.scale(a, 0.7)),
                _ => t.concat(&[a, b]).ok(),
            };
            if let Some(v) = next {
                pool.push(v);
            }
        }
        // couple every node into the loss so each leaf is reachable
        let mut loss = t.scalar(0.0);
        for &v in &pool {
            let s = t.sum_squares(v);
            let m = t.scale(s, 0.1);
            loss = t.add(loss, m).unwrap();
        }
        loss
    };
    (leaves, build)
}

#[test]
fn twenty_random_composite_graphs_match_finite_differences() {
    for seed in 0..20 {
        let (leaves, build) = random_graph(10, 1000 + seed);
        check_gradients(&leaves, STEP, TOL, build);
    }
}

#[test]
fn three_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w1 = rand_matrix(&mut rng, 6, 4);
    let b1 = rand_vec(&mut rng, 6);
    let w2 = rand_matrix(&mut rng, 5, 6);
    let b2 = rand_vec(&mut rng, 5);
    let w3 = rand_matrix(&mut rng, 3, 5);
    let b3 = rand_vec(&mut rng, 3);
    let x = rand_vec(&mut rng, 4);
    let target = rand_vec(&mut rng, 3);
    check_gradients(
        &[w1, b1, w2, b2, w3, b3, x, target],
        STEP,
        TOL,
        |t, v| {
            let h1 = t.matmul(v[0], v[6]).unwrap();
            let h1 = t.add(h1, v[1]).unwrap();
            let h1 = t.relu(h1);
            let h2 = t.matmul(v[2], h1).unwrap();
            let h2 = t.add(h2, v[3]).unwrap();
            let h2 = t.tanh(h2);
            let y = t.matmul(v[4], h2).unwrap();
            let y = t.add(y, v[5]).unwrap();
            let d = t.sub(y, v[7]).unwrap();
            t.sum_squares(d)
        },
    );
}

#[test]
fn detach_kills_gradient_through_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let x = rand_vec(&mut rng, 4);
    // each builder consumes detach(x) so x must receive no gradient
    let builders: Vec<Box<dyn Fn(&mut Tape, Var) -> Var>> = vec![
        Box::new(|t, d| t.relu(d)),
        Box::new(|t, d| t.leaky_relu(d, 0.1)),
        Box::new(|t, d| t.tanh(d)),
        Box::new(|t, d| t.sigmoid(d)),
        Box::new(|t, d| t.scale(d, 2.0)),
        Box::new(|t, d| {
            let w = t.leaf(Tensor::vector(vec![0.5, -0.2, 0.1, 0.9]));
            t.mul(w, d).unwrap()
        }),
        Box::new(|t, d| {
            let w = t.leaf(Tensor::matrix(2, 4, vec![0.1; 8]));
            t.matmul(w, d).unwrap()
        }),
        Box::new(|t, d| {
            let w = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
            t.concat(&[w, d]).unwrap()
        }),
        Box::new(|t, d| t.slice(d, 1, 2).unwrap()),
        Box::new(|t, d| t.reshape(d, vec![2, 2]).unwrap()),
    ];
    for build in builders {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let d = tape.detach(xv);
        let y = build(&mut tape, d);
        let loss = tape.sum_squares(y);
        tape.backward(loss).unwrap();
        assert!(
            tape.grad(xv).is_none(),
            "gradient leaked through detach"
        );
    }
}
