//! Central-difference gradient oracle for every differentiable op.
//!
//! The oracle perturbs one input element at a time (h = 1e-5) and compares
//! against the analytic gradient from the tape. It only ever calls the
//! forward path, so it is independent of the backward implementation.

use autodiff::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + H;
        let fp = f(&xp);
        xp[i] = x[i] - H;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * H);
    }
    g
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Check d(loss)/d(inputs[check]) where `build` runs the op under test on a
/// fresh tape and returns the leafed inputs plus a scalar loss.
fn check_op(
    inputs: &[Tensor],
    check: usize,
    tol: f64,
    build: &dyn Fn(&mut Tape, &[Tensor]) -> Tensor,
) {
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &leaves);
    tape.backward(&loss).unwrap();
    let analytic = tape.grad(&leaves[check]).unwrap().to_vec();

    let f = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == check {
                    tape.leaf(&Tensor::new(t.shape.clone(), x.to_vec()).unwrap())
                } else {
                    tape.leaf(t)
                }
            })
            .collect();
        build(&mut tape, &leaves).item()
    };
    let numeric = central_diff(&f, &inputs[check].data);
    let err = max_rel_err(&analytic, &numeric);
    assert!(
        err < tol,
        "gradient check failed: rel err {:.3e} >= tol {:.1e}",
        err,
        tol
    );
}

/// Weighted sum of an output tensor so every element influences the loss.
fn weighted_loss(tape: &mut Tape, out: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let w = tape.leaf(&randn(rng, out.shape.clone()));
    // sum(out * w) via elementwise trick: sum_all(add(out, w)) would lose
    // cross terms, so reshape both to vectors and use matmul.
    let n = out.numel();
    let a = tape.reshape(out, vec![1, n]).unwrap();
    let b = tape.reshape(&w, vec![n, 1]).unwrap();
    let prod = tape.matmul(&a, &b).unwrap();
    tape.reshape(&prod, vec![]).unwrap()
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&mut rng, vec![3, 3]);
        let b = randn(&mut rng, vec![3, 3]);
        for check in 0..2 {
            check_op(&[a.clone(), b.clone()], check, 1e-6, &|tape, l| {
                let out = tape.matmul(&l[0], &l[1]).unwrap();
                let mut wrng = ChaCha8Rng::seed_from_u64(5);
                weighted_loss(tape, &out, &mut wrng)
            });
        }
    }
}

#[test]
fn matmul_nt_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = randn(&mut rng, vec![4, 3]);
        let b = randn(&mut rng, vec![5, 3]);
        for check in 0..2 {
            check_op(&[a.clone(), b.clone()], check, 1e-6, &move |tape, l| {
                let out = tape.matmul_nt(&l[0], &l[1]).unwrap();
                let mut wrng = ChaCha8Rng::seed_from_u64(7);
                weighted_loss(tape, &out, &mut wrng)
            });
        }
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = randn(&mut rng, vec![5]);
        check_op(&[x], 0, 1e-6, &|tape, l| {
            let out = tape.softmax_last(&l[0]).unwrap();
            let mut wrng = ChaCha8Rng::seed_from_u64(11);
            weighted_loss(tape, &out, &mut wrng)
        });
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = randn(&mut rng, vec![2, 6]);
        let gamma = randn(&mut rng, vec![6]);
        let beta = randn(&mut rng, vec![6]);
        for check in 0..3 {
            check_op(
                &[x.clone(), gamma.clone(), beta.clone()],
                check,
                1e-5,
                &|tape, l| {
                    let out = tape.layer_norm(&l[0], &l[1], &l[2], 1e-5).unwrap();
                    let mut wrng = ChaCha8Rng::seed_from_u64(13);
                    weighted_loss(tape, &out, &mut wrng)
                },
            );
        }
    }
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = randn(&mut rng, vec![7]);
        check_op(&[x], 0, 1e-6, &|tape, l| {
            let out = tape.gelu(&l[0]).unwrap();
            let mut wrng = ChaCha8Rng::seed_from_u64(17);
            weighted_loss(tape, &out, &mut wrng)
        });
    }
}

#[test]
fn elementwise_and_shape_op_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let a = randn(&mut rng, vec![2, 4]);
        let b = randn(&mut rng, vec![2, 4]);
        let bias = randn(&mut rng, vec![4]);
        let s = randn(&mut rng, vec![1]);
        for check in 0..4 {
            check_op(
                &[a.clone(), b.clone(), bias.clone(), s.clone()],
                check,
                1e-6,
                &|tape, l| {
                    let sum = tape.add(&l[0], &l[1]).unwrap();
                    let biased = tape.add_bias(&sum, &l[2]).unwrap();
                    let scaled = tape.scale(&biased, 0.7).unwrap();
                    let gated = tape.scale_t(&scaled, &l[3]).unwrap();
                    let m = tape.mean(&gated, 0).unwrap();
                    let mut wrng = ChaCha8Rng::seed_from_u64(19);
                    weighted_loss(tape, &m, &mut wrng)
                },
            );
        }
    }
}

#[test]
fn concat_slice_gradients_route_to_inputs() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let a = randn(&mut rng, vec![2, 3]);
        let b = randn(&mut rng, vec![2, 2]);
        for check in 0..2 {
            check_op(&[a.clone(), b.clone()], check, 1e-6, &|tape, l| {
                let cat = tape.concat(&[&l[0], &l[1]], 1).unwrap();
                let sl = tape.slice(&cat, 1, 1, 4).unwrap();
                let mut wrng = ChaCha8Rng::seed_from_u64(23);
                weighted_loss(tape, &sl, &mut wrng)
            });
        }
    }
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let logits = randn(&mut rng, vec![5]);
        let target = (seed % 5) as usize;
        check_op(&[logits], 0, 1e-6, &move |tape, l| {
            tape.cross_entropy(&l[0], target).unwrap()
        });
    }
}

#[test]
fn composite_network_gradient_matches_finite_differences() {
    // small MLP with layer norm and softmax end to end
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let x = randn(&mut rng, vec![3, 4]);
        let w1 = randn(&mut rng, vec![4, 5]);
        let b1 = randn(&mut rng, vec![5]);
        let gamma = Tensor::full(vec![5], 1.0);
        let beta = Tensor::zeros(vec![5]);
        let w2 = randn(&mut rng, vec![5, 3]);
        let inputs = [x, w1, b1, gamma, beta, w2];
        for check in 0..inputs.len() {
            check_op(&inputs, check, 1e-4, &|tape, l| {
                let h = tape.matmul(&l[0], &l[1]).unwrap();
                let h = tape.add_bias(&h, &l[2]).unwrap();
                let h = tape.gelu(&h).unwrap();
                let h = tape.layer_norm(&h, &l[3], &l[4], 1e-5).unwrap();
                let logits = tape.matmul(&h, &l[5]).unwrap();
                let row = tape.slice(&logits, 0, 0, 1).unwrap();
                let row = tape.reshape(&row, vec![3]).unwrap();
                tape.cross_entropy(&row, 1).unwrap()
            });
        }
    }
}
