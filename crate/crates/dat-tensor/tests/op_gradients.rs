//! Every differentiable op must agree with central differences on random
//! small instances (f64, eps = 1e-5, max relative error < 1e-5).

use dat_tensor::{grad_check, Graph, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

const TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;
const INSTANCES: usize = 10;

fn randt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Scalar-izes the op output with fixed random weights so the check covers
/// every output coordinate with distinct sensitivities.
fn scalarize(g: &Graph<f64>, out: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let w = randt(rng, out.shape());
    g.weighted_sum(out, &w)
}

fn check_op<F>(name: &str, seed: u64, inputs_for: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, op: F)
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    for inst in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + inst as u64);
        let inputs = inputs_for(&mut rng);
        let mut wrng = ChaCha8Rng::seed_from_u64(seed * 1000 + 500 + inst as u64);
        let err = grad_check(
            |g, ins| {
                let out = op(g, ins)?;
                let mut w = wrng.clone();
                scalarize(g, &out, &mut w)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{name} instance {inst}: max rel error {err}");
    }
}

#[test]
fn matmul_gradients() {
    check_op(
        "matmul",
        1,
        |rng| vec![randt(rng, &[2, 3, 4]), randt(rng, &[2, 4, 2])],
        |g, ins| g.matmul(&ins[0], &ins[1]),
    );
}

#[test]
fn matmul_broadcast_gradients() {
    check_op(
        "matmul_broadcast",
        2,
        |rng| vec![randt(rng, &[3, 2, 4]), randt(rng, &[4, 3])],
        |g, ins| g.matmul(&ins[0], &ins[1]),
    );
}

#[test]
fn softmax_gradients() {
    check_op(
        "softmax_lastdim",
        3,
        |rng| vec![randt(rng, &[2, 5])],
        |g, ins| g.softmax_lastdim(&ins[0]),
    );
}

#[test]
fn layer_norm_gradients() {
    check_op(
        "layer_norm",
        4,
        |rng| vec![randt(rng, &[3, 4]), randt(rng, &[4]), randt(rng, &[4])],
        |g, ins| g.layer_norm(&ins[0], &ins[1], &ins[2], 1e-5),
    );
}

#[test]
fn gelu_tanh_gradients() {
    check_op("gelu", 5, |rng| vec![randt(rng, &[7])], |g, ins| g.gelu(&ins[0]));
    check_op("tanh", 6, |rng| vec![randt(rng, &[7])], |g, ins| g.tanh(&ins[0]));
}

#[test]
fn conv2d_gradients() {
    check_op(
        "conv2d",
        7,
        |rng| {
            vec![
                randt(rng, &[1, 4, 5, 5]),
                randt(rng, &[6, 2, 3, 3]),
                randt(rng, &[6]),
            ]
        },
        |g, ins| g.conv2d(&ins[0], &ins[1], Some(&ins[2]), 2, 1, 2),
    );
}

#[test]
fn conv2d_depthwise_gradients() {
    check_op(
        "conv2d_depthwise",
        8,
        |rng| vec![randt(rng, &[1, 3, 4, 4]), randt(rng, &[3, 1, 3, 3])],
        |g, ins| g.conv2d(&ins[0], &ins[1], None, 1, 1, 3),
    );
}

#[test]
fn bilinear_sample_gradients_both_arguments() {
    // Interior points away from the integer lattice, where the interpolant
    // is differentiable.
    check_op(
        "bilinear_sample",
        9,
        |rng| {
            let z = randt(rng, &[4, 5, 3]);
            let n = 6;
            let data = (0..2 * n)
                .map(|_| {
                    let v: f64 = rng.gen_range(-0.9..0.9);
                    // keep a safe distance from lattice kinks
                    if (v * 3.0 - (v * 3.0).round()).abs() < 0.05 {
                        v + 0.07
                    } else {
                        v
                    }
                })
                .collect();
            vec![z, Tensor::from_vec(vec![n, 2], data).unwrap()]
        },
        |g, ins| g.bilinear_sample(&ins[0], &ins[1]),
    );
}

#[test]
fn shape_op_gradients() {
    check_op(
        "transpose_last2",
        10,
        |rng| vec![randt(rng, &[2, 3, 4])],
        |g, ins| g.transpose_last2(&ins[0]),
    );
    check_op(
        "split_merge_heads",
        11,
        |rng| vec![randt(rng, &[6, 8])],
        |g, ins| {
            let h = g.split_heads(&ins[0], 4)?;
            g.merge_heads(&h)
        },
    );
    check_op(
        "tokens_chw_roundtrip",
        12,
        |rng| vec![randt(rng, &[12, 5])],
        |g, ins| {
            let img = g.tokens_to_chw(&ins[0], 3, 4)?;
            g.chw_to_tokens(&img)
        },
    );
    check_op(
        "concat_slice",
        13,
        |rng| vec![randt(rng, &[4, 3]), randt(rng, &[4, 2])],
        |g, ins| {
            let cat = g.concat_last(&[&ins[0], &ins[1]])?;
            g.slice_cols(&cat, 1, 3)
        },
    );
    check_op(
        "concat0_index_select",
        14,
        |rng| vec![randt(rng, &[3, 2]), randt(rng, &[2, 2])],
        |g, ins| {
            let cat = g.concat0(&[&ins[0], &ins[1]])?;
            g.index_select_rows(&cat, Arc::new(vec![4, 0, 0, 3]))
        },
    );
}

#[test]
fn elementwise_and_reduction_gradients() {
    check_op(
        "add_broadcast0",
        15,
        |rng| vec![randt(rng, &[3, 2, 4]), randt(rng, &[2, 4])],
        |g, ins| g.add_broadcast0(&ins[0], &ins[1]),
    );
    check_op(
        "affine_cols_clamp",
        16,
        |rng| vec![randt(rng, &[5, 2])],
        |g, ins| {
            let y = g.affine_cols(&ins[0], &[1.7, -0.4], &[0.2, 0.1])?;
            g.clamp(&y, -0.8, 0.8)
        },
    );
    check_op(
        "mean_axis0",
        17,
        |rng| vec![randt(rng, &[6, 3])],
        |g, ins| g.mean_axis0(&ins[0]),
    );
    check_op(
        "cross_entropy",
        18,
        |rng| vec![randt(rng, &[5])],
        |g, ins| g.cross_entropy(&ins[0], 2),
    );
    check_op(
        "pairwise_disp",
        19,
        |rng| vec![randt(rng, &[4, 2])],
        |g, ins| {
            // Query positions are a constant buffer; only the points carry grad.
            let qpos =
                Tensor::from_vec(vec![3, 2], vec![0.1, -0.2, 0.5, 0.7, -0.9, 0.3]).unwrap();
            g.pairwise_disp(&qpos, &ins[0])
        },
    );
}

#[test]
fn fanout_gradient_matches_finite_differences() {
    // One tensor feeding two consumers: adjoints must sum.
    check_op(
        "fanout",
        20,
        |rng| vec![randt(rng, &[3, 3])],
        |g, ins| {
            let a = g.gelu(&ins[0])?;
            let b = g.matmul(&ins[0], &a)?;
            let c = g.add(&b, &ins[0])?;
            Ok(c)
        },
    );
}
