//! Structural invariants of the sampling and normalization ops.

use dat_tensor::{denormalize, hat, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sum of the four hat weights for a point, in pixel coordinates.
fn weight_sum(px: f64, py: f64, h: usize, w: usize) -> f64 {
    let u = denormalize(px, w);
    let v = denormalize(py, h);
    let mut acc = 0.0;
    for dy in 0..2 {
        for dx in 0..2 {
            let xx = u.floor() + dx as f64;
            let yy = v.floor() + dy as f64;
            if xx >= 0.0 && xx < w as f64 && yy >= 0.0 && yy < h as f64 {
                acc += hat(u, xx) * hat(v, yy);
            }
        }
    }
    acc
}

#[test]
fn partition_of_unity_inside_domain() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..10_000 {
        let px = rng.gen_range(-1.0..=1.0);
        let py = rng.gen_range(-1.0..=1.0);
        let s = weight_sum(px, py, 7, 5);
        assert!((s - 1.0).abs() < 1e-12, "weights sum to {s} at ({px},{py})");
    }
}

#[test]
fn sampled_value_stays_in_convex_hull_inside_domain() {
    let g = Graph::new();
    let z = Tensor::from_vec(vec![3, 4, 1], (0..12).map(|v| (v as f64).sin()).collect()).unwrap();
    let lo = z.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let pts = Tensor::from_vec(
            vec![1, 2],
            vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)],
        )
        .unwrap();
        let out = g.bilinear_sample(&z, &pts).unwrap();
        let v = out.data()[0];
        assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in proptest::collection::vec(-30.0f64..30.0, 1..9),
        shift in -50.0f64..50.0,
    ) {
        let g = Graph::<f64>::new();
        let n = row.len();
        let x = Tensor::from_vec(vec![n], row.clone()).unwrap();
        let y = g.softmax_lastdim(&x).unwrap();
        let total: f64 = y.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));

        let shifted = Tensor::from_vec(vec![n], row.iter().map(|v| v + shift).collect()).unwrap();
        let ys = g.softmax_lastdim(&shifted).unwrap();
        for (a, b) in y.data().iter().zip(ys.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_agrees_with_naive_triple_loop(
        m in 1usize..4, k in 1usize..4, n in 1usize..4,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = Graph::new();
        let out = g
            .matmul(
                &Tensor::from_vec(vec![m, k], a.clone()).unwrap(),
                &Tensor::from_vec(vec![k, n], b.clone()).unwrap(),
            )
            .unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                prop_assert!((out.data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }
}
