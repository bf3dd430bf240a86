//! With zero offsets, an identity reference grid, and no position bias,
//! deformable attention must reproduce dense MHSA exactly: every reference
//! point lands on an integer pixel, so the sampled map equals the input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dat_nn::attention::{mhsa, MhsaParams};
use dat_nn::deform::{dmha_forward, BiasMode, DeformAttnConfig, DmhaParams};
use dat_nn::ForwardCtx;
use dat_tensor::{Graph, Tensor};

fn zero_offset_net(p: &mut DmhaParams<f64>) {
    let cg = p.group_channels();
    let k = p.cfg.offset_kernel;
    let zeros = |shape: &[usize]| {
        Tensor::param(shape.to_vec(), vec![0.0; shape.iter().product()]).unwrap()
    };
    p.offset_net.depthwise = zeros(&[cg, 1, k, k]);
    p.offset_net.depthwise_bias = zeros(&[cg]);
    p.offset_net.pointwise = zeros(&[2, cg, 1, 1]);
}

#[test]
fn dmha_equals_dense_mhsa_on_twenty_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xda7);
    let mut cases = Vec::new();
    for &hw in &[2usize, 4] {
        for &c in &[4usize, 8] {
            for &m in &[1usize, 2] {
                cases.push((hw, c, m));
            }
        }
    }
    let mut instances = 0;
    let mut worst = 0.0f64;
    'outer: for round in 0..3 {
        for &(hw, c, m) in &cases {
            if instances == 20 {
                break 'outer;
            }
            let cfg = DeformAttnConfig {
                channels: c,
                heads: m,
                offset_groups: 1,
                grid_factor: 1,
                offset_range: 2.0,
                offset_kernel: 3,
                bias_mode: BiasMode::None,
                proj_bias: true,
            };
            let mut init_rng = ChaCha8Rng::seed_from_u64(1000 * round + instances as u64);
            let mut p = DmhaParams::init(&mut init_rng, cfg, hw, hw, "equiv").unwrap();
            zero_offset_net(&mut p);
            let dense = MhsaParams {
                heads: m,
                wq: p.wq.clone(),
                wk: p.wk.clone(),
                wv: p.wv.clone(),
                wo: p.wo.clone(),
            };
            let n = hw * hw;
            let x = Tensor::from_vec(
                vec![n, c],
                (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let g = Graph::new();
            let mut ctx = ForwardCtx::inference();
            let a = dmha_forward(&g, &x, &p, &mut ctx).unwrap();
            let b = mhsa(&g, &x, &dense, None).unwrap();
            let diff = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(diff < 1e-10, "instance {instances} (H=W={hw}, C={c}, M={m}): {diff}");
            worst = worst.max(diff);
            instances += 1;
        }
    }
    assert_eq!(instances, 20);
    println!("dense equivalence: 20 instances, worst |diff| = {worst:.3e}");
}
