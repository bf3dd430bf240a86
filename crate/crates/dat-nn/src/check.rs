//! f64 gradient-check battery: every differentiable op, each attention
//! layer, the full deformable attention layer (offsets, bias table, and
//! projections included), and the micro model end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dat_tensor::{grad_check, grad_check_sampled, Graph, Tensor};

use crate::attention::{
    mhsa, sra_attention, transformer_block, window_attention, AttentionLayer, BlockParams,
    MhsaParams, SraParams, WindowAttnParams,
};
use crate::deform::{
    ddetr_attention, dmha_forward, BiasMode, DdetrParams, DeformAttnConfig, DmhaParams,
};
use crate::error::Result;
use crate::init::RngStream;
use crate::layers::{ForwardCtx, LayerNormParams, Linear};
use crate::model::{build_dat, forward_single, preset, DatModel, Variant};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Fixed random scalarization weights for an output shape.
fn rand_weights(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77ee);
    rand_t(&mut rng, shape)
}

fn collect_linear(l: &Linear<f64>, out: &mut Vec<Tensor<f64>>) {
    out.push(l.weight.clone());
    if let Some(b) = &l.bias {
        out.push(b.clone());
    }
}

fn assign_linear(l: &mut Linear<f64>, leaves: &[Tensor<f64>], i: &mut usize) {
    l.weight = leaves[*i].clone();
    *i += 1;
    if l.bias.is_some() {
        l.bias = Some(leaves[*i].clone());
        *i += 1;
    }
}

fn mhsa_tensors(p: &MhsaParams<f64>) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    collect_linear(&p.wq, &mut out);
    collect_linear(&p.wk, &mut out);
    collect_linear(&p.wv, &mut out);
    collect_linear(&p.wo, &mut out);
    out
}

fn mhsa_assign(p: &mut MhsaParams<f64>, leaves: &[Tensor<f64>], i: &mut usize) {
    assign_linear(&mut p.wq, leaves, i);
    assign_linear(&mut p.wk, leaves, i);
    assign_linear(&mut p.wv, leaves, i);
    assign_linear(&mut p.wo, leaves, i);
}

fn dmha_tensors(p: &DmhaParams<f64>) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    collect_linear(&p.wq, &mut out);
    collect_linear(&p.wk, &mut out);
    collect_linear(&p.wv, &mut out);
    collect_linear(&p.wo, &mut out);
    out.push(p.offset_net.depthwise.clone());
    out.push(p.offset_net.depthwise_bias.clone());
    out.push(p.offset_net.pointwise.clone());
    match &p.bias {
        crate::deform::DeformBias::None => {}
        crate::deform::DeformBias::Fixed(t) | crate::deform::DeformBias::Relative(t) => {
            out.push(t.clone())
        }
        crate::deform::DeformBias::DepthwiseConv { weight, bias } => {
            out.push(weight.clone());
            out.push(bias.clone());
        }
    }
    out
}

fn dmha_assign(p: &mut DmhaParams<f64>, leaves: &[Tensor<f64>], i: &mut usize) {
    assign_linear(&mut p.wq, leaves, i);
    assign_linear(&mut p.wk, leaves, i);
    assign_linear(&mut p.wv, leaves, i);
    assign_linear(&mut p.wo, leaves, i);
    p.offset_net.depthwise = leaves[*i].clone();
    *i += 1;
    p.offset_net.depthwise_bias = leaves[*i].clone();
    *i += 1;
    p.offset_net.pointwise = leaves[*i].clone();
    *i += 1;
    match &mut p.bias {
        crate::deform::DeformBias::None => {}
        crate::deform::DeformBias::Fixed(t) | crate::deform::DeformBias::Relative(t) => {
            *t = leaves[*i].clone();
            *i += 1;
        }
        crate::deform::DeformBias::DepthwiseConv { weight, bias } => {
            *weight = leaves[*i].clone();
            *i += 1;
            *bias = leaves[*i].clone();
            *i += 1;
        }
    }
}

fn op_checks(results: &mut Vec<CheckResult>, filter: Option<&str>) -> Result<()> {
    let mut run = |name: &str,
                   inputs: Vec<Tensor<f64>>,
                   f: &dyn Fn(&Graph<f64>, &[Tensor<f64>]) -> dat_tensor::Result<Tensor<f64>>|
     -> Result<()> {
        if !matches_filter(name, filter) {
            return Ok(());
        }
        let coords: usize = inputs.iter().map(|t| t.numel()).sum();
        let err = grad_check(
            |g, ins| {
                let out = f(g, ins)?;
                let w = rand_weights(0xabcd, out.shape());
                g.weighted_sum(&out, &w)
            },
            &inputs,
            1e-5,
        )?;
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
            coords_checked: coords,
        });
        Ok(())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    run(
        "matmul",
        vec![rand_t(&mut rng, &[2, 3, 4]), rand_t(&mut rng, &[2, 4, 3])],
        &|g, ins| g.matmul(&ins[0], &ins[1]),
    )?;
    run("softmax_lastdim", vec![rand_t(&mut rng, &[3, 5])], &|g, ins| {
        g.softmax_lastdim(&ins[0])
    })?;
    run(
        "layer_norm",
        vec![
            rand_t(&mut rng, &[4, 6]),
            rand_t(&mut rng, &[6]),
            rand_t(&mut rng, &[6]),
        ],
        &|g, ins| g.layer_norm(&ins[0], &ins[1], &ins[2], 1e-5),
    )?;
    run("gelu", vec![rand_t(&mut rng, &[9])], &|g, ins| g.gelu(&ins[0]))?;
    run("tanh", vec![rand_t(&mut rng, &[9])], &|g, ins| g.tanh(&ins[0]))?;
    run(
        "conv2d",
        vec![
            rand_t(&mut rng, &[1, 4, 6, 6]),
            rand_t(&mut rng, &[4, 2, 3, 3]),
            rand_t(&mut rng, &[4]),
        ],
        &|g, ins| g.conv2d(&ins[0], &ins[1], Some(&ins[2]), 2, 1, 2),
    )?;
    let pts = Tensor::from_vec(
        vec![5, 2],
        vec![-0.37, 0.21, 0.43, -0.11, 0.77, 0.63, -0.91, -0.23, 0.13, 0.37],
    )
    .unwrap();
    run(
        "bilinear_sample",
        vec![rand_t(&mut rng, &[4, 5, 3]), pts],
        &|g, ins| g.bilinear_sample(&ins[0], &ins[1]),
    )?;
    Ok(())
}

fn matches_filter(name: &str, filter: Option<&str>) -> bool {
    filter.map_or(true, |f| name.contains(f))
}

/// Runs the battery, optionally restricted to checks whose name contains
/// `filter`. Every result should sit below 1e-4 max relative error.
pub fn gradient_battery(filter: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    op_checks(&mut results, filter)?;

    let seed = RngStream::new(0x5eed);

    if matches_filter("mhsa", filter) {
        let mut rng = seed.derive("mhsa").rng();
        let proto = MhsaParams::init(&mut rng, 6, 2, true)?;
        let mut inputs = vec![rand_t(&mut rng, &[4, 6])];
        inputs.extend(mhsa_tensors(&proto));
        let err = grad_check(
            |g, leaves| {
                let mut p = proto.clone();
                let mut i = 1;
                mhsa_assign(&mut p, leaves, &mut i);
                let out = mhsa(g, &leaves[0], &p, None).map_err(nn_to_tensor_err)?;
                let w = rand_weights(1, out.shape());
                g.weighted_sum(&out, &w)
            },
            &inputs,
            1e-5,
        )?;
        push(&mut results, "mhsa", err, &inputs);
    }

    if matches_filter("window_attention", filter) {
        let mut rng = seed.derive("window").rng();
        let proto = WindowAttnParams::init(&mut rng, 4, 2, 4, 4, 2, true, true)?;
        let mut inputs = vec![rand_t(&mut rng, &[16, 4])];
        inputs.extend(mhsa_tensors(&proto.attn));
        inputs.push(proto.bias_table.clone());
        let err = grad_check(
            |g, leaves| {
                let mut p = proto.clone();
                let mut i = 1;
                mhsa_assign(&mut p.attn, leaves, &mut i);
                p.bias_table = leaves[i].clone();
                let out = window_attention(g, &leaves[0], &p).map_err(nn_to_tensor_err)?;
                let w = rand_weights(2, out.shape());
                g.weighted_sum(&out, &w)
            },
            &inputs,
            1e-5,
        )?;
        push(&mut results, "window_attention", err, &inputs);
    }

    if matches_filter("sra_attention", filter) {
        let mut rng = seed.derive("sra").rng();
        let proto = SraParams::init(&mut rng, 4, 2, 2, true)?;
        let mut inputs = vec![rand_t(&mut rng, &[16, 4])];
        inputs.extend(mhsa_tensors(&proto.attn));
        let sr = proto.sr.as_ref().expect("reduction 2 has a merge");
        inputs.push(sr.conv_w.clone());
        inputs.push(sr.conv_b.clone());
        inputs.push(sr.norm.gamma.clone());
        inputs.push(sr.norm.beta.clone());
        let err = grad_check(
            |g, leaves| {
                let mut p = proto.clone();
                let mut i = 1;
                mhsa_assign(&mut p.attn, leaves, &mut i);
                let sr = p.sr.as_mut().expect("merge present");
                sr.conv_w = leaves[i].clone();
                sr.conv_b = leaves[i + 1].clone();
                sr.norm.gamma = leaves[i + 2].clone();
                sr.norm.beta = leaves[i + 3].clone();
                let out = sra_attention(g, &leaves[0], 4, 4, &p).map_err(nn_to_tensor_err)?;
                let w = rand_weights(3, out.shape());
                g.weighted_sum(&out, &w)
            },
            &inputs,
            1e-5,
        )?;
        push(&mut results, "sra_attention", err, &inputs);
    }

    if matches_filter("dmha", filter) {
        let mut rng = seed.derive("dmha").rng();
        let cfg = DeformAttnConfig {
            channels: 8,
            heads: 2,
            offset_groups: 1,
            grid_factor: 1,
            offset_range: 2.0,
            offset_kernel: 3,
            bias_mode: BiasMode::DeformableRelative,
            proj_bias: true,
        };
        let proto = DmhaParams::init(&mut rng, cfg, 4, 4, "check.dmha")?;
        let mut inputs = vec![rand_t(&mut rng, &[16, 8])];
        inputs.extend(dmha_tensors(&proto));
        let err = grad_check(
            |g, leaves| {
                let mut p = proto.clone();
                let mut i = 1;
                dmha_assign(&mut p, leaves, &mut i);
                let mut ctx = ForwardCtx::inference();
                let out = dmha_forward(g, &leaves[0], &p, &mut ctx).map_err(nn_to_tensor_err)?;
                let w = rand_weights(4, out.shape());
                g.weighted_sum(&out, &w)
            },
            &inputs,
            1e-5,
        )?;
        push(&mut results, "dmha", err, &inputs);
    }

    if matches_filter("dmha_grouped", filter) {
        let mut rng = seed.derive("dmha-grouped").rng();
        let cfg = DeformAttnConfig {
            channels: 8,
            heads: 4,
            offset_groups: 2,
            grid_factor: 2,
            offset_range: 1.5,
            offset_kernel: 3,
            bias_mode: BiasMode::DeformableRelative,
            proj_bias: false,
        };
        let proto = DmhaParams::init(&mut rng, cfg, 4, 4, "check.dmha_grouped")?;
        let mut inputs = vec![rand_t(&mut rng, &[16, 8])];
        inputs.extend(dmha_tensors(&proto));
        let err = grad_check(
            |g, leaves| {
                let mut p = proto.clone();
                let mut i = 1;
                dmha_assign(&mut p, leaves, &mut i);
                let mut ctx = ForwardCtx::inference();
                let out = dmha_forward(g, &leaves[0], &p, &mut ctx).map_err(nn_to_tensor_err)?;
                let w = rand_weights(5, out.shape());
                g.weighted_sum(&out, &w)
            },
            &inputs,
            1e-5,
        )?;
        push(&mut results, "dmha_grouped", err, &inputs);
    }

    if matches_filter("ddetr", filter) {
        let mut rng = seed.derive("ddetr").rng();
        let proto = DdetrParams::init(&mut rng, 4, 2, 3, 3, 3, true)?;
        let mut tensors = vec![rand_t(&mut rng, &[9, 4])];
        collect_linear(&proto.w_offsets, &mut tensors);
        collect_linear(&proto.w_att, &mut tensors);
        collect_linear(&proto.wv, &mut tensors);
        collect_linear(&proto.wo, &mut tensors);
        let err = grad_check(
            |g, leaves| {
                let mut p = proto.clone();
                let mut i = 1;
                assign_linear(&mut p.w_offsets, leaves, &mut i);
                assign_linear(&mut p.w_att, leaves, &mut i);
                assign_linear(&mut p.wv, leaves, &mut i);
                assign_linear(&mut p.wo, leaves, &mut i);
                let out = ddetr_attention(g, &leaves[0], &p).map_err(nn_to_tensor_err)?;
                let w = rand_weights(6, out.shape());
                g.weighted_sum(&out, &w)
            },
            &tensors,
            1e-5,
        )?;
        push(&mut results, "ddetr", err, &tensors);
    }

    if matches_filter("transformer_block", filter) {
        let mut rng = seed.derive("block").rng();
        let wa = WindowAttnParams::init(&mut rng, 4, 2, 2, 2, 2, false, true)?;
        let proto = BlockParams {
            norm1: LayerNormParams::init(4),
            attn: AttentionLayer::Window(wa),
            norm2: LayerNormParams::init(4),
            fc1: Linear::init(&mut rng, 4, 8, true),
            fc2: Linear::init(&mut rng, 8, 4, true),
            drop_path: 0.0,
            h: 2,
            w: 2,
        };
        let mut tensors = vec![rand_t(&mut rng, &[4, 4])];
        tensors.push(proto.norm1.gamma.clone());
        tensors.push(proto.norm1.beta.clone());
        tensors.push(proto.norm2.gamma.clone());
        tensors.push(proto.norm2.beta.clone());
        collect_linear(&proto.fc1, &mut tensors);
        collect_linear(&proto.fc2, &mut tensors);
        if let AttentionLayer::Window(wa) = &proto.attn {
            tensors.extend(mhsa_tensors(&wa.attn));
            tensors.push(wa.bias_table.clone());
        }
        let err = grad_check(
            |g, leaves| {
                let mut p = proto.clone();
                let mut i = 1;
                p.norm1.gamma = leaves[i].clone();
                p.norm1.beta = leaves[i + 1].clone();
                p.norm2.gamma = leaves[i + 2].clone();
                p.norm2.beta = leaves[i + 3].clone();
                i += 4;
                assign_linear(&mut p.fc1, leaves, &mut i);
                assign_linear(&mut p.fc2, leaves, &mut i);
                if let AttentionLayer::Window(wa) = &mut p.attn {
                    mhsa_assign(&mut wa.attn, leaves, &mut i);
                    wa.bias_table = leaves[i].clone();
                }
                let mut ctx = ForwardCtx::inference();
                let out = transformer_block(g, &leaves[0], &p, &mut ctx).map_err(nn_to_tensor_err)?;
                let w = rand_weights(7, out.shape());
                g.weighted_sum(&out, &w)
            },
            &tensors,
            1e-5,
        )?;
        push(&mut results, "transformer_block", err, &tensors);
    }

    if matches_filter("micro_model", filter) {
        let proto: DatModel<f64> = build_dat(&preset(Variant::Micro), &RngStream::new(7))?;
        let mut rng = seed.derive("micro").rng();
        let mut tensors: Vec<Tensor<f64>> = vec![rand_t(&mut rng, &[1, 3, 32, 32])];
        proto.visit_tensors(&mut |_, _, t| {
            tensors.push(rand_t(&mut rng, t.shape()));
        });
        let report = grad_check_sampled(
            |g, leaves| {
                let mut m = proto.clone();
                let mut i = 1;
                m.visit_tensors_mut(&mut |_, _, t| {
                    *t = leaves[i].clone();
                    i += 1;
                });
                let mut ctx = ForwardCtx::inference();
                let logits = forward_single(g, &m, &leaves[0], &mut ctx).map_err(nn_to_tensor_err)?;
                g.cross_entropy(&logits, 1)
            },
            &tensors,
            1e-5,
            2,
        )?;
        results.push(CheckResult {
            name: "micro_model".to_string(),
            max_rel_error: report.max_rel_error,
            coords_checked: report.coords_checked,
        });
    }

    Ok(results)
}

fn push(results: &mut Vec<CheckResult>, name: &str, err: f64, inputs: &[Tensor<f64>]) {
    results.push(CheckResult {
        name: name.to_string(),
        max_rel_error: err,
        coords_checked: inputs.iter().map(|t| t.numel()).sum(),
    });
}

/// Attention layers surface crate errors; the checker speaks tensor errors.
fn nn_to_tensor_err(e: crate::Error) -> dat_tensor::Error {
    match e {
        crate::Error::Tensor(t) => t,
        other => dat_tensor::Error::Parameter(other.to_string()),
    }
}
