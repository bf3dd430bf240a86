//! Analytic comparison of per-query K-point attention against deformable
//! multi-head attention at the two deformable stages. Both sides use the
//! same accounting rules as the cost model; ratios are module-level.

use serde::Serialize;

use crate::Result;

/// Attention-module costs for one stage, one layer.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ModuleCost {
    pub flops: u64,
    /// Elements of the intermediate tensors the module materializes.
    pub activation_elements: u64,
    pub params: u64,
}

/// DMHA module cost with the relative bias path, matching `dmha_record`.
pub fn dmha_module_cost(h: usize, w: usize, c: usize, heads: usize, groups: usize, n_s: u64, k: usize) -> ModuleCost {
    let hw = (h * w) as u64;
    let (c64, m, g, k64) = (c as u64, heads as u64, groups as u64, k as u64);
    let mut flops = 2 * hw * n_s * c64 + 2 * hw * c64 * c64 + 2 * n_s * c64 * c64
        + (k64 * k64 + 2) * n_s * c64;
    flops += n_s * c64 + 2 * n_s * g + m * hw * n_s + 8 * m * hw * n_s;
    let cg = c64 / g;
    let span = (2 * h - 1) as u64;
    let params = 4 * c64 * c64 + 4 * c64 + cg * k64 * k64 + 3 * cg + m * span * span;
    let activations = 2 * hw * c64 + 3 * n_s * c64 + 2 * g * n_s + 3 * m * hw * n_s;
    ModuleCost {
        flops,
        activation_elements: activations,
        params,
    }
}

/// Per-query K-point attention: offsets and attention logits projected
/// directly from each query, K bilinear samples of the value map per query
/// and head, then the weighted sum.
pub fn ddetr_module_cost(h: usize, w: usize, c: usize, heads: usize, k_points: usize) -> ModuleCost {
    let hw = (h * w) as u64;
    let (c64, m, kp) = (c as u64, heads as u64, k_points as u64);
    let flops = hw * c64 * (m * kp * 2)      // offset projection
        + hw * c64 * (m * kp)                // attention logit projection
        + hw * c64 * c64                     // value projection
        + 8 * hw * kp * c64                  // bilinear sampling (4 weights + 4 MACs)
        + hw * kp * c64                      // weighted aggregation
        + hw * c64 * c64                     // output projection
        + m * hw * kp;                       // softmax over K
    let params = c64 * m * kp * 2 + c64 * m * kp + 2 * c64 * c64 + 2 * c64;
    let activations = 2 * hw * c64           // value map + output
        + hw * kp * c64                      // per-query sampled features
        + 4 * m * hw * kp;                   // offsets (2) + logits + softmax
    ModuleCost {
        flops,
        activation_elements: activations,
        params,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageComparison {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub heads: usize,
    pub k_points: usize,
    pub dat_keys: u64,
    pub blocks: u64,
    pub ddetr: ModuleCost,
    pub dat: ModuleCost,
    pub flops_ratio: f64,
    pub activation_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DdetrComparison {
    pub stage3: StageComparison,
    pub stage4: StageComparison,
    /// Ratios over both stages, weighted by block counts.
    pub flops_ratio: f64,
    pub activation_ratio: f64,
    pub params_ratio: f64,
}

/// Compares the two attention kinds at the third-stage geometry (H, W, C, M)
/// and the derived fourth stage (H/2, W/2, 2C, 2M). The deformable side
/// keeps its identity reference grid (N_s = HW); the K-point side samples
/// `k_stage3` / `k_stage4` keys per query. `blocks3`/`blocks4` weight the
/// per-stage layer counts.
pub fn compare_ddetr(
    h: usize,
    w: usize,
    c: usize,
    heads: usize,
    k_stage3: usize,
    k_stage4: usize,
    blocks3: u64,
    blocks4: u64,
    offset_kernel: usize,
) -> Result<DdetrComparison> {
    if h == 0 || w == 0 || c == 0 || heads == 0 || k_stage3 == 0 || k_stage4 == 0 {
        return crate::analyze_err("compare_ddetr needs positive extents and key counts");
    }
    let stage = |h: usize, w: usize, c: usize, m: usize, g: usize, kp: usize, blocks: u64| {
        let n_s = (h * w) as u64;
        let ddetr = ddetr_module_cost(h, w, c, m, kp);
        let dat = dmha_module_cost(h, w, c, m, g, n_s, offset_kernel);
        StageComparison {
            h,
            w,
            channels: c,
            heads: m,
            k_points: kp,
            dat_keys: n_s,
            blocks,
            ddetr,
            dat,
            flops_ratio: ddetr.flops as f64 / dat.flops as f64,
            activation_ratio: ddetr.activation_elements as f64 / dat.activation_elements as f64,
        }
    };
    // Offset groups follow the published stage-3/stage-4 ratio: heads/4.
    let g3 = (heads / 4).max(1);
    let g4 = (heads / 2).max(1);
    let stage3 = stage(h, w, c, heads, g3, k_stage3, blocks3);
    let stage4 = stage(h / 2, w / 2, 2 * c, 2 * heads, g4, k_stage4, blocks4);
    let ddetr_flops = blocks3 * stage3.ddetr.flops + blocks4 * stage4.ddetr.flops;
    let dat_flops = blocks3 * stage3.dat.flops + blocks4 * stage4.dat.flops;
    let ddetr_act = blocks3 * stage3.ddetr.activation_elements + blocks4 * stage4.ddetr.activation_elements;
    let dat_act = blocks3 * stage3.dat.activation_elements + blocks4 * stage4.dat.activation_elements;
    let ddetr_params = blocks3 * stage3.ddetr.params + blocks4 * stage4.ddetr.params;
    let dat_params = blocks3 * stage3.dat.params + blocks4 * stage4.dat.params;
    Ok(DdetrComparison {
        stage3,
        stage4,
        flops_ratio: ddetr_flops as f64 / dat_flops as f64,
        activation_ratio: ddetr_act as f64 / dat_act as f64,
        params_ratio: ddetr_params as f64 / dat_params as f64,
    })
}
