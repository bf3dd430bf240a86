//! Deformable multi-head attention: reference grid, query-conditioned offset
//! network, grouped bilinear sampling of keys/values, continuous relative
//! position bias, and the per-query K-point attention variant used for
//! comparison.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dat_tensor::{Graph, Scalar, Tensor};

use crate::error::{config_err, Result};
use crate::init::{trunc_normal, zeros_param};
use crate::layers::{DeformCapture, ForwardCtx, GroupCapture, Linear, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    None,
    Fixed,
    DepthwiseConv,
    DeformableRelative,
}

impl std::str::FromStr for BiasMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(BiasMode::None),
            "fixed" => Ok(BiasMode::Fixed),
            "dwconv" | "depthwise_conv" => Ok(BiasMode::DepthwiseConv),
            "relative" | "deformable_relative" => Ok(BiasMode::DeformableRelative),
            other => Err(format!("unknown bias mode '{other}'")),
        }
    }
}

/// All symbols of one deformable attention layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeformAttnConfig {
    pub channels: usize,
    pub heads: usize,
    pub offset_groups: usize,
    /// Reference grid downsampling: the grid is H/r × W/r.
    pub grid_factor: usize,
    /// Offset range s in input-feature pixels; offsets are s·tanh(raw).
    pub offset_range: f64,
    /// Depthwise kernel size of the offset network (odd).
    pub offset_kernel: usize,
    pub bias_mode: BiasMode,
    /// Whether the q/k/v/o projections carry additive bias vectors.
    pub proj_bias: bool,
}

impl DeformAttnConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let c = self.channels;
        if self.heads == 0 || c % self.heads != 0 {
            return config_err(format!("{} heads do not divide {c} channels", self.heads));
        }
        if self.offset_groups == 0 || self.heads % self.offset_groups != 0 {
            return config_err(format!(
                "heads {} must be a multiple of offset groups {}",
                self.heads, self.offset_groups
            ));
        }
        if c % self.offset_groups != 0 {
            return config_err(format!(
                "offset groups {} do not divide {c} channels",
                self.offset_groups
            ));
        }
        if self.offset_kernel % 2 == 0 {
            return config_err(format!("offset kernel {} must be odd", self.offset_kernel));
        }
        if self.grid_factor == 0 || h % self.grid_factor != 0 || w % self.grid_factor != 0 {
            return config_err(format!(
                "grid factor {} does not divide feature map {h}x{w}",
                self.grid_factor
            ));
        }
        if self.offset_range < 0.0 {
            return config_err(format!("offset range {} must be >= 0", self.offset_range));
        }
        if self.bias_mode == BiasMode::DepthwiseConv && self.grid_factor != 1 {
            return config_err("depthwise_conv bias adds values at query resolution and needs grid factor 1");
        }
        Ok(())
    }
}

/// Shared offset generation network: depthwise k×k conv (stride r), GELU,
/// then a bias-free 1×1 conv down to 2 offset channels.
#[derive(Clone)]
pub struct OffsetNetParams<T: Scalar> {
    pub depthwise: Tensor<T>,
    pub depthwise_bias: Tensor<T>,
    pub pointwise: Tensor<T>,
}

impl<T: Scalar> OffsetNetParams<T> {
    pub fn init(rng: &mut ChaCha8Rng, group_channels: usize, kernel: usize) -> Self {
        OffsetNetParams {
            depthwise: trunc_normal(rng, &[group_channels, 1, kernel, kernel], INIT_STD),
            depthwise_bias: zeros_param(&[group_channels]),
            pointwise: trunc_normal(rng, &[2, group_channels, 1, 1], INIT_STD),
        }
    }
}

/// Uniform grid of normalized reference points over an H/r × W/r lattice.
/// Point order is row-major; coordinates are stored (x, y) with (-1,-1) the
/// top-left corner and (+1,+1) the bottom-right.
#[derive(Debug, Clone)]
pub struct ReferenceGrid {
    pub h_g: usize,
    pub w_g: usize,
    pub points: Arc<Vec<f64>>,
}

impl ReferenceGrid {
    pub fn len(&self) -> usize {
        self.h_g * self.w_g
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.points.iter().map(|&v| T::from_f64(v)).collect();
        Tensor::from_vec(vec![self.len(), 2], data).expect("consistent shape")
    }
}

fn normalize_lattice(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Linearly spaced lattice coordinates {(0,0), …, (H_G-1, W_G-1)} normalized
/// to [-1, +1] per axis.
pub fn reference_grid(h: usize, w: usize, r: usize) -> Result<ReferenceGrid> {
    if r == 0 || h % r != 0 || w % r != 0 {
        return config_err(format!("grid factor {r} does not divide feature map {h}x{w}"));
    }
    let (h_g, w_g) = (h / r, w / r);
    let mut points = Vec::with_capacity(h_g * w_g * 2);
    for gy in 0..h_g {
        for gx in 0..w_g {
            points.push(normalize_lattice(gx, w_g));
            points.push(normalize_lattice(gy, h_g));
        }
    }
    Ok(ReferenceGrid {
        h_g,
        w_g,
        points: Arc::new(points),
    })
}

/// Bias parameterization of a deformable layer; exactly one is active.
#[derive(Clone)]
pub enum DeformBias<T: Scalar> {
    None,
    /// Trainable [M, HW, N_s] logits added directly.
    Fixed(Tensor<T>),
    /// Depthwise 3×3 positional conv applied to the values and added to the
    /// attention output before the final projection.
    DepthwiseConv { weight: Tensor<T>, bias: Tensor<T> },
    /// One (2H-1)×(2W-1) trainable table per head, indexed by continuous
    /// query-to-key displacement.
    Relative(Tensor<T>),
}

#[derive(Clone)]
pub struct DmhaParams<T: Scalar> {
    pub name: String,
    pub cfg: DeformAttnConfig,
    pub h: usize,
    pub w: usize,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub offset_net: OffsetNetParams<T>,
    pub grid: ReferenceGrid,
    /// Query positions: the full-resolution lattice, used by the bias.
    pub query_grid: ReferenceGrid,
    pub bias: DeformBias<T>,
}

impl<T: Scalar> DmhaParams<T> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        cfg: DeformAttnConfig,
        h: usize,
        w: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        cfg.validate(h, w)?;
        let c = cfg.channels;
        let grid = reference_grid(h, w, cfg.grid_factor)?;
        let query_grid = reference_grid(h, w, 1)?;
        let n_s = grid.len();
        let bias = match cfg.bias_mode {
            BiasMode::None => DeformBias::None,
            BiasMode::Fixed => {
                DeformBias::Fixed(trunc_normal(rng, &[cfg.heads, h * w, n_s], INIT_STD))
            }
            BiasMode::DepthwiseConv => DeformBias::DepthwiseConv {
                weight: trunc_normal(rng, &[c, 1, 3, 3], INIT_STD),
                bias: zeros_param(&[c]),
            },
            BiasMode::DeformableRelative => DeformBias::Relative(trunc_normal(
                rng,
                &[cfg.heads, 2 * h - 1, 2 * w - 1],
                INIT_STD,
            )),
        };
        Ok(DmhaParams {
            name: name.into(),
            wq: Linear::init(rng, c, c, cfg.proj_bias),
            wk: Linear::init(rng, c, c, cfg.proj_bias),
            wv: Linear::init(rng, c, c, cfg.proj_bias),
            wo: Linear::init(rng, c, c, cfg.proj_bias),
            offset_net: OffsetNetParams::init(rng, c / cfg.offset_groups, cfg.offset_kernel),
            grid,
            query_grid,
            bias,
            cfg,
            h,
            w,
        })
    }

    pub fn group_channels(&self) -> usize {
        self.cfg.channels / self.cfg.offset_groups
    }

    pub fn heads_per_group(&self) -> usize {
        self.cfg.heads / self.cfg.offset_groups
    }
}

/// Offsets of one group, in feature pixels and in normalized units.
pub struct GroupOffsets<T: Scalar> {
    pub pixel: Tensor<T>,
    pub normalized: Tensor<T>,
}

/// Runs the shared offset network on each channel group of the query map.
/// Raw outputs pass through s·tanh and are converted to normalized units
/// via Δ_norm = 2·Δ_pixel/(size-1) per axis.
pub fn generate_offsets<T: Scalar>(
    g: &Graph<T>,
    q: &Tensor<T>,
    p: &DmhaParams<T>,
) -> Result<Vec<GroupOffsets<T>>> {
    let (h, w) = (p.h, p.w);
    let cg = p.group_channels();
    let k = p.cfg.offset_kernel;
    let r = p.cfg.grid_factor;
    let s = p.cfg.offset_range;
    let nx = if w > 1 { 2.0 / (w - 1) as f64 } else { 0.0 };
    let ny = if h > 1 { 2.0 / (h - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(p.cfg.offset_groups);
    for grp in 0..p.cfg.offset_groups {
        let slice = g.slice_cols(q, grp * cg, cg)?;
        let img = g.tokens_to_chw(&slice, h, w)?;
        let hidden = g.conv2d(
            &img,
            &p.offset_net.depthwise,
            Some(&p.offset_net.depthwise_bias),
            r,
            k / 2,
            cg,
        )?;
        let hidden = g.gelu(&hidden)?;
        let raw = g.conv2d(&hidden, &p.offset_net.pointwise, None, 1, 0, 1)?;
        let raw = g.chw_to_tokens(&raw)?;
        let pixel = g.scale(&g.tanh(&raw)?, T::from_f64(s))?;
        let normalized = g.affine_cols(
            &pixel,
            &[T::from_f64(nx), T::from_f64(ny)],
            &[T::zero(), T::zero()],
        )?;
        out.push(GroupOffsets { pixel, normalized });
    }
    Ok(out)
}

/// Bilinear-samples each channel group of `x` at its group's deformed
/// points, then concatenates groups back in original channel order.
/// Returns the sampled features and the per-group deformed point tensors.
pub fn deformable_sample<T: Scalar>(
    g: &Graph<T>,
    x: &Tensor<T>,
    h: usize,
    w: usize,
    grid: &ReferenceGrid,
    offsets: &[GroupOffsets<T>],
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let c = *x.shape().last().expect("tokens");
    let groups = offsets.len();
    if groups == 0 || c % groups != 0 {
        return config_err(format!("{groups} offset groups do not divide {c} channels"));
    }
    let cg = c / groups;
    let grid_t = grid.to_tensor::<T>();
    let mut sampled = Vec::with_capacity(groups);
    let mut points = Vec::with_capacity(groups);
    for (grp, off) in offsets.iter().enumerate() {
        let pts = g.add_const(&off.normalized, &grid_t)?;
        let slice = g.slice_cols(x, grp * cg, cg)?;
        let z = g.reshape(&slice, vec![h, w, cg])?;
        sampled.push(g.bilinear_sample(&z, &pts)?);
        points.push(pts);
    }
    let refs: Vec<&Tensor<T>> = sampled.iter().collect();
    Ok((g.concat_last(&refs)?, points))
}

/// Continuous relative position bias for a set of heads sharing one point
/// set: displacements (q - k)/2 are clamped to [-1, 1] and bilinearly
/// interpolate each head's (2H-1)×(2W-1) table.
pub fn deformable_relative_bias<T: Scalar>(
    g: &Graph<T>,
    tables: &Tensor<T>,
    query_positions: &Tensor<T>,
    deformed_points: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (heads, th, tw) = (tables.shape()[0], tables.shape()[1], tables.shape()[2]);
    let hw = query_positions.shape()[0];
    let n_s = deformed_points.shape()[0];
    let disp = g.pairwise_disp(query_positions, deformed_points)?;
    let disp = g.clamp(&disp, -T::one(), T::one())?;
    let flat = g.reshape(tables, vec![heads, th * tw])?;
    let mut per_head = Vec::with_capacity(heads);
    for m in 0..heads {
        let table = g.index_select_rows(&flat, Arc::new(vec![m]))?;
        let table = g.reshape(&table, vec![th, tw, 1])?;
        let vals = g.bilinear_sample(&table, &disp)?;
        per_head.push(g.reshape(&vals, vec![1, hw, n_s])?);
    }
    let refs: Vec<&Tensor<T>> = per_head.iter().collect();
    g.concat0(&refs).map_err(Into::into)
}

/// Full deformable multi-head attention over a token matrix [H·W, C].
pub fn dmha_forward<T: Scalar>(
    g: &Graph<T>,
    x: &Tensor<T>,
    p: &DmhaParams<T>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Tensor<T>> {
    let (h, w) = (p.h, p.w);
    let c = p.cfg.channels;
    if x.shape() != [h * w, c] {
        return config_err(format!(
            "dmha input {:?}, layer built for [{}, {c}]",
            x.shape(),
            h * w
        ));
    }
    let heads = p.cfg.heads;
    let n_s = p.grid.len();

    let q = p.wq.forward(g, x)?;
    let offsets = generate_offsets(g, &q, p)?;
    for off in &offsets {
        for v in off.pixel.data() {
            let m = v.as_f64().abs();
            if m > ctx.max_offset_pixels {
                ctx.max_offset_pixels = m;
            }
        }
    }
    let (x_sampled, points) = deformable_sample(g, x, h, w, &p.grid, &offsets)?;
    let k = p.wk.forward(g, &x_sampled)?;
    let v = p.wv.forward(g, &x_sampled)?;

    let qh = g.split_heads(&q, heads)?;
    let kh = g.split_heads(&k, heads)?;
    let vh = g.split_heads(&v, heads)?;
    let scores = g.matmul(&qh, &g.transpose_last2(&kh)?)?;
    let mut scores = g.scale(&scores, T::from_f64(1.0 / ((c / heads) as f64).sqrt()))?;

    match &p.bias {
        DeformBias::Relative(tables) => {
            let qpos = p.query_grid.to_tensor::<T>();
            let flat = g.reshape(tables, vec![heads, (2 * h - 1) * (2 * w - 1)])?;
            let mg = p.heads_per_group();
            let mut per_group = Vec::with_capacity(p.cfg.offset_groups);
            for (grp, pts) in points.iter().enumerate() {
                let head_rows: Vec<usize> = (grp * mg..(grp + 1) * mg).collect();
                let tbl = g.index_select_rows(&flat, Arc::new(head_rows))?;
                let tbl = g.reshape(&tbl, vec![mg, 2 * h - 1, 2 * w - 1])?;
                per_group.push(deformable_relative_bias(g, &tbl, &qpos, pts)?);
            }
            let refs: Vec<&Tensor<T>> = per_group.iter().collect();
            let bias = g.concat0(&refs)?;
            scores = g.add(&scores, &bias)?;
        }
        DeformBias::Fixed(bias) => {
            scores = g.add(&scores, bias)?;
        }
        DeformBias::DepthwiseConv { .. } | DeformBias::None => {}
    }

    let attn = g.softmax_lastdim(&scores)?;
    let mut out = g.merge_heads(&g.matmul(&attn, &vh)?)?;

    if let DeformBias::DepthwiseConv { weight, bias } = &p.bias {
        // Grid factor 1 is enforced at construction, so values live on the
        // query lattice.
        let vimg = g.tokens_to_chw(&v, h, w)?;
        let lepe = g.conv2d(&vimg, weight, Some(bias), 1, 1, c)?;
        let lepe = g.chw_to_tokens(&lepe)?;
        out = g.add(&out, &lepe)?;
    }

    if let Some(capture) = ctx.capture.as_deref_mut() {
        let mg = p.heads_per_group();
        let attn_data = attn.data();
        let hw = h * w;
        let mut groups = Vec::with_capacity(p.cfg.offset_groups);
        for (grp, pts) in points.iter().enumerate() {
            let pd = pts.data();
            let pts_f64: Vec<[f64; 2]> = (0..n_s)
                .map(|i| [pd[2 * i].as_f64(), pd[2 * i + 1].as_f64()])
                .collect();
            let mut scores_per_key = vec![0.0f64; n_s];
            for m in grp * mg..(grp + 1) * mg {
                for qi in 0..hw {
                    for ki in 0..n_s {
                        scores_per_key[ki] += attn_data[(m * hw + qi) * n_s + ki].as_f64();
                    }
                }
            }
            let max = scores_per_key.iter().cloned().fold(0.0f64, f64::max);
            if max > 0.0 {
                for s in scores_per_key.iter_mut() {
                    *s /= max;
                }
            }
            groups.push(GroupCapture {
                points: pts_f64,
                key_scores: scores_per_key,
            });
        }
        capture.push(DeformCapture {
            layer: p.name.clone(),
            h,
            w,
            groups,
        });
    }

    p.wo.forward(g, &out)
}

/// Per-query K-point attention: each query predicts K offsets from its own
/// reference position and K attention logits per head directly from its
/// feature, with no query-key dot products.
#[derive(Clone)]
pub struct DdetrParams<T: Scalar> {
    pub heads: usize,
    pub k_points: usize,
    pub h: usize,
    pub w: usize,
    /// [C, M·K·2], bias-free: zero weights pin every query to its own position.
    pub w_offsets: Linear<T>,
    /// [C, M·K], bias-free attention logit projection.
    pub w_att: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub query_grid: ReferenceGrid,
}

impl<T: Scalar> DdetrParams<T> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        channels: usize,
        heads: usize,
        k_points: usize,
        h: usize,
        w: usize,
        proj_bias: bool,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return config_err(format!("{heads} heads do not divide {channels} channels"));
        }
        if k_points == 0 {
            return config_err("ddetr needs K >= 1 sampling points");
        }
        Ok(DdetrParams {
            heads,
            k_points,
            h,
            w,
            w_offsets: Linear::init(rng, channels, heads * k_points * 2, false),
            w_att: Linear::init(rng, channels, heads * k_points, false),
            wv: Linear::init(rng, channels, channels, proj_bias),
            wo: Linear::init(rng, channels, channels, proj_bias),
            query_grid: reference_grid(h, w, 1)?,
        })
    }
}

pub fn ddetr_attention<T: Scalar>(
    g: &Graph<T>,
    x: &Tensor<T>,
    p: &DdetrParams<T>,
) -> Result<Tensor<T>> {
    let (h, w) = (p.h, p.w);
    let n = h * w;
    let c = p.wv.in_dim();
    if x.shape() != [n, c] {
        return config_err(format!("ddetr input {:?}, layer built for [{n}, {c}]", x.shape()));
    }
    let (m, kp) = (p.heads, p.k_points);
    let d = c / m;
    let nx = if w > 1 { 2.0 / (w - 1) as f64 } else { 0.0 };
    let ny = if h > 1 { 2.0 / (h - 1) as f64 } else { 0.0 };

    let v = p.wv.forward(g, x)?;
    let offsets_pix = p.w_offsets.forward(g, x)?; // [N, M·K·2]
    let offsets = g.reshape(&offsets_pix, vec![n * m * kp, 2])?;
    let offsets = g.affine_cols(
        &offsets,
        &[T::from_f64(nx), T::from_f64(ny)],
        &[T::zero(), T::zero()],
    )?;
    let logits = p.w_att.forward(g, x)?; // [N, M·K]
    let logits = g.reshape(&logits, vec![n * m, kp])?;
    let weights = g.softmax_lastdim(&logits)?;

    // Every query samples around its own lattice position.
    let mut tiled = Vec::with_capacity(n * kp * 2);
    for qi in 0..n {
        for _ in 0..kp {
            tiled.push(T::from_f64(p.query_grid.points[2 * qi]));
            tiled.push(T::from_f64(p.query_grid.points[2 * qi + 1]));
        }
    }
    let qpos = Tensor::from_vec(vec![n * kp, 2], tiled)?;

    let mut head_outs = Vec::with_capacity(m);
    for mi in 0..m {
        let off_rows: Vec<usize> = (0..n)
            .flat_map(|qi| (0..kp).map(move |ki| (qi * m + mi) * kp + ki))
            .collect();
        let off_m = g.index_select_rows(&offsets, Arc::new(off_rows))?;
        let pts = g.add_const(&off_m, &qpos)?; // [N·K, 2]

        let w_rows: Vec<usize> = (0..n).map(|qi| qi * m + mi).collect();
        let w_m = g.index_select_rows(&weights, Arc::new(w_rows))?;
        let w_m = g.reshape(&w_m, vec![n, 1, kp])?;

        let v_m = g.slice_cols(&v, mi * d, d)?;
        let v_map = g.reshape(&v_m, vec![h, w, d])?;
        let sampled = g.bilinear_sample(&v_map, &pts)?;
        let sampled = g.reshape(&sampled, vec![n, kp, d])?;
        let out = g.matmul(&w_m, &sampled)?;
        head_outs.push(g.reshape(&out, vec![n, d])?);
    }
    let refs: Vec<&Tensor<T>> = head_outs.iter().collect();
    let merged = g.concat_last(&refs)?;
    p.wo.forward(g, &merged)
}
