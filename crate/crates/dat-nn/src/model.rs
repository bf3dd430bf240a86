//! The four-stage pyramid backbone with a classification head: patch
//! embedding, stages of paired local + (shift-window | deformable | SRA)
//! blocks, strided transitions, and per-stage attention substitution.

use serde::{Deserialize, Serialize};

use dat_tensor::{Graph, Scalar, Tensor};

use crate::attention::{AttentionLayer, BlockParams, SraParams, WindowAttnParams};
use crate::deform::{BiasMode, DeformAttnConfig, DeformBias, DmhaParams};
use crate::error::{config_err, Result};
use crate::init::{trunc_normal, zeros_param, RngStream};
use crate::layers::{ForwardCtx, LayerNormParams, Linear, INIT_STD};

pub const PATCH_STRIDE: usize = 4;
pub const TRANSITION_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    ShiftWindow,
    Deformable,
    Sra,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    /// Number of successive-pair units; each unit is two transformer blocks.
    pub depth: usize,
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    /// Offset groups when this stage runs deformable attention.
    pub offset_groups: usize,
    pub attention: AttentionKind,
    /// Reference-grid downsampling for deformable attention.
    pub grid_factor: usize,
    /// Key/value reduction when this stage runs SRA.
    pub sra_reduction: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub drop_path_max: f64,
    /// Offset range s in feature pixels (tanh-scaled bound).
    pub offset_range: f64,
    /// Offset network depthwise kernel size.
    pub offset_kernel: usize,
    pub bias_mode: BiasMode,
    pub proj_bias: bool,
    pub stages: Vec<StageConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    T,
    S,
    B,
    Micro,
}

impl std::str::FromStr for Variant {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t" | "tiny" => Ok(Variant::T),
            "s" | "small" => Ok(Variant::S),
            "b" | "base" => Ok(Variant::B),
            "micro" => Ok(Variant::Micro),
            other => Err(crate::error::Error::Config(format!(
                "unknown variant '{other}' (expected T, S, B, or micro)"
            ))),
        }
    }
}

fn stage(
    depth: usize,
    channels: usize,
    window: usize,
    heads: usize,
    offset_groups: usize,
    attention: AttentionKind,
    grid_factor: usize,
    sra_reduction: usize,
) -> StageConfig {
    StageConfig {
        depth,
        channels,
        window,
        heads,
        offset_groups,
        attention,
        grid_factor,
        sra_reduction,
    }
}

/// Published architecture presets plus a desk-scale `micro` variant for
/// training and gradient verification.
pub fn preset(variant: Variant) -> DatModelConfig {
    use AttentionKind::{Deformable, ShiftWindow};
    let (depths, channels, heads, groups, window, input, classes, drop_path) = match variant {
        Variant::T => ([1, 1, 3, 1], [96, 192, 384, 768], [3, 6, 12, 24], [1, 2, 3, 6], 7, 224, 1000, 0.2),
        Variant::S => ([1, 1, 9, 1], [96, 192, 384, 768], [3, 6, 12, 24], [1, 2, 3, 6], 7, 224, 1000, 0.3),
        Variant::B => ([1, 1, 9, 1], [128, 256, 512, 1024], [4, 8, 16, 32], [1, 2, 4, 8], 7, 224, 1000, 0.5),
        Variant::Micro => ([1, 1, 1, 1], [16, 32, 64, 128], [2, 2, 2, 2], [1, 1, 2, 2], 2, 32, 4, 0.1),
    };
    // The reference grid stays near 14x14 wherever the map is larger, so an
    // all-stage deformable override keeps early-stage sampling affordable.
    let grid_factors = match variant {
        Variant::Micro => [1, 1, 1, 1],
        _ => [4, 2, 1, 1],
    };
    let sra_reductions = match variant {
        Variant::Micro => [2, 2, 1, 1],
        _ => [8, 4, 2, 1],
    };
    let kinds = [ShiftWindow, ShiftWindow, Deformable, Deformable];
    let stages = (0..4)
        .map(|i| {
            stage(
                depths[i],
                channels[i],
                window,
                heads[i],
                groups[i],
                kinds[i],
                grid_factors[i],
                sra_reductions[i],
            )
        })
        .collect();
    DatModelConfig {
        input_size: input,
        in_channels: 3,
        num_classes: classes,
        mlp_ratio: 4,
        drop_path_max: drop_path,
        offset_range: 2.0,
        offset_kernel: 5,
        bias_mode: BiasMode::DeformableRelative,
        proj_bias: true,
        stages,
    }
}

impl DatModelConfig {
    /// Feature map side length at each stage.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.stages.len());
        let mut s = self.input_size / PATCH_STRIDE;
        for _ in &self.stages {
            sizes.push(s);
            s /= TRANSITION_STRIDE;
        }
        sizes
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| 2 * s.depth).sum()
    }

    /// Linearly increasing drop-path rates over the flattened block sequence.
    pub fn drop_path_rates(&self) -> Vec<f64> {
        let n = self.total_blocks();
        (0..n)
            .map(|i| {
                if n <= 1 {
                    0.0
                } else {
                    self.drop_path_max * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return config_err(format!("model needs exactly 4 stages, got {}", self.stages.len()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return config_err(format!("input size {} must be a positive multiple of 32", self.input_size));
        }
        if self.num_classes == 0 {
            return config_err("num_classes must be >= 1");
        }
        if self.mlp_ratio == 0 {
            return config_err("mlp_ratio must be >= 1");
        }
        if !(0.0..1.0).contains(&self.drop_path_max) {
            return config_err(format!("drop_path_max {} outside [0, 1)", self.drop_path_max));
        }
        let sizes = self.stage_sizes();
        for (i, (sc, &size)) in self.stages.iter().zip(&sizes).enumerate() {
            let stage_name = format!("stage {}", i + 1);
            if sc.depth == 0 {
                return config_err(format!("{stage_name}: depth must be >= 1"));
            }
            if sc.heads == 0 || sc.channels % sc.heads != 0 {
                return config_err(format!(
                    "{stage_name}: {} heads do not divide {} channels",
                    sc.heads, sc.channels
                ));
            }
            let ws = sc.window.min(size);
            if ws == 0 || size % ws != 0 {
                return config_err(format!(
                    "{stage_name}: window {} does not divide feature map {size}x{size}",
                    sc.window
                ));
            }
            match sc.attention {
                AttentionKind::Deformable => {
                    self.deform_config(sc).validate(size, size)?;
                }
                AttentionKind::Sra => {
                    if sc.sra_reduction == 0 || size % sc.sra_reduction != 0 {
                        return config_err(format!(
                            "{stage_name}: sra reduction {} does not divide feature map {size}x{size}",
                            sc.sra_reduction
                        ));
                    }
                }
                AttentionKind::ShiftWindow => {}
            }
        }
        Ok(())
    }

    pub fn deform_config(&self, sc: &StageConfig) -> DeformAttnConfig {
        DeformAttnConfig {
            channels: sc.channels,
            heads: sc.heads,
            offset_groups: sc.offset_groups,
            grid_factor: sc.grid_factor,
            offset_range: self.offset_range,
            offset_kernel: self.offset_kernel,
            bias_mode: self.bias_mode,
            proj_bias: self.proj_bias,
        }
    }
}

#[derive(Clone)]
pub struct PatchEmbed<T: Scalar> {
    pub conv_w: Tensor<T>,
    pub conv_b: Tensor<T>,
    pub norm: LayerNormParams<T>,
}

#[derive(Clone)]
pub struct Transition<T: Scalar> {
    pub conv_w: Tensor<T>,
    pub conv_b: Tensor<T>,
    pub norm: LayerNormParams<T>,
}

#[derive(Clone)]
pub struct Stage<T: Scalar> {
    pub blocks: Vec<BlockParams<T>>,
    pub transition: Option<Transition<T>>,
    pub size: usize,
}

#[derive(Clone)]
pub struct DatModel<T: Scalar> {
    pub config: DatModelConfig,
    pub patch: PatchEmbed<T>,
    pub stages: Vec<Stage<T>>,
    pub final_norm: LayerNormParams<T>,
    pub head: Linear<T>,
}

/// Builds the model with the module initialization conventions: truncated
/// normal (std 0.02) weights and tables, zero biases, unit norms, and a
/// zeroed classifier head.
pub fn build_dat<T: Scalar>(config: &DatModelConfig, seed: &RngStream) -> Result<DatModel<T>> {
    config.validate()?;
    let mut rng = seed.derive("model-init").rng();
    let sizes = config.stage_sizes();
    let rates = config.drop_path_rates();

    let c0 = config.stages[0].channels;
    let patch = PatchEmbed {
        conv_w: trunc_normal(
            &mut rng,
            &[c0, config.in_channels, PATCH_STRIDE, PATCH_STRIDE],
            INIT_STD,
        ),
        conv_b: zeros_param(&[c0]),
        norm: LayerNormParams::init(c0),
    };

    let mut stages = Vec::with_capacity(4);
    let mut block_idx = 0;
    for (i, sc) in config.stages.iter().enumerate() {
        let size = sizes[i];
        let mut blocks = Vec::with_capacity(2 * sc.depth);
        for unit in 0..sc.depth {
            for half in 0..2 {
                let name = format!("stages.{i}.blocks.{}", 2 * unit + half);
                let attn = match (sc.attention, half) {
                    (AttentionKind::Sra, _) => AttentionLayer::Sra(SraParams::init(
                        &mut rng,
                        sc.channels,
                        sc.heads,
                        sc.sra_reduction,
                        config.proj_bias,
                    )?),
                    (_, 0) => AttentionLayer::Window(WindowAttnParams::init(
                        &mut rng,
                        sc.channels,
                        sc.heads,
                        size,
                        size,
                        sc.window,
                        false,
                        config.proj_bias,
                    )?),
                    (AttentionKind::ShiftWindow, _) => {
                        AttentionLayer::Window(WindowAttnParams::init(
                            &mut rng,
                            sc.channels,
                            sc.heads,
                            size,
                            size,
                            sc.window,
                            true,
                            config.proj_bias,
                        )?)
                    }
                    (AttentionKind::Deformable, _) => AttentionLayer::Deformable(
                        DmhaParams::init(&mut rng, config.deform_config(sc), size, size, &name)?,
                    ),
                };
                let hidden = sc.channels * config.mlp_ratio;
                blocks.push(BlockParams {
                    norm1: LayerNormParams::init(sc.channels),
                    attn,
                    norm2: LayerNormParams::init(sc.channels),
                    fc1: Linear::init(&mut rng, sc.channels, hidden, true),
                    fc2: Linear::init(&mut rng, hidden, sc.channels, true),
                    drop_path: rates[block_idx],
                    h: size,
                    w: size,
                });
                block_idx += 1;
            }
        }
        let transition = (i + 1 < config.stages.len()).then(|| {
            let c_next = config.stages[i + 1].channels;
            Transition {
                conv_w: trunc_normal(
                    &mut rng,
                    &[c_next, sc.channels, TRANSITION_STRIDE, TRANSITION_STRIDE],
                    INIT_STD,
                ),
                conv_b: zeros_param(&[c_next]),
                norm: LayerNormParams::init(c_next),
            }
        });
        stages.push(Stage {
            blocks,
            transition,
            size,
        });
    }

    let c_last = config.stages[3].channels;
    Ok(DatModel {
        config: config.clone(),
        patch,
        stages,
        final_norm: LayerNormParams::init(c_last),
        head: Linear {
            weight: zeros_param(&[c_last, config.num_classes]),
            bias: Some(zeros_param(&[config.num_classes])),
        },
    })
}

/// Patch embedding only: [1, 3, H, W] -> tokens [H/4·W/4, C1] after the norm.
pub fn embed_patches<T: Scalar>(
    g: &Graph<T>,
    model: &DatModel<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let emb = g.conv2d(image, &model.patch.conv_w, Some(&model.patch.conv_b), PATCH_STRIDE, 0, 1)?;
    let tokens = g.chw_to_tokens(&emb)?;
    model.patch.norm.forward(g, &tokens)
}

/// Single-image forward to logits [num_classes].
pub fn forward_single<T: Scalar>(
    g: &Graph<T>,
    model: &DatModel<T>,
    image: &Tensor<T>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Tensor<T>> {
    let cfg = &model.config;
    if image.shape() != [1, cfg.in_channels, cfg.input_size, cfg.input_size] {
        return Err(dat_tensor::Error::Dimension(format!(
            "input {:?}, model expects [1, {}, {}, {}]",
            image.shape(),
            cfg.in_channels,
            cfg.input_size,
            cfg.input_size
        ))
        .into());
    }
    let mut t = embed_patches(g, model, image)?;
    for stage in &model.stages {
        for block in &stage.blocks {
            t = crate::attention::transformer_block(g, &t, block, ctx)?;
        }
        if let Some(tr) = &stage.transition {
            let img = g.tokens_to_chw(&t, stage.size, stage.size)?;
            let red = g.conv2d(&img, &tr.conv_w, Some(&tr.conv_b), TRANSITION_STRIDE, 0, 1)?;
            t = g.chw_to_tokens(&red)?;
            t = tr.norm.forward(g, &t)?;
        }
    }
    let t = model.final_norm.forward(g, &t)?;
    let pooled = g.mean_axis0(&t)?;
    let pooled = g.reshape(&pooled, vec![1, pooled.numel()])?;
    let logits = model.head.forward(g, &pooled)?;
    Ok(g.reshape(&logits, vec![model.config.num_classes])?)
}

/// Batched forward: images [B, 3, H, W] -> logits [B, num_classes].
pub fn forward_classify<T: Scalar>(
    g: &Graph<T>,
    model: &DatModel<T>,
    images: &Tensor<T>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Tensor<T>> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(dat_tensor::Error::Dimension(format!(
            "images must be [B, C, H, W], got {shape:?}"
        ))
        .into());
    }
    let batch = shape[0];
    let per = shape[1] * shape[2] * shape[3];
    let flat = g.reshape(images, vec![batch, per])?;
    let mut rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = g.index_select_rows(&flat, std::sync::Arc::new(vec![b]))?;
        let image = g.reshape(&row, vec![1, shape[1], shape[2], shape[3]])?;
        let logits = forward_single(g, model, &image, ctx)?;
        rows.push(g.reshape(&logits, vec![1, model.config.num_classes])?);
    }
    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    g.concat0(&refs).map_err(Into::into)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Table,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl<T: Scalar> DatModel<T> {
    /// Visits every learnable tensor in a stable, deterministic order.
    pub fn visit_tensors(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        walk_model(self, f);
    }

    /// Mutable variant of [`DatModel::visit_tensors`], in the same order.
    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        walk_model_mut(self, f);
    }

    /// Every parameter and counted buffer, in visit order: learnables first
    /// (matching `visit_tensors`), then the relative-index and reference-grid
    /// buffers per block.
    pub fn named_parameters(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |name, kind, t| {
            out.push(ParamInfo {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
            });
        });
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.blocks.iter().enumerate() {
                let p = format!("stages.{i}.blocks.{j}");
                match &block.attn {
                    AttentionLayer::Window(wp) => {
                        let n = wp.window * wp.window;
                        out.push(ParamInfo {
                            name: format!("{p}.attn.relative_index"),
                            kind: ParamKind::Buffer,
                            shape: vec![n, n],
                        });
                    }
                    AttentionLayer::Deformable(dp) => {
                        out.push(ParamInfo {
                            name: format!("{p}.attn.reference_grid"),
                            kind: ParamKind::Buffer,
                            shape: vec![dp.grid.len(), 2],
                        });
                    }
                    AttentionLayer::Sra(_) => {}
                }
            }
        }
        out
    }
}

fn walk_model<T: Scalar>(model: &DatModel<T>, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
    let lin = |name: String, l: &Linear<T>, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)| {
        f(&format!("{name}.weight"), ParamKind::Weight, &l.weight);
        if let Some(b) = &l.bias {
            f(&format!("{name}.bias"), ParamKind::Bias, b);
        }
    };
    f("patch_embed.conv.weight", ParamKind::Weight, &model.patch.conv_w);
    f("patch_embed.conv.bias", ParamKind::Bias, &model.patch.conv_b);
    f("patch_embed.norm.gamma", ParamKind::Weight, &model.patch.norm.gamma);
    f("patch_embed.norm.beta", ParamKind::Bias, &model.patch.norm.beta);
    for (i, stage) in model.stages.iter().enumerate() {
        for (j, block) in stage.blocks.iter().enumerate() {
            let p = format!("stages.{i}.blocks.{j}");
            f(&format!("{p}.norm1.gamma"), ParamKind::Weight, &block.norm1.gamma);
            f(&format!("{p}.norm1.beta"), ParamKind::Bias, &block.norm1.beta);
            match &block.attn {
                AttentionLayer::Window(wp) => {
                    lin(format!("{p}.attn.wq"), &wp.attn.wq, f);
                    lin(format!("{p}.attn.wk"), &wp.attn.wk, f);
                    lin(format!("{p}.attn.wv"), &wp.attn.wv, f);
                    lin(format!("{p}.attn.wo"), &wp.attn.wo, f);
                    f(&format!("{p}.attn.bias_table"), ParamKind::Table, &wp.bias_table);
                }
                AttentionLayer::Deformable(dp) => {
                    lin(format!("{p}.attn.wq"), &dp.wq, f);
                    lin(format!("{p}.attn.wk"), &dp.wk, f);
                    lin(format!("{p}.attn.wv"), &dp.wv, f);
                    lin(format!("{p}.attn.wo"), &dp.wo, f);
                    f(
                        &format!("{p}.attn.offset_net.depthwise.weight"),
                        ParamKind::Weight,
                        &dp.offset_net.depthwise,
                    );
                    f(
                        &format!("{p}.attn.offset_net.depthwise.bias"),
                        ParamKind::Bias,
                        &dp.offset_net.depthwise_bias,
                    );
                    f(
                        &format!("{p}.attn.offset_net.pointwise.weight"),
                        ParamKind::Weight,
                        &dp.offset_net.pointwise,
                    );
                    match &dp.bias {
                        DeformBias::None => {}
                        DeformBias::Fixed(t) => f(&format!("{p}.attn.fixed_bias"), ParamKind::Table, t),
                        DeformBias::DepthwiseConv { weight, bias } => {
                            f(&format!("{p}.attn.pos_conv.weight"), ParamKind::Weight, weight);
                            f(&format!("{p}.attn.pos_conv.bias"), ParamKind::Bias, bias);
                        }
                        DeformBias::Relative(t) => {
                            f(&format!("{p}.attn.bias_table"), ParamKind::Table, t)
                        }
                    }
                }
                AttentionLayer::Sra(sp) => {
                    lin(format!("{p}.attn.wq"), &sp.attn.wq, f);
                    lin(format!("{p}.attn.wk"), &sp.attn.wk, f);
                    lin(format!("{p}.attn.wv"), &sp.attn.wv, f);
                    lin(format!("{p}.attn.wo"), &sp.attn.wo, f);
                    if let Some(sr) = &sp.sr {
                        f(&format!("{p}.attn.sr.conv.weight"), ParamKind::Weight, &sr.conv_w);
                        f(&format!("{p}.attn.sr.conv.bias"), ParamKind::Bias, &sr.conv_b);
                        f(&format!("{p}.attn.sr.norm.gamma"), ParamKind::Weight, &sr.norm.gamma);
                        f(&format!("{p}.attn.sr.norm.beta"), ParamKind::Bias, &sr.norm.beta);
                    }
                }
            }
            f(&format!("{p}.norm2.gamma"), ParamKind::Weight, &block.norm2.gamma);
            f(&format!("{p}.norm2.beta"), ParamKind::Bias, &block.norm2.beta);
            lin(format!("{p}.mlp.fc1"), &block.fc1, f);
            lin(format!("{p}.mlp.fc2"), &block.fc2, f);
        }
        if let Some(tr) = &stage.transition {
            f(&format!("stages.{i}.transition.conv.weight"), ParamKind::Weight, &tr.conv_w);
            f(&format!("stages.{i}.transition.conv.bias"), ParamKind::Bias, &tr.conv_b);
            f(&format!("stages.{i}.transition.norm.gamma"), ParamKind::Weight, &tr.norm.gamma);
            f(&format!("stages.{i}.transition.norm.beta"), ParamKind::Bias, &tr.norm.beta);
        }
    }
    f("final_norm.gamma", ParamKind::Weight, &model.final_norm.gamma);
    f("final_norm.beta", ParamKind::Bias, &model.final_norm.beta);
    lin("head".to_string(), &model.head, f);
}

fn walk_model_mut<T: Scalar>(
    model: &mut DatModel<T>,
    f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>),
) {
    let lin =
        |name: String, l: &mut Linear<T>, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)| {
            f(&format!("{name}.weight"), ParamKind::Weight, &mut l.weight);
            if let Some(b) = &mut l.bias {
                f(&format!("{name}.bias"), ParamKind::Bias, b);
            }
        };
    f("patch_embed.conv.weight", ParamKind::Weight, &mut model.patch.conv_w);
    f("patch_embed.conv.bias", ParamKind::Bias, &mut model.patch.conv_b);
    f("patch_embed.norm.gamma", ParamKind::Weight, &mut model.patch.norm.gamma);
    f("patch_embed.norm.beta", ParamKind::Bias, &mut model.patch.norm.beta);
    for (i, stage) in model.stages.iter_mut().enumerate() {
        for (j, block) in stage.blocks.iter_mut().enumerate() {
            let p = format!("stages.{i}.blocks.{j}");
            f(&format!("{p}.norm1.gamma"), ParamKind::Weight, &mut block.norm1.gamma);
            f(&format!("{p}.norm1.beta"), ParamKind::Bias, &mut block.norm1.beta);
            match &mut block.attn {
                AttentionLayer::Window(wp) => {
                    lin(format!("{p}.attn.wq"), &mut wp.attn.wq, f);
                    lin(format!("{p}.attn.wk"), &mut wp.attn.wk, f);
                    lin(format!("{p}.attn.wv"), &mut wp.attn.wv, f);
                    lin(format!("{p}.attn.wo"), &mut wp.attn.wo, f);
                    f(&format!("{p}.attn.bias_table"), ParamKind::Table, &mut wp.bias_table);
                }
                AttentionLayer::Deformable(dp) => {
                    lin(format!("{p}.attn.wq"), &mut dp.wq, f);
                    lin(format!("{p}.attn.wk"), &mut dp.wk, f);
                    lin(format!("{p}.attn.wv"), &mut dp.wv, f);
                    lin(format!("{p}.attn.wo"), &mut dp.wo, f);
                    f(
                        &format!("{p}.attn.offset_net.depthwise.weight"),
                        ParamKind::Weight,
                        &mut dp.offset_net.depthwise,
                    );
                    f(
                        &format!("{p}.attn.offset_net.depthwise.bias"),
                        ParamKind::Bias,
                        &mut dp.offset_net.depthwise_bias,
                    );
                    f(
                        &format!("{p}.attn.offset_net.pointwise.weight"),
                        ParamKind::Weight,
                        &mut dp.offset_net.pointwise,
                    );
                    match &mut dp.bias {
                        DeformBias::None => {}
                        DeformBias::Fixed(t) => {
                            f(&format!("{p}.attn.fixed_bias"), ParamKind::Table, t)
                        }
                        DeformBias::DepthwiseConv { weight, bias } => {
                            f(&format!("{p}.attn.pos_conv.weight"), ParamKind::Weight, weight);
                            f(&format!("{p}.attn.pos_conv.bias"), ParamKind::Bias, bias);
                        }
                        DeformBias::Relative(t) => {
                            f(&format!("{p}.attn.bias_table"), ParamKind::Table, t)
                        }
                    }
                }
                AttentionLayer::Sra(sp) => {
                    lin(format!("{p}.attn.wq"), &mut sp.attn.wq, f);
                    lin(format!("{p}.attn.wk"), &mut sp.attn.wk, f);
                    lin(format!("{p}.attn.wv"), &mut sp.attn.wv, f);
                    lin(format!("{p}.attn.wo"), &mut sp.attn.wo, f);
                    if let Some(sr) = &mut sp.sr {
                        f(&format!("{p}.attn.sr.conv.weight"), ParamKind::Weight, &mut sr.conv_w);
                        f(&format!("{p}.attn.sr.conv.bias"), ParamKind::Bias, &mut sr.conv_b);
                        f(&format!("{p}.attn.sr.norm.gamma"), ParamKind::Weight, &mut sr.norm.gamma);
                        f(&format!("{p}.attn.sr.norm.beta"), ParamKind::Bias, &mut sr.norm.beta);
                    }
                }
            }
            f(&format!("{p}.norm2.gamma"), ParamKind::Weight, &mut block.norm2.gamma);
            f(&format!("{p}.norm2.beta"), ParamKind::Bias, &mut block.norm2.beta);
            lin(format!("{p}.mlp.fc1"), &mut block.fc1, f);
            lin(format!("{p}.mlp.fc2"), &mut block.fc2, f);
        }
        if let Some(tr) = &mut stage.transition {
            f(&format!("stages.{i}.transition.conv.weight"), ParamKind::Weight, &mut tr.conv_w);
            f(&format!("stages.{i}.transition.conv.bias"), ParamKind::Bias, &mut tr.conv_b);
            f(&format!("stages.{i}.transition.norm.gamma"), ParamKind::Weight, &mut tr.norm.gamma);
            f(&format!("stages.{i}.transition.norm.beta"), ParamKind::Bias, &mut tr.norm.beta);
        }
    }
    f("final_norm.gamma", ParamKind::Weight, &mut model.final_norm.gamma);
    f("final_norm.beta", ParamKind::Bias, &mut model.final_norm.beta);
    lin("head".to_string(), &mut model.head, f);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::RngStream;

    #[test]
    fn preset_matches_published_architecture() {
        let t = preset(Variant::T);
        let s3 = &t.stages[2];
        assert_eq!((s3.depth, s3.channels, s3.heads, s3.offset_groups), (3, 384, 12, 3));
        assert_eq!(t.stages[3].channels, 768);
        assert_eq!(t.stages.iter().map(|s| s.window).collect::<Vec<_>>(), vec![7; 4]);
        assert_eq!(preset(Variant::B).stages[0].channels, 128);
        assert_eq!(preset(Variant::S).stages[2].depth, 9);
        assert_eq!(t.total_blocks(), 12);
    }

    #[test]
    fn default_deformable_stages_are_three_and_four() {
        let cfg = preset(Variant::T);
        let kinds: Vec<AttentionKind> = cfg.stages.iter().map(|s| s.attention).collect();
        assert_eq!(
            kinds,
            vec![
                AttentionKind::ShiftWindow,
                AttentionKind::ShiftWindow,
                AttentionKind::Deformable,
                AttentionKind::Deformable
            ]
        );
    }

    #[test]
    fn all_stage_deformable_override_validates() {
        let mut cfg = preset(Variant::T);
        for s in cfg.stages.iter_mut() {
            s.attention = AttentionKind::Deformable;
        }
        cfg.validate().unwrap();
        // Grid factors keep the early-stage reference grids at 14x14.
        let sizes = cfg.stage_sizes();
        for (s, size) in cfg.stages.iter().zip(sizes) {
            assert_eq!(size / s.grid_factor, if size == 7 { 7 } else { 14 });
        }
    }

    #[test]
    fn zero_depth_is_rejected() {
        let mut cfg = preset(Variant::Micro);
        cfg.stages[1].depth = 0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("depth"), "{err}");
    }

    #[test]
    fn micro_forward_smoke() {
        let cfg = preset(Variant::Micro);
        let model: DatModel<f32> = build_dat(&cfg, &RngStream::new(3)).unwrap();
        let g = Graph::new();
        let n = 3 * 32 * 32;
        let data: Vec<f32> = (0..2 * n).map(|i| ((i * 37 % 101) as f32) / 101.0).collect();
        let images = Tensor::from_vec(vec![2, 3, 32, 32], data).unwrap();
        let mut ctx = ForwardCtx::inference();
        let logits = forward_classify(&g, &model, &images, &mut ctx).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
        assert!(logits.is_finite());
    }

    #[test]
    fn spatial_mismatch_is_a_dimension_error() {
        let cfg = preset(Variant::Micro);
        let model: DatModel<f32> = build_dat(&cfg, &RngStream::new(3)).unwrap();
        let g = Graph::new();
        let images = Tensor::<f32>::zeros(vec![1, 3, 16, 16]);
        let mut ctx = ForwardCtx::inference();
        let err = forward_classify(&g, &model, &images, &mut ctx).unwrap_err();
        assert!(matches!(
            err,
            crate::Error::Tensor(dat_tensor::Error::Dimension(_))
        ));
    }

    #[test]
    fn patch_embedding_commutes_with_whole_patch_shifts() {
        // Constant background with an object; moving the object by one full
        // patch permutes the embedding tokens correspondingly.
        let cfg = preset(Variant::Micro);
        let model: DatModel<f64> = build_dat(&cfg, &RngStream::new(5)).unwrap();
        let g = Graph::new();
        let mut base = vec![0.25; 3 * 32 * 32];
        for c in 0..3 {
            for y in 8..16 {
                for x in 8..16 {
                    base[(c * 32 + y) * 32 + x] = 0.9 - 0.1 * c as f64;
                }
            }
        }
        let mut shifted = vec![0.25; 3 * 32 * 32];
        for c in 0..3 {
            for y in 8..16 {
                for x in 12..20 {
                    shifted[(c * 32 + y) * 32 + x] = 0.9 - 0.1 * c as f64;
                }
            }
        }
        let a = embed_patches(&g, &model, &Tensor::from_vec(vec![1, 3, 32, 32], base).unwrap()).unwrap();
        let b = embed_patches(&g, &model, &Tensor::from_vec(vec![1, 3, 32, 32], shifted).unwrap()).unwrap();
        // Token grid is 8x8; object moved one patch to the right.
        let c1 = a.shape()[1];
        for ty in 0..8 {
            for tx in 0..7 {
                for ch in 0..c1 {
                    let want = a.data()[(ty * 8 + tx) * c1 + ch];
                    let got = b.data()[(ty * 8 + tx + 1) * c1 + ch];
                    assert!((want - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn named_parameters_include_buffers_and_are_deterministic() {
        let cfg = preset(Variant::Micro);
        let a: DatModel<f32> = build_dat(&cfg, &RngStream::new(7)).unwrap();
        let b: DatModel<f32> = build_dat(&cfg, &RngStream::new(7)).unwrap();
        let pa = a.named_parameters();
        let pb = b.named_parameters();
        assert_eq!(pa.len(), pb.len());
        assert!(pa.iter().any(|p| p.kind == ParamKind::Buffer));
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.shape, y.shape);
        }
        let mut va = Vec::new();
        a.visit_tensors(&mut |_, _, t| va.extend_from_slice(t.data()));
        let mut vb = Vec::new();
        b.visit_tensors(&mut |_, _, t| vb.extend_from_slice(t.data()));
        assert_eq!(va, vb);
    }

    #[test]
    fn visit_orders_agree_between_shared_and_mut() {
        let cfg = preset(Variant::Micro);
        let mut m: DatModel<f32> = build_dat(&cfg, &RngStream::new(7)).unwrap();
        let mut shared = Vec::new();
        m.visit_tensors(&mut |name, _, _| shared.push(name.to_string()));
        let mut muts = Vec::new();
        m.visit_tensors_mut(&mut |name, _, _| muts.push(name.to_string()));
        assert_eq!(shared, muts);
    }

    #[test]
    fn inference_forward_is_bitwise_deterministic() {
        let cfg = preset(Variant::Micro);
        let model: DatModel<f64> = build_dat(&cfg, &RngStream::new(11)).unwrap();
        let n = 3 * 32 * 32;
        let data: Vec<f64> = (0..n).map(|i| ((i * 13 % 97) as f64) / 97.0).collect();
        let image = Tensor::from_vec(vec![1, 3, 32, 32], data).unwrap();
        let run = || {
            let g = Graph::new();
            let mut ctx = ForwardCtx::inference();
            forward_single(&g, &model, &image, &mut ctx).unwrap().data().to_vec()
        };
        assert_eq!(run(), run());

        // With all drop rates at zero, training mode agrees bitwise too.
        let mut zero_cfg = cfg.clone();
        zero_cfg.drop_path_max = 0.0;
        let m2: DatModel<f64> = build_dat(&zero_cfg, &RngStream::new(11)).unwrap();
        let g = Graph::new();
        let mut ctx = ForwardCtx::inference();
        let inf = forward_single(&g, &m2, &image, &mut ctx).unwrap();
        let mut rng = crate::init::RngStream::new(0).derive("drop").rng();
        let mut ctx = ForwardCtx::training(&mut rng);
        let tr = forward_single(&g, &m2, &image, &mut ctx).unwrap();
        assert_eq!(inf.data(), tr.data());
    }
}
