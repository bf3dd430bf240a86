//! Shared layer primitives and the forward-pass context.

use rand_chacha::ChaCha8Rng;

use dat_tensor::{Graph, Scalar, Tensor};

use crate::error::Result;
use crate::init::{ones_param, trunc_normal, zeros_param};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Row-convention linear map: y = x·W (+ b), W stored [in, out].
#[derive(Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            weight: trunc_normal(rng, &[in_dim, out_dim], INIT_STD),
            bias: bias.then(|| zeros_param(&[out_dim])),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            weight: zeros_param(&[in_dim, out_dim]),
            bias: bias.then(|| zeros_param(&[out_dim])),
        }
    }

    pub fn forward(&self, g: &Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = g.matmul(x, &self.weight)?;
        Ok(match &self.bias {
            Some(b) => g.add_broadcast0(&y, b)?,
            None => y,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn init(dim: usize) -> Self {
        LayerNormParams {
            gamma: ones_param(&[dim]),
            beta: zeros_param(&[dim]),
        }
    }

    pub fn forward(&self, g: &Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(g.layer_norm(x, &self.gamma, &self.beta, T::from_f64(LN_EPS))?)
    }
}

/// Deformed sampling points and per-key attention mass captured from one
/// deformable layer during a forward pass.
#[derive(Debug, Clone)]
pub struct DeformCapture {
    pub layer: String,
    /// Feature map extents the points are normalized against.
    pub h: usize,
    pub w: usize,
    pub groups: Vec<GroupCapture>,
}

#[derive(Debug, Clone)]
pub struct GroupCapture {
    /// Normalized (x, y) deformed points, one per sampled key.
    pub points: Vec<[f64; 2]>,
    /// Attention weight per key, summed over the group's heads and all
    /// queries, normalized so the largest entry is 1.
    pub key_scores: Vec<f64>,
}

/// Mutable state threaded through a forward pass.
pub struct ForwardCtx<'a> {
    pub training: bool,
    /// Drop-path draws; required when training with a nonzero rate.
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// When set, deformable layers append their sampling state here.
    pub capture: Option<&'a mut Vec<DeformCapture>>,
    /// Largest |offset| in feature pixels seen by any deformable layer.
    pub max_offset_pixels: f64,
}

impl<'a> ForwardCtx<'a> {
    pub fn inference() -> Self {
        ForwardCtx {
            training: false,
            rng: None,
            capture: None,
            max_offset_pixels: 0.0,
        }
    }

    pub fn training(rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            training: true,
            rng: Some(rng),
            capture: None,
            max_offset_pixels: 0.0,
        }
    }

    pub fn capturing(capture: &'a mut Vec<DeformCapture>) -> Self {
        ForwardCtx {
            training: false,
            rng: None,
            capture: Some(capture),
            max_offset_pixels: 0.0,
        }
    }
}
