//! Recorded operations. Each method validates shapes, evaluates eagerly,
//! and appends a node with the matching adjoint rule.

use std::sync::Arc;

use crate::error::{dim_err, param_err, Result};
use crate::graph::{broadcast_offset, broadcast_shape, split_matrix_shape, transpose_last2_into};
use crate::graph::{Graph, Rule};
use crate::kernels::{self, Conv2dDims};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// Batched matrix product with broadcasting over leading extents.
    /// Adjoints: dA = dZ·Bᵀ, dB = Aᵀ·dZ.
    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape().len() < 2 || b.shape().len() < 2 {
            return dim_err(format!(
                "matmul needs rank >= 2, got {:?} x {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let (ab, m, k) = split_matrix_shape(a.shape());
        let (bb, k2, n) = split_matrix_shape(b.shape());
        if k != k2 {
            return dim_err(format!(
                "matmul inner extents differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let ob = match broadcast_shape(&ab, &bb) {
            Some(s) => s,
            None => {
                return dim_err(format!(
                    "matmul batch extents not broadcastable: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                ))
            }
        };
        let batch: usize = ob.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ai = broadcast_offset(bi, &ob, &ab);
            let bi_ = broadcast_offset(bi, &ob, &bb);
            kernels::mm_nn(
                &a.data()[ai * m * k..(ai + 1) * m * k],
                &b.data()[bi_ * k * n..(bi_ + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = ob;
        shape.push(m);
        shape.push(n);
        let output = Tensor::from_op(shape, out);
        self.record(vec![a.clone(), b.clone()], output.clone(), Rule::Matmul);
        Ok(output)
    }

    pub fn transpose_last2(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() < 2 {
            return dim_err(format!("transpose_last2 needs rank >= 2, got {:?}", x.shape()));
        }
        let mut shape = x.shape().to_vec();
        let rank = shape.len();
        shape.swap(rank - 2, rank - 1);
        let mut out = vec![T::zero(); x.numel()];
        transpose_last2_into(x.data(), x.shape(), &mut out);
        let output = Tensor::from_op(shape, out);
        self.record(vec![x.clone()], output.clone(), Rule::TransposeLast2);
        Ok(output)
    }

    /// Row-wise softmax over the last extent, computed with max subtraction.
    pub fn softmax_lastdim(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let row = match x.shape().last() {
            Some(&r) if r >= 1 => r,
            _ => return dim_err(format!("softmax over empty last extent: {:?}", x.shape())),
        };
        let mut out = vec![T::zero(); x.numel()];
        kernels::softmax_rows(x.data(), row, &mut out);
        let output = Tensor::from_op(x.shape().to_vec(), out);
        self.record(vec![x.clone()], output.clone(), Rule::SoftmaxLastDim);
        Ok(output)
    }

    /// Normalizes the last extent to zero mean and unit population variance,
    /// then applies the affine pair.
    pub fn layer_norm(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>> {
        if eps <= T::zero() {
            return param_err(format!("layer_norm eps must be positive, got {eps}"));
        }
        let row = *x.shape().last().unwrap_or(&0);
        if row == 0 || gamma.shape() != [row] || beta.shape() != [row] {
            return dim_err(format!(
                "layer_norm extents: x {:?}, gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ));
        }
        let stats = kernels::layer_norm_stats(x.data(), row, eps);
        let mut out = vec![T::zero(); x.numel()];
        for (r, xr) in x.data().chunks(row).enumerate() {
            let mu = stats.mean[r];
            let inv = stats.inv_std[r];
            for j in 0..row {
                out[r * row + j] = (xr[j] - mu) * inv * gamma.data()[j] + beta.data()[j];
            }
        }
        let output = Tensor::from_op(x.shape().to_vec(), out);
        self.record(
            vec![x.clone(), gamma.clone(), beta.clone()],
            output.clone(),
            Rule::LayerNorm { eps },
        );
        Ok(output)
    }

    /// Exact GELU: x·Φ(x) with Φ evaluated through erf.
    pub fn gelu(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = x.data().iter().map(|&v| kernels::gelu_value(v)).collect();
        let output = Tensor::from_op(x.shape().to_vec(), out);
        self.record(vec![x.clone()], output.clone(), Rule::Gelu);
        Ok(output)
    }

    pub fn tanh(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = x.data().iter().map(|&v| v.tanh()).collect();
        let output = Tensor::from_op(x.shape().to_vec(), out);
        self.record(vec![x.clone()], output.clone(), Rule::Tanh);
        Ok(output)
    }

    /// Cross-correlation with zero padding. `x` is [B, Cin, H, W] and `w` is
    /// [Cout, Cin/groups, kh, kw].
    pub fn conv2d(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        if x.shape().len() != 4 || w.shape().len() != 4 {
            return dim_err(format!(
                "conv2d needs rank-4 input and weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            ));
        }
        if stride == 0 {
            return param_err("conv2d stride must be >= 1");
        }
        let (c_in, h_in, w_in) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return param_err(format!(
                "conv2d groups {groups} must divide Cin {c_in} and Cout {c_out}"
            ));
        }
        if w.shape()[1] != c_in / groups {
            return dim_err(format!(
                "conv2d weight {:?} expects Cin/groups = {}, input has Cin {}",
                w.shape(),
                w.shape()[1],
                c_in
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return dim_err(format!("conv2d bias shape {:?}, want [{c_out}]", b.shape()));
            }
        }
        if h_in + 2 * pad < kh || w_in + 2 * pad < kw {
            return dim_err(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h_in}x{w_in} (pad {pad})"
            ));
        }
        let h_out = (h_in + 2 * pad - kh) / stride + 1;
        let w_out = (w_in + 2 * pad - kw) / stride + 1;
        let d = Conv2dDims {
            batch: x.shape()[0],
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            h_out,
            w_out,
            stride,
            pad,
            groups,
        };
        let mut out = vec![T::zero(); d.batch * c_out * h_out * w_out];
        kernels::conv2d_forward(x.data(), w.data(), bias.map(|b| b.data()), &d, &mut out);
        let output = Tensor::from_op(vec![d.batch, c_out, h_out, w_out], out);
        let mut inputs = vec![x.clone(), w.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        self.record(inputs, output.clone(), Rule::Conv2d { stride, pad, groups });
        Ok(output)
    }

    /// Bilinear interpolation of `z` ([H, W, C]) at normalized points
    /// ([P, 2], column 0 = x, column 1 = y; (-1,-1) is the top-left corner,
    /// (+1,+1) the bottom-right). Out-of-range points attenuate to zero;
    /// adjoints are provided for both the map and the points.
    pub fn bilinear_sample(&self, z: &Tensor<T>, pts: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape().len() != 3 {
            return dim_err(format!("bilinear_sample map must be [H,W,C], got {:?}", z.shape()));
        }
        if pts.shape().len() != 2 || pts.shape()[1] != 2 {
            return dim_err(format!(
                "bilinear_sample points must be [P,2], got {:?}",
                pts.shape()
            ));
        }
        let (h, w, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let p = pts.shape()[0];
        let mut out = vec![T::zero(); p * c];
        for i in 0..p {
            let u = kernels::denormalize(pts.data()[2 * i], w);
            let v = kernels::denormalize(pts.data()[2 * i + 1], h);
            let x0 = u.floor();
            let y0 = v.floor();
            for dy in 0..2 {
                for dx in 0..2 {
                    let xx = x0 + T::from_usize(dx);
                    let yy = y0 + T::from_usize(dy);
                    let wgt = kernels::hat(u, xx) * kernels::hat(v, yy);
                    if wgt == T::zero() {
                        continue;
                    }
                    let xi = xx.as_f64();
                    let yi = yy.as_f64();
                    if xi < 0.0 || xi >= w as f64 || yi < 0.0 || yi >= h as f64 {
                        continue;
                    }
                    let (xi, yi) = (xi as usize, yi as usize);
                    let zrow = &z.data()[(yi * w + xi) * c..(yi * w + xi + 1) * c];
                    let orow = &mut out[i * c..(i + 1) * c];
                    for (o, &zv) in orow.iter_mut().zip(zrow) {
                        *o = *o + wgt * zv;
                    }
                }
            }
        }
        let output = Tensor::from_op(vec![p, c], out);
        self.record(vec![z.clone(), pts.clone()], output.clone(), Rule::BilinearSample);
        Ok(output)
    }

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return dim_err(format!("add shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let output = Tensor::from_op(a.shape().to_vec(), out);
        self.record(vec![a.clone(), b.clone()], output.clone(), Rule::Add);
        Ok(output)
    }

    /// `x + y` where `y`'s shape equals a suffix of `x`'s shape; `y` is tiled
    /// over the leading extents. Used for bias vectors and shared bias maps.
    pub fn add_broadcast0(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() < y.shape().len()
            || &x.shape()[x.shape().len() - y.shape().len()..] != y.shape()
        {
            return dim_err(format!(
                "add_broadcast0: {:?} cannot broadcast over {:?}",
                y.shape(),
                x.shape()
            ));
        }
        let chunk = y.numel().max(1);
        let mut out = x.data().to_vec();
        for blk in out.chunks_mut(chunk) {
            for (o, &yv) in blk.iter_mut().zip(y.data()) {
                *o = *o + yv;
            }
        }
        let output = Tensor::from_op(x.shape().to_vec(), out);
        self.record(vec![x.clone(), y.clone()], output.clone(), Rule::AddBroadcast0);
        Ok(output)
    }

    /// Adds a constant tensor (same shape); no gradient flows into `c`.
    pub fn add_const(&self, x: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != c.shape() {
            return dim_err(format!(
                "add_const shapes differ: {:?} vs {:?}",
                x.shape(),
                c.shape()
            ));
        }
        let out = x.data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let output = Tensor::from_op(x.shape().to_vec(), out);
        self.record(vec![x.clone(), c.clone()], output.clone(), Rule::AddConst);
        Ok(output)
    }

    pub fn scale(&self, x: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
        let out = x.data().iter().map(|&v| v * factor).collect();
        let output = Tensor::from_op(x.shape().to_vec(), out);
        self.record(vec![x.clone()], output.clone(), Rule::Scale { factor });
        Ok(output)
    }

    /// Per-column affine map with constant coefficients: for `x` shaped
    /// [..., D], `out[..., j] = x[..., j] * mul[j] + add[j]`.
    pub fn affine_cols(&self, x: &Tensor<T>, mul: &[T], add: &[T]) -> Result<Tensor<T>> {
        let cols = *x.shape().last().unwrap_or(&0);
        if cols == 0 || mul.len() != cols || add.len() != cols {
            return dim_err(format!(
                "affine_cols: x {:?} needs {} coefficients, got {}/{}",
                x.shape(),
                cols,
                mul.len(),
                add.len()
            ));
        }
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mul[i % cols] + add[i % cols])
            .collect();
        let output = Tensor::from_op(x.shape().to_vec(), out);
        self.record(
            vec![x.clone()],
            output.clone(),
            Rule::AffineCols { mul: mul.to_vec() },
        );
        Ok(output)
    }

    pub fn clamp(&self, x: &Tensor<T>, lo: T, hi: T) -> Result<Tensor<T>> {
        if lo > hi {
            return param_err(format!("clamp bounds reversed: {lo} > {hi}"));
        }
        let out = x
            .data()
            .iter()
            .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
            .collect();
        let output = Tensor::from_op(x.shape().to_vec(), out);
        self.record(vec![x.clone()], output.clone(), Rule::Clamp { lo, hi });
        Ok(output)
    }

    pub fn reshape(&self, x: &Tensor<T>, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return dim_err(format!(
                "reshape {:?} -> {:?} changes element count",
                x.shape(),
                shape
            ));
        }
        let output = Tensor::from_op(shape, x.data().to_vec());
        self.record(vec![x.clone()], output.clone(), Rule::Reshape);
        Ok(output)
    }

    /// Concatenates along the last extent; all leading extents must agree.
    pub fn concat_last(&self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if xs.is_empty() {
            return dim_err("concat_last of zero tensors");
        }
        let lead = &xs[0].shape()[..xs[0].shape().len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for x in xs {
            if &x.shape()[..x.shape().len() - 1] != lead {
                return dim_err(format!(
                    "concat_last leading extents differ: {:?} vs {:?}",
                    xs[0].shape(),
                    x.shape()
                ));
            }
            widths.push(*x.shape().last().expect("rank >= 1"));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * total];
        let mut start = 0;
        for (x, &wd) in xs.iter().zip(&widths) {
            for r in 0..rows {
                out[r * total + start..r * total + start + wd]
                    .copy_from_slice(&x.data()[r * wd..(r + 1) * wd]);
            }
            start += wd;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let output = Tensor::from_op(shape, out);
        self.record(
            xs.iter().map(|x| (*x).clone()).collect(),
            output.clone(),
            Rule::ConcatLast { widths },
        );
        Ok(output)
    }

    /// Concatenates along the first extent; trailing extents must agree.
    pub fn concat0(&self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if xs.is_empty() {
            return dim_err("concat0 of zero tensors");
        }
        let tail = &xs[0].shape()[1..];
        let mut lens = Vec::with_capacity(xs.len());
        let mut first = 0;
        for x in xs {
            if &x.shape()[1..] != tail {
                return dim_err(format!(
                    "concat0 trailing extents differ: {:?} vs {:?}",
                    xs[0].shape(),
                    x.shape()
                ));
            }
            lens.push(x.numel());
            first += x.shape()[0];
        }
        let mut out = Vec::with_capacity(lens.iter().sum());
        for x in xs {
            out.extend_from_slice(x.data());
        }
        let mut shape = vec![first];
        shape.extend_from_slice(tail);
        let output = Tensor::from_op(shape, out);
        self.record(
            xs.iter().map(|x| (*x).clone()).collect(),
            output.clone(),
            Rule::Concat0 { lens },
        );
        Ok(output)
    }

    /// Selects `width` consecutive entries of the last extent.
    pub fn slice_cols(&self, x: &Tensor<T>, start: usize, width: usize) -> Result<Tensor<T>> {
        let total = *x.shape().last().unwrap_or(&0);
        if start + width > total || width == 0 {
            return dim_err(format!(
                "slice_cols [{start}, {start}+{width}) out of {:?}",
                x.shape()
            ));
        }
        let rows = x.numel() / total;
        let mut out = vec![T::zero(); rows * width];
        for r in 0..rows {
            out[r * width..(r + 1) * width]
                .copy_from_slice(&x.data()[r * total + start..r * total + start + width]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = width;
        let output = Tensor::from_op(shape, out);
        self.record(vec![x.clone()], output.clone(), Rule::SliceCols { start, width });
        Ok(output)
    }

    /// Gathers rows (first extent) by index; repeats allowed. The adjoint
    /// scatter-adds back into the source rows.
    pub fn index_select_rows(&self, x: &Tensor<T>, indices: Arc<Vec<usize>>) -> Result<Tensor<T>> {
        let n = x.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return dim_err("index_select_rows on empty tensor");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return dim_err(format!("index {bad} out of {n} rows"));
        }
        let row = x.numel() / n;
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices.iter() {
            out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let output = Tensor::from_op(shape, out);
        self.record(
            vec![x.clone()],
            output.clone(),
            Rule::IndexSelectRows { indices },
        );
        Ok(output)
    }

    /// [..., N, C] -> [..., M, N, C/M]: exposes the per-head layout.
    pub fn split_heads(&self, x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
        let rank = x.shape().len();
        if rank < 2 {
            return dim_err(format!("split_heads needs rank >= 2, got {:?}", x.shape()));
        }
        let c = x.shape()[rank - 1];
        let n = x.shape()[rank - 2];
        if heads == 0 || c % heads != 0 {
            return param_err(format!("split_heads: {heads} heads do not divide {c} channels"));
        }
        let d = c / heads;
        let lead: usize = x.shape()[..rank - 2].iter().product();
        let mut out = vec![T::zero(); x.numel()];
        for l in 0..lead {
            for h in 0..heads {
                for i in 0..n {
                    for j in 0..d {
                        out[((l * heads + h) * n + i) * d + j] = x.data()[(l * n + i) * c + h * d + j];
                    }
                }
            }
        }
        let mut shape = x.shape()[..rank - 2].to_vec();
        shape.extend([heads, n, d]);
        let output = Tensor::from_op(shape, out);
        self.record(vec![x.clone()], output.clone(), Rule::SplitHeads { heads });
        Ok(output)
    }

    /// [..., M, N, D] -> [..., N, M·D]: concatenates heads back.
    pub fn merge_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let rank = x.shape().len();
        if rank < 3 {
            return dim_err(format!("merge_heads needs rank >= 3, got {:?}", x.shape()));
        }
        let d = x.shape()[rank - 1];
        let n = x.shape()[rank - 2];
        let heads = x.shape()[rank - 3];
        let lead: usize = x.shape()[..rank - 3].iter().product();
        let c = heads * d;
        let mut out = vec![T::zero(); x.numel()];
        for l in 0..lead {
            for h in 0..heads {
                for i in 0..n {
                    for j in 0..d {
                        out[(l * n + i) * c + h * d + j] = x.data()[((l * heads + h) * n + i) * d + j];
                    }
                }
            }
        }
        let mut shape = x.shape()[..rank - 3].to_vec();
        shape.extend([n, c]);
        let output = Tensor::from_op(shape, out);
        self.record(vec![x.clone()], output.clone(), Rule::MergeHeads);
        Ok(output)
    }

    /// Token matrix [H·W, C] -> image layout [1, C, H, W].
    pub fn tokens_to_chw(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.shape()[0] != h * w {
            return dim_err(format!(
                "tokens_to_chw: {:?} does not match {h}x{w} tokens",
                x.shape()
            ));
        }
        let c = x.shape()[1];
        let mut out = vec![T::zero(); x.numel()];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * h + y) * w + xx] = x.data()[(y * w + xx) * c + ch];
                }
            }
        }
        let output = Tensor::from_op(vec![1, c, h, w], out);
        self.record(vec![x.clone()], output.clone(), Rule::TokensToChw { h, w });
        Ok(output)
    }

    /// Image layout [1, C, H, W] -> token matrix [H·W, C].
    pub fn chw_to_tokens(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 4 || x.shape()[0] != 1 {
            return dim_err(format!("chw_to_tokens expects [1,C,H,W], got {:?}", x.shape()));
        }
        let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut out = vec![T::zero(); x.numel()];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(y * w + xx) * c + ch] = x.data()[(ch * h + y) * w + xx];
                }
            }
        }
        let output = Tensor::from_op(vec![h * w, c], out);
        self.record(vec![x.clone()], output.clone(), Rule::ChwToTokens);
        Ok(output)
    }

    pub fn sum_all(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in x.data() {
            acc = acc + v;
        }
        let output = Tensor::from_op(vec![1], vec![acc]);
        self.record(vec![x.clone()], output.clone(), Rule::SumAll);
        Ok(output)
    }

    /// Mean over the first extent: [N, ...] -> [...].
    pub fn mean_axis0(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return dim_err("mean_axis0 over empty extent");
        }
        let row = x.numel() / n;
        let inv = T::one() / T::from_usize(n);
        let mut out = vec![T::zero(); row];
        for chunk in x.data().chunks(row) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = *o + v;
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let output = Tensor::from_op(x.shape()[1..].to_vec(), out);
        self.record(vec![x.clone()], output.clone(), Rule::MeanAxis0);
        Ok(output)
    }

    /// Scalar `sum(x .* w)` with constant weights; no gradient into `w`.
    pub fn weighted_sum(&self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != w.shape() {
            return dim_err(format!(
                "weighted_sum shapes differ: {:?} vs {:?}",
                x.shape(),
                w.shape()
            ));
        }
        let mut acc = T::zero();
        for (&a, &b) in x.data().iter().zip(w.data()) {
            acc = acc + a * b;
        }
        let output = Tensor::from_op(vec![1], vec![acc]);
        self.record(vec![x.clone(), w.clone()], output.clone(), Rule::WeightedSum);
        Ok(output)
    }

    /// Cross-entropy of a single logit vector against a class index,
    /// computed through a stable log-sum-exp.
    pub fn cross_entropy(&self, logits: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
        if logits.shape().len() != 1 {
            return dim_err(format!("cross_entropy expects [K], got {:?}", logits.shape()));
        }
        let k = logits.numel();
        if target >= k {
            return param_err(format!("cross_entropy target {target} out of {k} classes"));
        }
        let data = logits.data();
        let mut max = data[0];
        for &v in data {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in data {
            sum = sum + (v - max).exp();
        }
        let loss = max + sum.ln() - data[target];
        let output = Tensor::from_op(vec![1], vec![loss]);
        self.record(vec![logits.clone()], output.clone(), Rule::CrossEntropy { target });
        Ok(output)
    }

    /// Halved pairwise displacement (q[i] - p[j]) / 2 between constant query
    /// positions [Q, 2] and differentiable points [P, 2], flattened to
    /// [Q·P, 2]. Gradients flow into the points only.
    pub fn pairwise_disp(&self, qpos: &Tensor<T>, pts: &Tensor<T>) -> Result<Tensor<T>> {
        if qpos.shape().len() != 2
            || qpos.shape()[1] != 2
            || pts.shape().len() != 2
            || pts.shape()[1] != 2
        {
            return dim_err(format!(
                "pairwise_disp expects [Q,2] and [P,2], got {:?} and {:?}",
                qpos.shape(),
                pts.shape()
            ));
        }
        let q = qpos.shape()[0];
        let p = pts.shape()[0];
        let half = T::from_f64(0.5);
        let mut out = vec![T::zero(); q * p * 2];
        for i in 0..q {
            for j in 0..p {
                for ax in 0..2 {
                    out[(i * p + j) * 2 + ax] =
                        (qpos.data()[i * 2 + ax] - pts.data()[j * 2 + ax]) * half;
                }
            }
        }
        let output = Tensor::from_op(vec![q * p, 2], out);
        self.record(
            vec![qpos.clone(), pts.clone()],
            output.clone(),
            Rule::PairwiseDisp,
        );
        Ok(output)
    }
}
