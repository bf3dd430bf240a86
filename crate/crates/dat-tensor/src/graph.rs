//! Recorded computation graph and reverse-mode differentiation.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::kernels::{self, Conv2dDims};
use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};

/// One recorded operation: input references, output reference, adjoint rule.
pub(crate) struct Node<T: Scalar> {
    pub inputs: Vec<Tensor<T>>,
    pub output: Tensor<T>,
    pub rule: Rule<T>,
    /// Which inputs can transitively reach a differentiable leaf.
    pub needs: Vec<bool>,
}

/// Adjoint rule of a node. Rules recompute whatever they need from the
/// recorded input/output tensors rather than storing extra state.
pub(crate) enum Rule<T: Scalar> {
    Matmul,
    TransposeLast2,
    SoftmaxLastDim,
    LayerNorm { eps: T },
    Gelu,
    Tanh,
    Conv2d { stride: usize, pad: usize, groups: usize },
    BilinearSample,
    Add,
    AddBroadcast0,
    AddConst,
    Scale { factor: T },
    AffineCols { mul: Vec<T> },
    Clamp { lo: T, hi: T },
    Reshape,
    ConcatLast { widths: Vec<usize> },
    Concat0 { lens: Vec<usize> },
    SliceCols { start: usize, width: usize },
    IndexSelectRows { indices: Arc<Vec<usize>> },
    SplitHeads { heads: usize },
    MergeHeads,
    TokensToChw { h: usize, w: usize },
    ChwToTokens,
    SumAll,
    MeanAxis0,
    WeightedSum,
    CrossEntropy { target: usize },
    PairwiseDisp,
}

/// Tape of operations recorded in execution order.
///
/// Every op method on `Graph` evaluates eagerly and appends a node, so the
/// list is topologically ordered by construction: inputs of node `i` are
/// leaves or outputs of nodes `j < i`.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    produced: RefCell<HashSet<u64>>,
    relevant: RefCell<HashSet<u64>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            produced: RefCell::new(HashSet::new()),
            relevant: RefCell::new(HashSet::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn record(&self, inputs: Vec<Tensor<T>>, output: Tensor<T>, rule: Rule<T>) {
        let relevant = self.relevant.borrow();
        let needs: Vec<bool> = inputs
            .iter()
            .map(|t| t.requires_grad() || relevant.contains(&t.id()))
            .collect();
        drop(relevant);
        if needs.iter().any(|&n| n) {
            self.relevant.borrow_mut().insert(output.id());
        }
        self.produced.borrow_mut().insert(output.id());
        self.nodes.borrow_mut().push(Node {
            inputs,
            output,
            rule,
            needs,
        });
    }

    /// Shape of the most recently recorded output.
    pub fn final_output(&self) -> Option<Tensor<T>> {
        self.nodes.borrow().last().map(|n| n.output.clone())
    }

    /// Propagates `seed` as dLoss/dOutput of the final recorded node and
    /// accumulates gradients into every reachable `requires_grad` leaf.
    /// Repeated calls accumulate further; call `clear_grad` on leaves to
    /// reset between passes.
    pub fn backward(&self, seed: &Tensor<T>) -> Result<()> {
        let output = match self.final_output() {
            Some(t) => t,
            None => return dim_err("backward on an empty graph"),
        };
        self.backward_from(&output, seed)
    }

    /// Like [`Graph::backward`], but seeds an arbitrary recorded tensor.
    pub fn backward_from(&self, output: &Tensor<T>, seed: &Tensor<T>) -> Result<()> {
        if seed.shape() != output.shape() {
            return dim_err(format!(
                "backward seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                output.shape()
            ));
        }
        let nodes = self.nodes.borrow();
        let produced = self.produced.borrow();
        let mut adjoint: HashMap<u64, Vec<T>> = HashMap::new();
        let mut handles: HashMap<u64, Tensor<T>> = HashMap::new();
        adjoint.insert(output.id(), seed.data().to_vec());
        handles.insert(output.id(), output.clone());

        for node in nodes.iter().rev() {
            let dout = match adjoint.get(&node.output.id()) {
                Some(d) => d.clone(),
                None => continue,
            };
            let dins = node.rule.adjoints(&node.inputs, &node.output, &dout, &node.needs)?;
            for (input, din) in node.inputs.iter().zip(dins) {
                if let Some(d) = din {
                    handles.entry(input.id()).or_insert_with(|| input.clone());
                    match adjoint.get_mut(&input.id()) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&d) {
                                *a = *a + *v;
                            }
                        }
                        None => {
                            adjoint.insert(input.id(), d);
                        }
                    }
                }
            }
        }

        for (id, grad) in adjoint {
            if produced.contains(&id) {
                continue;
            }
            if let Some(t) = handles.get(&id) {
                if t.requires_grad() {
                    t.accumulate_grad(&grad);
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Rule<T> {
    #[allow(clippy::too_many_lines)]
    fn adjoints(
        &self,
        inputs: &[Tensor<T>],
        output: &Tensor<T>,
        dout: &[T],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<T>>>> {
        let zero_like = |t: &Tensor<T>| vec![T::zero(); t.numel()];
        Ok(match self {
            Rule::Matmul => {
                let a = &inputs[0];
                let b = &inputs[1];
                let (ab, m, k) = split_matrix_shape(a.shape());
                let (bb, _, n) = split_matrix_shape(b.shape());
                let ob = broadcast_shape(&ab, &bb).expect("validated at record time");
                let batch: usize = ob.iter().product();
                let mut da = if needs[0] { Some(zero_like(a)) } else { None };
                let mut db = if needs[1] { Some(zero_like(b)) } else { None };
                for bi in 0..batch {
                    let ai = broadcast_offset(bi, &ob, &ab);
                    let bi_ = broadcast_offset(bi, &ob, &bb);
                    let a_blk = &a.data()[ai * m * k..(ai + 1) * m * k];
                    let b_blk = &b.data()[bi_ * k * n..(bi_ + 1) * k * n];
                    let d_blk = &dout[bi * m * n..(bi + 1) * m * n];
                    if let Some(da) = da.as_deref_mut() {
                        kernels::mm_nt(d_blk, b_blk, m, n, k, &mut da[ai * m * k..(ai + 1) * m * k]);
                    }
                    if let Some(db) = db.as_deref_mut() {
                        kernels::mm_tn(a_blk, d_blk, k, m, n, &mut db[bi_ * k * n..(bi_ + 1) * k * n]);
                    }
                }
                vec![da, db]
            }
            Rule::TransposeLast2 => {
                let x = &inputs[0];
                let mut dx = zero_like(x);
                // dout has the transposed shape; transpose it back.
                transpose_last2_into(dout, output.shape(), &mut dx);
                vec![Some(dx)]
            }
            Rule::SoftmaxLastDim => {
                let row = *output.shape().last().expect("rank >= 1");
                let mut dx = vec![T::zero(); output.numel()];
                kernels::softmax_rows_adjoint(output.data(), dout, row, &mut dx);
                vec![Some(dx)]
            }
            Rule::LayerNorm { eps } => {
                let x = &inputs[0];
                let gamma = &inputs[1];
                let row = *x.shape().last().expect("rank >= 1");
                let stats = kernels::layer_norm_stats(x.data(), row, *eps);
                let n = T::from_usize(row);
                let mut dx = if needs[0] { Some(zero_like(x)) } else { None };
                let mut dgamma = if needs[1] { Some(zero_like(gamma)) } else { None };
                let mut dbeta = if needs[2] { Some(zero_like(&inputs[2])) } else { None };
                for (r, (xr, dyr)) in x.data().chunks(row).zip(dout.chunks(row)).enumerate() {
                    let mu = stats.mean[r];
                    let inv = stats.inv_std[r];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..row {
                        let xhat = (xr[j] - mu) * inv;
                        let gdy = dyr[j] * gamma.data()[j];
                        m1 = m1 + gdy;
                        m2 = m2 + gdy * xhat;
                        if let Some(dg) = dgamma.as_deref_mut() {
                            dg[j] = dg[j] + dyr[j] * xhat;
                        }
                        if let Some(db) = dbeta.as_deref_mut() {
                            db[j] = db[j] + dyr[j];
                        }
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    if let Some(dx) = dx.as_deref_mut() {
                        let dxr = &mut dx[r * row..(r + 1) * row];
                        for j in 0..row {
                            let xhat = (xr[j] - mu) * inv;
                            let gdy = dyr[j] * gamma.data()[j];
                            dxr[j] = inv * (gdy - m1 - xhat * m2);
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }
            Rule::Gelu => {
                let x = &inputs[0];
                let dx = x
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(&v, &d)| kernels::gelu_derivative(v) * d)
                    .collect();
                vec![Some(dx)]
            }
            Rule::Tanh => {
                let dx = output
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(&y, &d)| (T::one() - y * y) * d)
                    .collect();
                vec![Some(dx)]
            }
            Rule::Conv2d { stride, pad, groups } => {
                let x = &inputs[0];
                let w = &inputs[1];
                let has_bias = inputs.len() == 3;
                let d = conv_dims(x.shape(), w.shape(), output.shape(), *stride, *pad, *groups);
                let mut dx = if needs[0] { Some(zero_like(x)) } else { None };
                let mut dw = if needs[1] { Some(zero_like(w)) } else { None };
                let mut dbias = if has_bias && needs[2] {
                    Some(zero_like(&inputs[2]))
                } else {
                    None
                };
                kernels::conv2d_adjoint(
                    x.data(),
                    w.data(),
                    dout,
                    &d,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    dbias.as_deref_mut(),
                );
                if has_bias {
                    vec![dx, dw, dbias]
                } else {
                    vec![dx, dw]
                }
            }
            Rule::BilinearSample => {
                let z = &inputs[0];
                let pts = &inputs[1];
                let (h, w, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
                let p = pts.shape()[0];
                let mut dz = if needs[0] { Some(zero_like(z)) } else { None };
                let mut dpts = if needs[1] { Some(zero_like(pts)) } else { None };
                let half = T::from_f64(0.5);
                let sx = half * T::from_usize(w - 1);
                let sy = half * T::from_usize(h - 1);
                for i in 0..p {
                    let u = kernels::denormalize(pts.data()[2 * i], w);
                    let v = kernels::denormalize(pts.data()[2 * i + 1], h);
                    let x0 = u.floor();
                    let y0 = v.floor();
                    let drow = &dout[i * c..(i + 1) * c];
                    let mut du = T::zero();
                    let mut dv = T::zero();
                    for dy in 0..2 {
                        for dx_ in 0..2 {
                            let xx = x0 + T::from_usize(dx_);
                            let yy = y0 + T::from_usize(dy);
                            let wx = kernels::hat(u, xx);
                            let wy = kernels::hat(v, yy);
                            let xi = xx.as_f64();
                            let yi = yy.as_f64();
                            if xi < 0.0 || xi >= w as f64 || yi < 0.0 || yi >= h as f64 {
                                continue;
                            }
                            let (xi, yi) = (xi as usize, yi as usize);
                            let zrow = &z.data()[(yi * w + xi) * c..(yi * w + xi + 1) * c];
                            let mut dot = T::zero();
                            for (zv, dv_) in zrow.iter().zip(drow) {
                                dot = dot + *zv * *dv_;
                            }
                            if let Some(dz) = dz.as_deref_mut() {
                                let drow_z = &mut dz[(yi * w + xi) * c..(yi * w + xi + 1) * c];
                                for (dzv, dv_) in drow_z.iter_mut().zip(drow) {
                                    *dzv = *dzv + wx * wy * *dv_;
                                }
                            }
                            // d hat(u, xx)/du = -sign(u - xx) on the open support.
                            if wx > T::zero() && u != xx {
                                let s = if u > xx { -T::one() } else { T::one() };
                                du = du + s * wy * dot;
                            }
                            if wy > T::zero() && v != yy {
                                let s = if v > yy { -T::one() } else { T::one() };
                                dv = dv + s * wx * dot;
                            }
                        }
                    }
                    if let Some(dp) = dpts.as_deref_mut() {
                        dp[2 * i] = du * sx;
                        dp[2 * i + 1] = dv * sy;
                    }
                }
                vec![dz, dpts]
            }
            Rule::Add => vec![Some(dout.to_vec()), Some(dout.to_vec())],
            Rule::AddBroadcast0 => {
                let y = &inputs[1];
                let chunk = y.numel();
                let dy = if needs[1] {
                    let mut acc = vec![T::zero(); chunk];
                    for blk in dout.chunks(chunk) {
                        for (a, v) in acc.iter_mut().zip(blk) {
                            *a = *a + *v;
                        }
                    }
                    Some(acc)
                } else {
                    None
                };
                vec![Some(dout.to_vec()), dy]
            }
            Rule::AddConst => vec![Some(dout.to_vec()), None],
            Rule::Scale { factor } => {
                vec![Some(dout.iter().map(|&d| d * *factor).collect())]
            }
            Rule::AffineCols { mul, .. } => {
                let cols = mul.len();
                let dx = dout
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| d * mul[i % cols])
                    .collect();
                vec![Some(dx)]
            }
            Rule::Clamp { lo, hi } => {
                let dx = inputs[0]
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(&x, &d)| if x >= *lo && x <= *hi { d } else { T::zero() })
                    .collect();
                vec![Some(dx)]
            }
            Rule::Reshape => vec![Some(dout.to_vec())],
            Rule::ConcatLast { widths } => {
                let total: usize = widths.iter().sum();
                let rows = output.numel() / total;
                let mut outs = Vec::with_capacity(widths.len());
                let mut start = 0;
                for (idx, &wd) in widths.iter().enumerate() {
                    if needs[idx] {
                        let mut dx = vec![T::zero(); rows * wd];
                        for r in 0..rows {
                            dx[r * wd..(r + 1) * wd]
                                .copy_from_slice(&dout[r * total + start..r * total + start + wd]);
                        }
                        outs.push(Some(dx));
                    } else {
                        outs.push(None);
                    }
                    start += wd;
                }
                outs
            }
            Rule::Concat0 { lens } => {
                let mut outs = Vec::with_capacity(lens.len());
                let mut start = 0;
                for (idx, &l) in lens.iter().enumerate() {
                    outs.push(if needs[idx] {
                        Some(dout[start..start + l].to_vec())
                    } else {
                        None
                    });
                    start += l;
                }
                outs
            }
            Rule::SliceCols { start, width } => {
                let x = &inputs[0];
                let total = *x.shape().last().expect("rank >= 1");
                let rows = x.numel() / total;
                let mut dx = zero_like(x);
                for r in 0..rows {
                    dx[r * total + start..r * total + start + width]
                        .copy_from_slice(&dout[r * width..(r + 1) * width]);
                }
                vec![Some(dx)]
            }
            Rule::IndexSelectRows { indices } => {
                let x = &inputs[0];
                let row = x.numel() / x.shape()[0];
                let mut dx = zero_like(x);
                for (k, &src) in indices.iter().enumerate() {
                    let drow = &dout[k * row..(k + 1) * row];
                    let xrow = &mut dx[src * row..(src + 1) * row];
                    for (a, v) in xrow.iter_mut().zip(drow) {
                        *a = *a + *v;
                    }
                }
                vec![Some(dx)]
            }
            Rule::SplitHeads { heads } => {
                let x = &inputs[0];
                let rank = x.shape().len();
                let c = x.shape()[rank - 1];
                let n = x.shape()[rank - 2];
                let d = c / heads;
                let lead: usize = x.shape()[..rank - 2].iter().product();
                let mut dx = zero_like(x);
                // dout layout: [lead, heads, n, d]
                for l in 0..lead {
                    for hh in 0..*heads {
                        for i in 0..n {
                            for j in 0..d {
                                dx[(l * n + i) * c + hh * d + j] =
                                    dout[((l * heads + hh) * n + i) * d + j];
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }
            Rule::MergeHeads => {
                let x = &inputs[0];
                let rank = x.shape().len();
                let d = x.shape()[rank - 1];
                let n = x.shape()[rank - 2];
                let heads = x.shape()[rank - 3];
                let lead: usize = x.shape()[..rank - 3].iter().product();
                let c = heads * d;
                let mut dx = zero_like(x);
                for l in 0..lead {
                    for hh in 0..heads {
                        for i in 0..n {
                            for j in 0..d {
                                dx[((l * heads + hh) * n + i) * d + j] =
                                    dout[(l * n + i) * c + hh * d + j];
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }
            Rule::TokensToChw { h, w } => {
                let x = &inputs[0];
                let c = *x.shape().last().expect("rank 2");
                let mut dx = zero_like(x);
                for ch in 0..c {
                    for y in 0..*h {
                        for xx in 0..*w {
                            dx[(y * w + xx) * c + ch] = dout[(ch * h + y) * w + xx];
                        }
                    }
                }
                vec![Some(dx)]
            }
            Rule::ChwToTokens => {
                let x = &inputs[0];
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let mut dx = zero_like(x);
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[(ch * h + y) * w + xx] = dout[(y * w + xx) * c + ch];
                        }
                    }
                }
                vec![Some(dx)]
            }
            Rule::SumAll => {
                let x = &inputs[0];
                vec![Some(vec![dout[0]; x.numel()])]
            }
            Rule::MeanAxis0 => {
                let x = &inputs[0];
                let n = x.shape()[0];
                let row = x.numel() / n;
                let inv = T::one() / T::from_usize(n);
                let mut dx = zero_like(x);
                for r in 0..n {
                    for j in 0..row {
                        dx[r * row + j] = dout[j] * inv;
                    }
                }
                vec![Some(dx)]
            }
            Rule::WeightedSum => {
                let wts = &inputs[1];
                let dx = wts.data().iter().map(|&w| w * dout[0]).collect();
                vec![Some(dx), None]
            }
            Rule::CrossEntropy { target } => {
                let logits = &inputs[0];
                let k = logits.numel();
                let mut probs = vec![T::zero(); k];
                kernels::softmax_rows(logits.data(), k, &mut probs);
                let mut dx = probs;
                dx[*target] = dx[*target] - T::one();
                for v in dx.iter_mut() {
                    *v = *v * dout[0];
                }
                vec![Some(dx)]
            }
            Rule::PairwiseDisp => {
                let q = &inputs[0];
                let pts = &inputs[1];
                let qn = q.shape()[0];
                let pn = pts.shape()[0];
                let half = T::from_f64(0.5);
                let dpts = if needs[1] {
                    let mut d = zero_like(pts);
                    for i in 0..qn {
                        for j in 0..pn {
                            for ax in 0..2 {
                                d[j * 2 + ax] = d[j * 2 + ax] - half * dout[(i * pn + j) * 2 + ax];
                            }
                        }
                    }
                    Some(d)
                } else {
                    None
                };
                vec![None, dpts]
            }
        })
    }
}

pub(crate) fn split_matrix_shape(shape: &[usize]) -> (Vec<usize>, usize, usize) {
    let rank = shape.len();
    (
        shape[..rank - 2].to_vec(),
        shape[rank - 2],
        shape[rank - 1],
    )
}

/// Numpy-style broadcast of two batch shapes (aligned right).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let av = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let bv = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if av == bv {
            av
        } else if av == 1 {
            bv
        } else if bv == 1 {
            av
        } else {
            return None;
        };
    }
    Some(out)
}

/// Maps a flat index in the broadcast batch shape onto a flat index in a
/// (possibly lower-rank or size-1) operand batch shape.
pub(crate) fn broadcast_offset(flat: usize, out_shape: &[usize], in_shape: &[usize]) -> usize {
    if in_shape.is_empty() {
        return 0;
    }
    let out_strides = strides(out_shape);
    let in_strides = strides(in_shape);
    let offset = out_shape.len() - in_shape.len();
    let mut acc = 0;
    for (i, (&dim, &st)) in out_shape.iter().zip(&out_strides).enumerate() {
        let idx = (flat / st) % dim;
        if i >= offset && in_shape[i - offset] != 1 {
            acc += idx * in_strides[i - offset];
        }
    }
    acc
}

pub(crate) fn transpose_last2_into<T: Scalar>(src: &[T], src_shape: &[usize], dst: &mut [T]) {
    let rank = src_shape.len();
    let rows = src_shape[rank - 2];
    let cols = src_shape[rank - 1];
    let batch: usize = src_shape[..rank - 2].iter().product();
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                dst[base + j * rows + i] = src[base + i * cols + j];
            }
        }
    }
}

pub(crate) fn conv_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    out_shape: &[usize],
    stride: usize,
    pad: usize,
    groups: usize,
) -> Conv2dDims {
    Conv2dDims {
        batch: x_shape[0],
        c_in: x_shape[1],
        h_in: x_shape[2],
        w_in: x_shape[3],
        c_out: w_shape[0],
        kh: w_shape[2],
        kw: w_shape[3],
        h_out: out_shape[2],
        w_out: out_shape[3],
        stride,
        pad,
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::param(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn backward_sum_gives_ones() {
        let g = Graph::new();
        let x = p(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, 3.0]);
        let s = g.sum_all(&x).unwrap();
        g.backward_from(&s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_matmul_matches_transpose_rule() {
        // loss = sum(A·B) -> dA = 1·Bᵀ pattern, dB = Aᵀ·1
        let g = Graph::new();
        let a = p(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = p(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let prod = g.matmul(&a, &b).unwrap();
        let s = g.sum_all(&prod).unwrap();
        g.backward_from(&s, &Tensor::scalar(1.0)).unwrap();
        // dA[i, p] = sum_j B[p, j]
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        // dB[p, j] = sum_i A[i, p]
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_without_clear() {
        let g = Graph::new();
        let x = p(&[3], &[1.0, 2.0, 3.0]);
        let s = g.sum_all(&x).unwrap();
        g.backward_from(&s, &Tensor::scalar(1.0)).unwrap();
        g.backward_from(&s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
        x.clear_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_fanout_sums_both_paths() {
        // y feeds two consumers; d(sum(y+y))/dy = 2
        let g = Graph::new();
        let x = p(&[2], &[0.7, -0.3]);
        let y = g.scale(&x, 3.0).unwrap();
        let z = g.add(&y, &y).unwrap();
        let s = g.sum_all(&z).unwrap();
        g.backward_from(&s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
    }

    #[test]
    fn backward_seed_shape_checked() {
        let g = Graph::new();
        let x = p(&[2], &[1.0, 2.0]);
        let _ = g.sum_all(&x).unwrap();
        let bad = t(&[2], &[1.0, 1.0]);
        assert!(matches!(g.backward(&bad), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn backward_final_node_is_default_seed_target() {
        let g = Graph::new();
        let x = p(&[2], &[2.0, 5.0]);
        let y = g.scale(&x, 2.0).unwrap();
        let _s = g.sum_all(&y).unwrap();
        g.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn index_select_adjoint_accumulates_repeats() {
        let g = Graph::new();
        let x = p(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let sel = g
            .index_select_rows(&x, Arc::new(vec![0, 0, 2]))
            .unwrap();
        let s = g.sum_all(&sel).unwrap();
        g.backward_from(&s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
