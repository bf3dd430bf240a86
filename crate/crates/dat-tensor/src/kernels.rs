//! Pure computational kernels shared by forward evaluation and adjoints.

use crate::scalar::Scalar;

/// c += a[m,k] * b[k,n]
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// c += a[m,k] * b[n,k]^T
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// c += a[k,m]^T * b[k,n]
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

pub fn softmax_rows<T: Scalar>(x: &[T], row: usize, out: &mut [T]) {
    debug_assert!(row > 0);
    for (xr, or) in x.chunks(row).zip(out.chunks_mut(row)) {
        let mut max = xr[0];
        for &v in xr.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for o in or.iter_mut() {
            *o = *o * inv;
        }
    }
}

/// dx = y .* (dy - sum(y .* dy)) per row, given softmax output y.
pub fn softmax_rows_adjoint<T: Scalar>(y: &[T], dy: &[T], row: usize, dx: &mut [T]) {
    for ((yr, dyr), dxr) in y
        .chunks(row)
        .zip(dy.chunks(row))
        .zip(dx.chunks_mut(row))
    {
        let mut dot = T::zero();
        for (yv, dv) in yr.iter().zip(dyr) {
            dot = dot + *yv * *dv;
        }
        for ((dx, yv), dv) in dxr.iter_mut().zip(yr).zip(dyr) {
            *dx = *yv * (*dv - dot);
        }
    }
}

pub struct LayerNormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm_stats<T: Scalar>(x: &[T], row: usize, eps: T) -> LayerNormStats<T> {
    let rows = x.len() / row;
    let mut mean = Vec::with_capacity(rows);
    let mut inv_std = Vec::with_capacity(rows);
    let n = T::from_usize(row);
    for xr in x.chunks(row) {
        let mut mu = T::zero();
        for &v in xr {
            mu = mu + v;
        }
        mu = mu / n;
        let mut var = T::zero();
        for &v in xr {
            let d = v - mu;
            var = var + d * d;
        }
        var = var / n;
        mean.push(mu);
        inv_std.push(T::one() / (var + eps).sqrt());
    }
    LayerNormStats { mean, inv_std }
}

pub fn gelu_value<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}

/// Hat weight of Eq-style bilinear interpolation: max(0, 1 - |a - b|).
pub fn hat<T: Scalar>(a: T, b: T) -> T {
    let w = T::one() - (a - b).abs();
    if w > T::zero() {
        w
    } else {
        T::zero()
    }
}

/// Normalized coordinate -> continuous pixel coordinate, corner-aligned:
/// -1 maps to 0 and +1 maps to size-1. A single-pixel axis collapses to 0.
pub fn denormalize<T: Scalar>(coord: T, size: usize) -> T {
    let half = T::from_f64(0.5);
    (coord + T::one()) * half * T::from_usize(size - 1)
}

pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &Conv2dDims,
    out: &mut [T],
) {
    let cg_in = d.c_in / d.groups;
    let cg_out = d.c_out / d.groups;
    for b in 0..d.batch {
        for oc in 0..d.c_out {
            let group = oc / cg_out;
            let bias_v = bias.map_or(T::zero(), |bv| bv[oc]);
            for oy in 0..d.h_out {
                for ox in 0..d.w_out {
                    let mut acc = bias_v;
                    for ic in 0..cg_in {
                        let xc = group * cg_in + ic;
                        let xbase = ((b * d.c_in + xc) * d.h_in) * d.w_in;
                        let wbase = ((oc * cg_in + ic) * d.kh) * d.kw;
                        for ky in 0..d.kh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h_in as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w_in as isize {
                                    continue;
                                }
                                let xv = x[xbase + iy as usize * d.w_in + ix as usize];
                                acc = acc + xv * w[wbase + ky * d.kw + kx];
                            }
                        }
                    }
                    out[((b * d.c_out + oc) * d.h_out + oy) * d.w_out + ox] = acc;
                }
            }
        }
    }
}

pub fn conv2d_adjoint<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    d: &Conv2dDims,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let cg_in = d.c_in / d.groups;
    let cg_out = d.c_out / d.groups;
    let mut dx_buf = dx;
    let mut dw_buf = dw;
    let mut dbias_buf = dbias;
    for b in 0..d.batch {
        for oc in 0..d.c_out {
            let group = oc / cg_out;
            for oy in 0..d.h_out {
                for ox in 0..d.w_out {
                    let g = dout[((b * d.c_out + oc) * d.h_out + oy) * d.w_out + ox];
                    if g == T::zero() {
                        continue;
                    }
                    if let Some(db) = dbias_buf.as_deref_mut() {
                        db[oc] = db[oc] + g;
                    }
                    for ic in 0..cg_in {
                        let xc = group * cg_in + ic;
                        let xbase = ((b * d.c_in + xc) * d.h_in) * d.w_in;
                        let wbase = ((oc * cg_in + ic) * d.kh) * d.kw;
                        for ky in 0..d.kh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h_in as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w_in as isize {
                                    continue;
                                }
                                let xi = xbase + iy as usize * d.w_in + ix as usize;
                                let wi = wbase + ky * d.kw + kx;
                                if let Some(dxv) = dx_buf.as_deref_mut() {
                                    dxv[xi] = dxv[xi] + g * w[wi];
                                }
                                if let Some(dwv) = dw_buf.as_deref_mut() {
                                    dwv[wi] = dwv[wi] + g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
