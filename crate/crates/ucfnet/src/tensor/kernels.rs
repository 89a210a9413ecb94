//! Pure compute kernels behind the tape operations.
//!
//! Convolution is im2col + a packed gemm; everything else is straightforward
//! single-pass loops. Reductions (batchnorm statistics, losses) accumulate in
//! f64 regardless of the element width so 32-bit training stays stable. All
//! kernels are single-threaded and bitwise deterministic.

use super::scalar::Scalar;
use super::Tensor4;
use crate::{Error, Result};

/// C <- alpha*A*B + beta*C for row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    rsa: isize,
    csa: isize,
    b: &[S],
    rsb: isize,
    csb: isize,
    beta: S,
    c: &mut [S],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        S::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) fn conv_dims<S: Scalar>(
    x: &Tensor4<S>,
    weight: &Tensor4<S>,
    bias: Option<&Tensor4<S>>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let [n, c_in, h, w] = x.shape();
    let [c_out, wc_in, kh, kw] = weight.shape();
    if kh != kw {
        return Err(Error::shape(format!(
            "conv2d: kernel must be square, got {kh}x{kw}"
        )));
    }
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d: input has {c_in} channels but kernel expects {wc_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d: stride must be >= 1".to_string()));
    }
    if let Some(b) = bias {
        if b.shape() != [1, c_out, 1, 1] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} != [1, {c_out}, 1, 1]",
                b.shape()
            )));
        }
    }
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if hp < kh || wp < kw {
        return Err(Error::shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )));
    }
    let h_out = (hp - kh) / stride + 1;
    let w_out = (wp - kw) / stride + 1;
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        stride,
        padding,
        h_out,
        w_out,
    })
}

/// Copies one sample into a zero-padded (c_in, h+2p, w+2p) buffer.
fn pad_sample<S: Scalar>(x: &Tensor4<S>, n: usize, padding: usize, out: &mut [S]) {
    let [_, c_in, h, w] = x.shape();
    let wp = w + 2 * padding;
    let hp = h + 2 * padding;
    out.fill(S::zero());
    for ci in 0..c_in {
        let src = x.plane(n, ci);
        let dst_base = ci * hp * wp;
        for y in 0..h {
            let dst = dst_base + (y + padding) * wp + padding;
            out[dst..dst + w].copy_from_slice(&src[y * w..y * w + w]);
        }
    }
}

/// Unpacks im2col rows: cols[(ci*k+ky)*k+kx][y*w_out+x] = xpad[ci][y*s+ky][x*s+kx].
fn im2col<S: Scalar>(xpad: &[S], d: &ConvDims, cols: &mut [S]) {
    let wp = d.w + 2 * d.padding;
    let hw_out = d.h_out * d.w_out;
    for ci in 0..d.c_in {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((ci * d.k + ky) * d.k + kx) * hw_out;
                for y in 0..d.h_out {
                    let src = ci * (d.h + 2 * d.padding) * wp + (y * d.stride + ky) * wp + kx;
                    let dst = row + y * d.w_out;
                    if d.stride == 1 {
                        cols[dst..dst + d.w_out].copy_from_slice(&xpad[src..src + d.w_out]);
                    } else {
                        for x in 0..d.w_out {
                            cols[dst + x] = xpad[src + x * d.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-adds column gradients back into the
/// padded input gradient buffer.
fn col2im_add<S: Scalar>(cols: &[S], d: &ConvDims, xpad: &mut [S]) {
    let wp = d.w + 2 * d.padding;
    let hw_out = d.h_out * d.w_out;
    for ci in 0..d.c_in {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((ci * d.k + ky) * d.k + kx) * hw_out;
                for y in 0..d.h_out {
                    let dst = ci * (d.h + 2 * d.padding) * wp + (y * d.stride + ky) * wp + kx;
                    let src = row + y * d.w_out;
                    if d.stride == 1 {
                        let (a, b) = (&mut xpad[dst..dst + d.w_out], &cols[src..src + d.w_out]);
                        for (ai, bi) in a.iter_mut().zip(b) {
                            *ai += *bi;
                        }
                    } else {
                        for x in 0..d.w_out {
                            xpad[dst + x * d.stride] += cols[src + x];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
pub(crate) fn conv2d_forward<S: Scalar>(
    x: &Tensor4<S>,
    weight: &Tensor4<S>,
    bias: Option<&Tensor4<S>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor4<S>> {
    let d = conv_dims(x, weight, bias, stride, padding)?;
    let hw_out = d.h_out * d.w_out;
    let kk = d.c_in * d.k * d.k;
    let mut y = Tensor4::zeros([d.n, d.c_out, d.h_out, d.w_out]);

    let unit = d.k == 1 && d.padding == 0 && d.stride == 1;
    let mut xpad = if unit {
        Vec::new()
    } else {
        vec![S::zero(); d.c_in * (d.h + 2 * d.padding) * (d.w + 2 * d.padding)]
    };
    let mut cols = if unit { Vec::new() } else { vec![S::zero(); kk * hw_out] };

    for ni in 0..d.n {
        let x_base = ni * d.c_in * d.h * d.w;
        let y_base = ni * d.c_out * hw_out;
        let b = if unit {
            &x.data()[x_base..x_base + d.c_in * d.h * d.w]
        } else {
            pad_sample(x, ni, d.padding, &mut xpad);
            im2col(&xpad, &d, &mut cols);
            &cols[..]
        };
        gemm(
            d.c_out,
            kk,
            hw_out,
            S::one(),
            weight.data(),
            kk as isize,
            1,
            b,
            hw_out as isize,
            1,
            S::zero(),
            &mut y.data_mut()[y_base..y_base + d.c_out * hw_out],
            hw_out as isize,
            1,
        );
    }
    if let Some(b) = bias {
        for ni in 0..d.n {
            for co in 0..d.c_out {
                let bv = b.data()[co];
                for v in y.plane_mut(ni, co) {
                    *v += bv;
                }
            }
        }
    }
    Ok(y)
}

pub(crate) struct ConvGrads<S> {
    pub dx: Option<Tensor4<S>>,
    pub dw: Tensor4<S>,
    pub db: Option<Tensor4<S>>,
}

pub(crate) fn conv2d_backward<S: Scalar>(
    x: &Tensor4<S>,
    weight: &Tensor4<S>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    dy: &Tensor4<S>,
    need_dx: bool,
) -> Result<ConvGrads<S>> {
    let d = conv_dims(x, weight, None, stride, padding)?;
    let hw_out = d.h_out * d.w_out;
    let kk = d.c_in * d.k * d.k;
    debug_assert_eq!(dy.shape(), [d.n, d.c_out, d.h_out, d.w_out]);

    let mut dw = Tensor4::zeros(weight.shape());
    let mut dx = if need_dx { Some(Tensor4::zeros(x.shape())) } else { None };

    let unit = d.k == 1 && d.padding == 0 && d.stride == 1;
    let padlen = d.c_in * (d.h + 2 * d.padding) * (d.w + 2 * d.padding);
    let mut xpad = if unit { Vec::new() } else { vec![S::zero(); padlen] };
    let mut cols = if unit { Vec::new() } else { vec![S::zero(); kk * hw_out] };
    let mut dcols = if unit || !need_dx { Vec::new() } else { vec![S::zero(); kk * hw_out] };

    for ni in 0..d.n {
        let x_base = ni * d.c_in * d.h * d.w;
        let dy_n = &dy.data()[ni * d.c_out * hw_out..(ni + 1) * d.c_out * hw_out];
        let b = if unit {
            &x.data()[x_base..x_base + d.c_in * d.h * d.w]
        } else {
            pad_sample(x, ni, d.padding, &mut xpad);
            im2col(&xpad, &d, &mut cols);
            &cols[..]
        };
        // dW += dY * cols^T
        gemm(
            d.c_out,
            hw_out,
            kk,
            S::one(),
            dy_n,
            hw_out as isize,
            1,
            b,
            1,
            hw_out as isize,
            S::one(),
            dw.data_mut(),
            kk as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            if unit {
                // dX = W^T * dY directly into the sample slice.
                gemm(
                    kk,
                    d.c_out,
                    hw_out,
                    S::one(),
                    weight.data(),
                    1,
                    kk as isize,
                    dy_n,
                    hw_out as isize,
                    1,
                    S::zero(),
                    &mut dx.data_mut()[x_base..x_base + d.c_in * d.h * d.w],
                    hw_out as isize,
                    1,
                );
            } else {
                gemm(
                    kk,
                    d.c_out,
                    hw_out,
                    S::one(),
                    weight.data(),
                    1,
                    kk as isize,
                    dy_n,
                    hw_out as isize,
                    1,
                    S::zero(),
                    &mut dcols,
                    hw_out as isize,
                    1,
                );
                xpad.fill(S::zero());
                col2im_add(&dcols, &d, &mut xpad);
                let wp = d.w + 2 * d.padding;
                let hp = d.h + 2 * d.padding;
                let dxd = dx.data_mut();
                for ci in 0..d.c_in {
                    for y in 0..d.h {
                        let src = ci * hp * wp + (y + d.padding) * wp + d.padding;
                        let dst = x_base + (ci * d.h + y) * d.w;
                        dxd[dst..dst + d.w].copy_from_slice(&xpad[src..src + d.w]);
                    }
                }
            }
        }
    }

    let db = if has_bias {
        let mut db = Tensor4::zeros([1, d.c_out, 1, 1]);
        for co in 0..d.c_out {
            let mut acc = 0.0f64;
            for ni in 0..d.n {
                for v in dy.plane(ni, co) {
                    acc += v.as_f64();
                }
            }
            db.data_mut()[co] = S::of_f64(acc);
        }
        Some(db)
    } else {
        None
    };

    Ok(ConvGrads { dx, dw, db })
}

/// Sums each (c_out, c_in) kernel over its taps, producing a 1x1 kernel.
pub(crate) fn kernel_sum<S: Scalar>(weight: &Tensor4<S>) -> Tensor4<S> {
    let [c_out, c_in, kh, kw] = weight.shape();
    let mut out = Tensor4::zeros([c_out, c_in, 1, 1]);
    for co in 0..c_out {
        for ci in 0..c_in {
            let mut acc = 0.0f64;
            for v in weight.plane(co, ci) {
                acc += v.as_f64();
            }
            out.data_mut()[co * c_in + ci] = S::of_f64(acc);
        }
    }
    let _ = (kh, kw);
    out
}

/// Broadcasts 1x1-kernel gradients back over the taps of the full kernel.
pub(crate) fn kernel_sum_backward<S: Scalar>(dsum: &Tensor4<S>, kernel_shape: [usize; 4]) -> Tensor4<S> {
    let [c_out, c_in, kh, kw] = kernel_shape;
    let mut dw = Tensor4::zeros(kernel_shape);
    for co in 0..c_out {
        for ci in 0..c_in {
            let g = dsum.data()[co * c_in + ci];
            for v in dw.plane_mut(co, ci) {
                *v = g;
            }
        }
    }
    let _ = (kh, kw);
    dw
}

/// Embeds 1x1 kernels at the center tap of an odd k x k kernel, zeros
/// elsewhere. Used to express the central-difference correction under
/// arbitrary stride/padding with the same window geometry as the main conv.
pub(crate) fn embed_center<S: Scalar>(w1: &Tensor4<S>, k: usize) -> Tensor4<S> {
    let [c_out, c_in, _, _] = w1.shape();
    debug_assert!(k % 2 == 1);
    let mid = k / 2;
    let mut out = Tensor4::zeros([c_out, c_in, k, k]);
    for co in 0..c_out {
        for ci in 0..c_in {
            out.plane_mut(co, ci)[mid * k + mid] = w1.data()[co * c_in + ci];
        }
    }
    out
}

/// Backward of [`embed_center`]: extract the center tap gradients.
pub(crate) fn embed_center_backward<S: Scalar>(dk: &Tensor4<S>, k: usize) -> Tensor4<S> {
    let [c_out, c_in, _, _] = dk.shape();
    let mid = k / 2;
    let mut out = Tensor4::zeros([c_out, c_in, 1, 1]);
    for co in 0..c_out {
        for ci in 0..c_in {
            out.data_mut()[co * c_in + ci] = dk.plane(co, ci)[mid * k + mid];
        }
    }
    out
}

#[derive(Debug)]
pub(crate) struct BnStats<S> {
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
}

/// Training-mode batchnorm over (n, h, w) per channel with population
/// variance. Requires n*h*w >= 2 so the variance is meaningful.
pub(crate) fn bn_forward_train<S: Scalar>(
    x: &Tensor4<S>,
    gamma: &Tensor4<S>,
    beta: &Tensor4<S>,
    eps: f64,
) -> Result<(Tensor4<S>, BnStats<S>)> {
    let [n, c, h, w] = x.shape();
    let m = n * h * w;
    if m < 2 {
        return Err(Error::shape(format!(
            "batchnorm: training mode needs n*h*w >= 2, got {m}"
        )));
    }
    let mut mean = vec![S::zero(); c];
    let mut inv_std = vec![S::zero(); c];
    let mut y = Tensor4::zeros(x.shape());
    for ci in 0..c {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for ni in 0..n {
            for v in x.plane(ni, ci) {
                let v = v.as_f64();
                sum += v;
                sumsq += v * v;
            }
        }
        let mu = sum / m as f64;
        let var = (sumsq / m as f64 - mu * mu).max(0.0);
        let istd = 1.0 / (var + eps).sqrt();
        mean[ci] = S::of_f64(mu);
        inv_std[ci] = S::of_f64(istd);
        let g = gamma.data()[ci].as_f64();
        let b = beta.data()[ci].as_f64();
        let scale = S::of_f64(g * istd);
        let shift = S::of_f64(b - g * istd * mu);
        for ni in 0..n {
            let src = x.plane(ni, ci);
            let dst = y.plane_mut(ni, ci);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s * scale + shift;
            }
        }
    }
    Ok((y, BnStats { mean, inv_std }))
}

/// Eval-mode batchnorm using stored running statistics.
pub(crate) fn bn_forward_eval<S: Scalar>(
    x: &Tensor4<S>,
    gamma: &Tensor4<S>,
    beta: &Tensor4<S>,
    running_mean: &Tensor4<S>,
    running_var: &Tensor4<S>,
    eps: f64,
) -> Tensor4<S> {
    let [n, c, _, _] = x.shape();
    let mut y = Tensor4::zeros(x.shape());
    for ci in 0..c {
        let mu = running_mean.data()[ci].as_f64();
        let istd = 1.0 / (running_var.data()[ci].as_f64() + eps).sqrt();
        let g = gamma.data()[ci].as_f64();
        let b = beta.data()[ci].as_f64();
        let scale = S::of_f64(g * istd);
        let shift = S::of_f64(b - g * istd * mu);
        for ni in 0..n {
            let src = x.plane(ni, ci);
            let dst = y.plane_mut(ni, ci);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s * scale + shift;
            }
        }
    }
    y
}

pub(crate) struct BnGrads<S> {
    pub dx: Tensor4<S>,
    pub dgamma: Tensor4<S>,
    pub dbeta: Tensor4<S>,
}

/// Backward through training-mode batchnorm (batch statistics participate in
/// the gradient).
pub(crate) fn bn_backward_train<S: Scalar>(
    x: &Tensor4<S>,
    gamma: &Tensor4<S>,
    stats: &BnStats<S>,
    dy: &Tensor4<S>,
) -> BnGrads<S> {
    let [n, c, h, w] = x.shape();
    let m = (n * h * w) as f64;
    let mut dx = Tensor4::zeros(x.shape());
    let mut dgamma = Tensor4::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor4::zeros([1, c, 1, 1]);
    for ci in 0..c {
        let mu = stats.mean[ci].as_f64();
        let istd = stats.inv_std[ci].as_f64();
        let g = gamma.data()[ci].as_f64();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let xs = x.plane(ni, ci);
            let ds = dy.plane(ni, ci);
            for (xv, dv) in xs.iter().zip(ds) {
                let xhat = (xv.as_f64() - mu) * istd;
                let d = dv.as_f64();
                sum_dy += d;
                sum_dy_xhat += d * xhat;
            }
        }
        dgamma.data_mut()[ci] = S::of_f64(sum_dy_xhat);
        dbeta.data_mut()[ci] = S::of_f64(sum_dy);
        let k1 = g * istd;
        for ni in 0..n {
            let xs = x.plane(ni, ci);
            let ds = dy.plane(ni, ci);
            let dst = dx.plane_mut(ni, ci);
            for ((xv, dv), out) in xs.iter().zip(ds).zip(dst.iter_mut()) {
                let xhat = (xv.as_f64() - mu) * istd;
                let d = dv.as_f64();
                *out = S::of_f64(k1 * (d - sum_dy / m - xhat * sum_dy_xhat / m));
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

/// Backward through eval-mode batchnorm (running stats are constants).
pub(crate) fn bn_backward_eval<S: Scalar>(
    x: &Tensor4<S>,
    gamma: &Tensor4<S>,
    running_mean: &Tensor4<S>,
    running_var: &Tensor4<S>,
    eps: f64,
    dy: &Tensor4<S>,
) -> BnGrads<S> {
    let [n, c, _, _] = x.shape();
    let mut dx = Tensor4::zeros(x.shape());
    let mut dgamma = Tensor4::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor4::zeros([1, c, 1, 1]);
    for ci in 0..c {
        let mu = running_mean.data()[ci].as_f64();
        let istd = 1.0 / (running_var.data()[ci].as_f64() + eps).sqrt();
        let g = gamma.data()[ci].as_f64();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        let scale = S::of_f64(g * istd);
        for ni in 0..n {
            let xs = x.plane(ni, ci);
            let ds = dy.plane(ni, ci);
            let dst = dx.plane_mut(ni, ci);
            for ((xv, dv), out) in xs.iter().zip(ds).zip(dst.iter_mut()) {
                let d = dv.as_f64();
                sum_dy += d;
                sum_dy_xhat += d * (xv.as_f64() - mu) * istd;
                *out = *dv * scale;
            }
        }
        dgamma.data_mut()[ci] = S::of_f64(sum_dy_xhat);
        dbeta.data_mut()[ci] = S::of_f64(sum_dy);
    }
    BnGrads { dx, dgamma, dbeta }
}

pub(crate) fn relu<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub(crate) fn relu_backward<S: Scalar>(x: &Tensor4<S>, dy: &Tensor4<S>) -> Tensor4<S> {
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv <= S::zero() {
            *d = S::zero();
        }
    }
    dx
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    x.map(|v| S::of_f64(sigmoid_scalar(v.as_f64())))
}

/// dx = dy * y * (1 - y), using the saved forward output.
pub(crate) fn sigmoid_backward<S: Scalar>(y: &Tensor4<S>, dy: &Tensor4<S>) -> Tensor4<S> {
    let mut dx = dy.clone();
    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
        *d = *d * yv * (S::one() - yv);
    }
    dx
}

/// 2x2 max pooling with stride 2. Ties resolve to the first element in
/// row-major order; the argmax (flat input index) is returned for backward.
pub(crate) fn maxpool2_forward<S: Scalar>(x: &Tensor4<S>) -> Result<(Tensor4<S>, Vec<u32>)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2: spatial dims must be even, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor4::zeros([n, c, ho, wo]);
    let mut argmax = vec![0u32; n * c * ho * wo];
    let xd = x.data();
    let yd = y.data_mut();
    let mut oi = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for yo in 0..ho {
                let r0 = base + (2 * yo) * w;
                let r1 = r0 + w;
                for xo in 0..wo {
                    let i00 = r0 + 2 * xo;
                    let idxs = [i00, i00 + 1, r1 + 2 * xo, r1 + 2 * xo + 1];
                    let mut best = idxs[0];
                    let mut bv = xd[best];
                    for &i in &idxs[1..] {
                        if xd[i] > bv {
                            bv = xd[i];
                            best = i;
                        }
                    }
                    yd[oi] = bv;
                    argmax[oi] = best as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((y, argmax))
}

pub(crate) fn maxpool2_backward<S: Scalar>(
    x_shape: [usize; 4],
    argmax: &[u32],
    dy: &Tensor4<S>,
) -> Tensor4<S> {
    let mut dx = Tensor4::zeros(x_shape);
    let dxd = dx.data_mut();
    for (g, &src) in dy.data().iter().zip(argmax) {
        dxd[src as usize] += *g;
    }
    dx
}

/// Precomputed 1-D interpolation taps for exact x2 bilinear upsampling with
/// half-pixel centers (source coordinate = (dst + 0.5) / 2 - 0.5, clamped).
fn bilinear_taps(len_in: usize) -> Vec<(usize, usize, f64)> {
    let len_out = len_in * 2;
    let mut taps = Vec::with_capacity(len_out);
    for i in 0..len_out {
        let src = (i as f64 + 0.5) / 2.0 - 0.5;
        let i0f = src.floor();
        let frac = src - i0f;
        let i0 = (i0f.max(0.0) as usize).min(len_in - 1);
        let i1 = ((i0f + 1.0).max(0.0) as usize).min(len_in - 1);
        taps.push((i0, i1, frac));
    }
    taps
}

pub(crate) fn upsample_bilinear2_forward<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h * 2, w * 2);
    let yt = bilinear_taps(h);
    let xt = bilinear_taps(w);
    let mut y = Tensor4::zeros([n, c, ho, wo]);
    for ni in 0..n {
        for ci in 0..c {
            let src = x.plane(ni, ci);
            let dst = y.plane_mut(ni, ci);
            for (yo, &(y0, y1, fy)) in yt.iter().enumerate() {
                let r0 = &src[y0 * w..y0 * w + w];
                let r1 = &src[y1 * w..y1 * w + w];
                let out = &mut dst[yo * wo..yo * wo + wo];
                for (xo, &(x0, x1, fx)) in xt.iter().enumerate() {
                    let top = r0[x0].as_f64() * (1.0 - fx) + r0[x1].as_f64() * fx;
                    let bot = r1[x0].as_f64() * (1.0 - fx) + r1[x1].as_f64() * fx;
                    out[xo] = S::of_f64(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    y
}

pub(crate) fn upsample_bilinear2_backward<S: Scalar>(
    x_shape: [usize; 4],
    dy: &Tensor4<S>,
) -> Tensor4<S> {
    let [n, c, h, w] = x_shape;
    let yt = bilinear_taps(h);
    let xt = bilinear_taps(w);
    let wo = w * 2;
    let mut dx = Tensor4::zeros(x_shape);
    for ni in 0..n {
        for ci in 0..c {
            let g = dy.plane(ni, ci);
            let dst = dx.plane_mut(ni, ci);
            for (yo, &(y0, y1, fy)) in yt.iter().enumerate() {
                let row = &g[yo * wo..yo * wo + wo];
                for (xo, &(x0, x1, fx)) in xt.iter().enumerate() {
                    let gv = row[xo].as_f64();
                    let w00 = (1.0 - fy) * (1.0 - fx);
                    let w01 = (1.0 - fy) * fx;
                    let w10 = fy * (1.0 - fx);
                    let w11 = fy * fx;
                    dst[y0 * w + x0] += S::of_f64(gv * w00);
                    dst[y0 * w + x1] += S::of_f64(gv * w01);
                    dst[y1 * w + x0] += S::of_f64(gv * w10);
                    dst[y1 * w + x1] += S::of_f64(gv * w11);
                }
            }
        }
    }
    dx
}

pub(crate) fn concat_channels<S: Scalar>(a: &Tensor4<S>, b: &Tensor4<S>) -> Result<Tensor4<S>> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if na != nb || ha != hb || wa != wb {
        return Err(Error::shape(format!(
            "concat: shapes {:?} and {:?} differ outside the channel dim",
            a.shape(),
            b.shape()
        )));
    }
    let mut y = Tensor4::zeros([na, ca + cb, ha, wa]);
    for ni in 0..na {
        for ci in 0..ca {
            y.plane_mut(ni, ci).copy_from_slice(a.plane(ni, ci));
        }
        for ci in 0..cb {
            y.plane_mut(ni, ca + ci).copy_from_slice(b.plane(ni, ci));
        }
    }
    Ok(y)
}

pub(crate) fn slice_channels<S: Scalar>(
    x: &Tensor4<S>,
    start: usize,
    len: usize,
) -> Result<Tensor4<S>> {
    let [n, c, h, w] = x.shape();
    if start + len > c {
        return Err(Error::shape(format!(
            "slice_channels: range {start}..{} out of {c} channels",
            start + len
        )));
    }
    let mut y = Tensor4::zeros([n, len, h, w]);
    for ni in 0..n {
        for ci in 0..len {
            y.plane_mut(ni, ci).copy_from_slice(x.plane(ni, start + ci));
        }
    }
    Ok(y)
}

/// Stable binary cross-entropy from logits, mean over all elements.
/// Targets must be exactly 0 or 1.
pub(crate) fn bce_with_logits<S: Scalar>(z: &Tensor4<S>, target: &Tensor4<S>) -> Result<f64> {
    if z.shape() != target.shape() {
        return Err(Error::shape(format!(
            "bce: logits {:?} vs target {:?}",
            z.shape(),
            target.shape()
        )));
    }
    let mut acc = 0.0f64;
    for (zv, tv) in z.iter().zip(target.iter()) {
        let t = tv.as_f64();
        if t != 0.0 && t != 1.0 {
            return Err(Error::Numeric(format!(
                "bce: target entry {t} outside {{0, 1}}"
            )));
        }
        let zf = zv.as_f64();
        acc += zf.max(0.0) - zf * t + (-zf.abs()).exp().ln_1p();
    }
    Ok(acc / z.numel() as f64)
}

/// d/dz of mean BCE: (sigmoid(z) - target) / numel, scaled by upstream.
pub(crate) fn bce_with_logits_backward<S: Scalar>(
    z: &Tensor4<S>,
    target: &Tensor4<S>,
    upstream: f64,
) -> Tensor4<S> {
    let scale = upstream / z.numel() as f64;
    let mut dz = Tensor4::zeros(z.shape());
    for ((d, zv), tv) in dz.data_mut().iter_mut().zip(z.iter()).zip(target.iter()) {
        *d = S::of_f64((sigmoid_scalar(zv.as_f64()) - tv.as_f64()) * scale);
    }
    dz
}

/// Soft IoU loss: 1 - (sum(p*t) + eps) / (sum(p) + sum(t) - sum(p*t) + eps),
/// with intersection and union pooled over the whole tensor (batch included).
pub(crate) fn soft_iou<S: Scalar>(p: &Tensor4<S>, target: &Tensor4<S>, eps: f64) -> Result<f64> {
    if p.shape() != target.shape() {
        return Err(Error::shape(format!(
            "soft_iou: probs {:?} vs target {:?}",
            p.shape(),
            target.shape()
        )));
    }
    let (mut inter, mut psum, mut tsum) = (0.0f64, 0.0f64, 0.0f64);
    for (pv, tv) in p.iter().zip(target.iter()) {
        let pf = pv.as_f64();
        let tf = tv.as_f64();
        inter += pf * tf;
        psum += pf;
        tsum += tf;
    }
    let union = psum + tsum - inter;
    Ok(1.0 - (inter + eps) / (union + eps))
}

pub(crate) fn soft_iou_backward<S: Scalar>(
    p: &Tensor4<S>,
    target: &Tensor4<S>,
    eps: f64,
    upstream: f64,
) -> Tensor4<S> {
    let (mut inter, mut psum, mut tsum) = (0.0f64, 0.0f64, 0.0f64);
    for (pv, tv) in p.iter().zip(target.iter()) {
        inter += pv.as_f64() * tv.as_f64();
        psum += pv.as_f64();
        tsum += tv.as_f64();
    }
    let union = psum + tsum - inter;
    let iu = inter + eps;
    let uu = union + eps;
    // d(loss)/dp_i = -(t_i * uu - iu * (1 - t_i)) / uu^2
    let mut dp = Tensor4::zeros(p.shape());
    for (d, tv) in dp.data_mut().iter_mut().zip(target.iter()) {
        let t = tv.as_f64();
        *d = S::of_f64(-upstream * (t * uu - iu * (1.0 - t)) / (uu * uu));
    }
    dp
}

pub(crate) fn sum_all<S: Scalar>(x: &Tensor4<S>) -> f64 {
    x.iter().map(|v| v.as_f64()).sum()
}
