//! Real 2-D FFT with a half-width spectrum, plus the stacked-channel
//! representation and adjoints used by the differentiable Fourier unit.
//!
//! Conventions, fixed across the crate:
//! - forward transform is unscaled, the inverse carries the 1/(h*w) factor;
//! - the spectrum keeps the full height and floor(w/2)+1 columns, the rest
//!   of each row being recoverable by conjugate symmetry;
//! - `irfft2` of a spectrum that is not exactly conjugate-consistent at the
//!   self-conjugate columns is defined as the real part of the inverse
//!   transform of the mirror-extended spectrum. This keeps the operator
//!   linear and well-defined for arbitrary spectra, which the Fourier unit
//!   produces after its pointwise transform.

use rustfft::num_complex::Complex;

use super::scalar::Scalar;
use super::Tensor4;
use crate::{Error, Result};

/// Half-width complex spectrum of a real (n, c, h, w) tensor, stored as
/// separate real and imaginary planes of shape (n, c, h, floor(w/2)+1).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum<S> {
    shape: [usize; 4],
    re: Vec<S>,
    im: Vec<S>,
}

impl<S: Scalar> ComplexSpectrum<S> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let numel = shape.iter().product();
        ComplexSpectrum {
            shape,
            re: vec![S::zero(); numel],
            im: vec![S::zero(); numel],
        }
    }

    /// (n, c, h, w_half)
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn re(&self) -> &[S] {
        &self.re
    }
    pub fn im(&self) -> &[S] {
        &self.im
    }
    pub fn re_mut(&mut self) -> &mut [S] {
        &mut self.re
    }
    pub fn im_mut(&mut self) -> &mut [S] {
        &mut self.im
    }

    #[inline]
    fn flat(&self, n: usize, c: usize, u: usize, v: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + u) * self.shape[3] + v
    }

    pub fn at(&self, n: usize, c: usize, u: usize, v: usize) -> (S, S) {
        let i = self.flat(n, c, u, v);
        (self.re[i], self.im[i])
    }

    /// Sum of |X|^2 over the stored half spectrum, counting mirrored columns
    /// twice, i.e. the energy of the implied full spectrum.
    pub fn full_energy(&self, w: usize) -> f64 {
        let [n, c, h, wh] = self.shape;
        let mut acc = 0.0f64;
        for ni in 0..n {
            for ci in 0..c {
                for u in 0..h {
                    for v in 0..wh {
                        let (re, im) = self.at(ni, ci, u, v);
                        let e = re.as_f64() * re.as_f64() + im.as_f64() * im.as_f64();
                        let self_conj = v == 0 || 2 * v == w;
                        acc += if self_conj { e } else { 2.0 * e };
                    }
                }
            }
        }
        acc
    }
}

fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// One h x w plane -> half spectrum (h x wh), forward unscaled.
fn plane_rfft2<S: Scalar>(x: &[S], h: usize, w: usize, out: &mut [Complex<S>]) {
    let wh = half_width(w);
    let fft_w = S::plan_fft(w, false);
    let fft_h = S::plan_fft(h, false);
    let mut row = vec![Complex::default(); w];
    let mut scratch = vec![Complex::default(); fft_w.get_inplace_scratch_len().max(fft_h.get_inplace_scratch_len())];
    for y in 0..h {
        for q in 0..w {
            row[q] = Complex::new(x[y * w + q], S::zero());
        }
        fft_w.process_with_scratch(&mut row, &mut scratch);
        out[y * wh..y * wh + wh].copy_from_slice(&row[..wh]);
    }
    let mut col = vec![Complex::default(); h];
    for v in 0..wh {
        for u in 0..h {
            col[u] = out[u * wh + v];
        }
        fft_h.process_with_scratch(&mut col, &mut scratch);
        for u in 0..h {
            out[u * wh + v] = col[u];
        }
    }
}

enum RowExtension {
    /// Mirror-conjugate fill of the missing columns (inverse transform).
    Hermitian,
    /// Zero fill of the missing columns (adjoint of the forward transform).
    Zero,
}

/// Half spectrum (h x wh) -> real h x w plane via unscaled inverse
/// transforms; the caller applies any normalization to `out`.
fn plane_inverse_real<S: Scalar>(
    spec: &[Complex<S>],
    h: usize,
    w: usize,
    ext: RowExtension,
    out: &mut [S],
) {
    let wh = half_width(w);
    let ifft_h = S::plan_fft(h, true);
    let ifft_w = S::plan_fft(w, true);
    let mut scratch = vec![
        Complex::default();
        ifft_h.get_inplace_scratch_len().max(ifft_w.get_inplace_scratch_len())
    ];
    let mut cols = vec![Complex::default(); h * wh];
    let mut col = vec![Complex::default(); h];
    for v in 0..wh {
        for u in 0..h {
            col[u] = spec[u * wh + v];
        }
        ifft_h.process_with_scratch(&mut col, &mut scratch);
        for u in 0..h {
            cols[u * wh + v] = col[u];
        }
    }
    let mut row = vec![Complex::default(); w];
    for y in 0..h {
        row[..wh].copy_from_slice(&cols[y * wh..y * wh + wh]);
        for v in wh..w {
            row[v] = match ext {
                RowExtension::Hermitian => cols[y * wh + (w - v)].conj(),
                RowExtension::Zero => Complex::default(),
            };
        }
        ifft_w.process_with_scratch(&mut row, &mut scratch);
        for q in 0..w {
            out[y * w + q] = row[q].re;
        }
    }
}

/// Real 2-D FFT of every (n, c) plane. Forward transform, unscaled.
pub fn rfft2<S: Scalar>(x: &Tensor4<S>) -> ComplexSpectrum<S> {
    let [n, c, h, w] = x.shape();
    let wh = half_width(w);
    let mut spec = ComplexSpectrum::zeros([n, c, h, wh]);
    let mut buf = vec![Complex::default(); h * wh];
    for ni in 0..n {
        for ci in 0..c {
            plane_rfft2(x.plane(ni, ci), h, w, &mut buf);
            let base = (ni * c + ci) * h * wh;
            for (i, z) in buf.iter().enumerate() {
                spec.re[base + i] = z.re;
                spec.im[base + i] = z.im;
            }
        }
    }
    spec
}

/// Inverse of [`rfft2`]: half spectrum back to a real (n, c, h, w) tensor,
/// scaled by 1/(h*w). The target spatial size must be consistent with the
/// stored half width (h matches, floor(w/2)+1 == w_half).
pub fn irfft2<S: Scalar>(spec: &ComplexSpectrum<S>, hw: (usize, usize)) -> Result<Tensor4<S>> {
    let [n, c, sh, wh] = spec.shape();
    let (h, w) = hw;
    if sh != h || half_width(w) != wh {
        return Err(Error::shape(format!(
            "irfft2: spectrum {:?} inconsistent with target {h}x{w} (expect h={h}, w_half={})",
            spec.shape(),
            half_width(w)
        )));
    }
    let mut out = Tensor4::zeros([n, c, h, w]);
    let scale = S::of_f64(1.0 / (h * w) as f64);
    let mut buf = vec![Complex::default(); h * wh];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * wh;
            for i in 0..h * wh {
                buf[i] = Complex::new(spec.re[base + i], spec.im[base + i]);
            }
            let plane = out.plane_mut(ni, ci);
            plane_inverse_real(&buf, h, w, RowExtension::Hermitian, plane);
            for v in plane.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(out)
}

/// Differentiable-path forward: spectrum stacked as real channels,
/// (n, c, h, w) -> (n, 2c, h, wh) with real parts in channels 0..c and
/// imaginary parts in channels c..2c.
pub(crate) fn rfft2_stacked<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let [n, c, h, w] = x.shape();
    let wh = half_width(w);
    let spec = rfft2(x);
    let mut y = Tensor4::zeros([n, 2 * c, h, wh]);
    let hwh = h * wh;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hwh;
            y.plane_mut(ni, ci).copy_from_slice(&spec.re()[base..base + hwh]);
            y.plane_mut(ni, c + ci).copy_from_slice(&spec.im()[base..base + hwh]);
        }
    }
    y
}

/// Adjoint of [`rfft2_stacked`]: gradient at the stacked spectrum back to the
/// spatial input. Equals the real part of the unscaled inverse transform of
/// the zero-extended gradient spectrum.
pub(crate) fn rfft2_stacked_backward<S: Scalar>(g: &Tensor4<S>, w: usize) -> Tensor4<S> {
    let [n, c2, h, wh] = g.shape();
    debug_assert_eq!(half_width(w), wh);
    let c = c2 / 2;
    let mut dx = Tensor4::zeros([n, c, h, w]);
    let mut buf = vec![Complex::default(); h * wh];
    for ni in 0..n {
        for ci in 0..c {
            let gre = g.plane(ni, ci);
            let gim = g.plane(ni, c + ci);
            for i in 0..h * wh {
                buf[i] = Complex::new(gre[i], gim[i]);
            }
            plane_inverse_real(&buf, h, w, RowExtension::Zero, dx.plane_mut(ni, ci));
        }
    }
    dx
}

/// Differentiable-path inverse: stacked spectrum (n, 2c, h, wh) back to a
/// real (n, c, h, w) tensor, scaled by 1/(h*w).
pub(crate) fn irfft2_stacked<S: Scalar>(s: &Tensor4<S>, hw: (usize, usize)) -> Result<Tensor4<S>> {
    let [n, c2, sh, wh] = s.shape();
    let (h, w) = hw;
    if c2 % 2 != 0 {
        return Err(Error::shape(format!(
            "irfft2: stacked spectrum needs even channel count, got {c2}"
        )));
    }
    if sh != h || half_width(w) != wh {
        return Err(Error::shape(format!(
            "irfft2: stacked spectrum {:?} inconsistent with target {h}x{w}",
            s.shape()
        )));
    }
    let c = c2 / 2;
    let mut out = Tensor4::zeros([n, c, h, w]);
    let scale = S::of_f64(1.0 / (h * w) as f64);
    let mut buf = vec![Complex::default(); h * wh];
    for ni in 0..n {
        for ci in 0..c {
            let sre = s.plane(ni, ci);
            let sim = s.plane(ni, c + ci);
            for i in 0..h * wh {
                buf[i] = Complex::new(sre[i], sim[i]);
            }
            let plane = out.plane_mut(ni, ci);
            plane_inverse_real(&buf, h, w, RowExtension::Hermitian, plane);
            for v in plane.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`irfft2_stacked`]: the forward transform of the output
/// gradient, scaled by 1/(h*w), with mirrored (non-self-conjugate) columns
/// doubled to account for the fold onto the half spectrum.
pub(crate) fn irfft2_stacked_backward<S: Scalar>(gy: &Tensor4<S>) -> Tensor4<S> {
    let [n, c, h, w] = gy.shape();
    let wh = half_width(w);
    let spec = rfft2(gy);
    let scale = 1.0 / (h * w) as f64;
    let mut ds = Tensor4::zeros([n, 2 * c, h, wh]);
    for ni in 0..n {
        for ci in 0..c {
            for u in 0..h {
                for v in 0..wh {
                    let (re, im) = spec.at(ni, ci, u, v);
                    let self_conj = v == 0 || 2 * v == w;
                    let f = S::of_f64(if self_conj { scale } else { 2.0 * scale });
                    *ds.at_mut(ni, ci, u, v) = re * f;
                    *ds.at_mut(ni, c + ci, u, v) = im * f;
                }
            }
        }
    }
    ds
}
