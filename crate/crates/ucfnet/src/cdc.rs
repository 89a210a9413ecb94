//! Central difference convolution (CDC).
//!
//! A CDC tap weights the difference between a neighbor and the window
//! center instead of the neighbor alone, blended with a vanilla
//! convolution by a fixed ratio theta:
//!
//! ```text
//! out = theta * sum_R w * (F_nb - F_center) + (1 - theta) * sum_R w * F_nb + bias
//!     = conv2d(x, w, bias) - theta * conv2d(x, w_sum)
//! ```
//!
//! where `w_sum` collapses each (c_out, c_in) kernel to a single tap
//! holding the sum of its k*k weights. The closed form is what the model
//! runs (two convolutions, one of them 1x1); [`cdc_brute`] evaluates the
//! per-window definition literally and serves as the oracle the fast path
//! is tested against.
//!
//! The difference term needs the value at each window's center. With
//! padding (k-1)/2 the centers fall on the stride grid, so a strided 1x1
//! convolution with the collapsed kernel samples them directly. Any other
//! padding re-embeds the collapsed kernel at the center tap of a k x k
//! kernel and reuses the main convolution's geometry, so out-of-bounds
//! centers pick up the zero padding exactly like the definition does.

use crate::nn::{kaiming_uniform, ParamId, ParamSet};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor4};
use crate::{Error, Result};

use rand_chacha::ChaCha8Rng;

fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) || !theta.is_finite() {
        return Err(Error::config(format!(
            "cdc: theta must lie in [0, 1], got {theta}"
        )));
    }
    Ok(())
}

fn check_odd_kernel(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::shape(format!(
            "cdc: window center undefined for even kernel size {k}"
        )));
    }
    Ok(())
}

/// Central difference convolution on the tape, via the closed-form
/// decomposition. Differentiable with respect to `x`, `w`, and `b`;
/// `theta` is a fixed hyperparameter.
pub fn cdc_forward<S: Scalar>(
    tape: &mut Tape<'_, S>,
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    theta: f64,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    check_theta(theta)?;
    let k = tape.shape(w)[2];
    check_odd_kernel(k)?;
    let main = tape.conv2d(x, w, b, stride, padding)?;
    if theta == 0.0 {
        // The difference term vanishes; keep the graph minimal.
        return Ok(main);
    }
    let ws = tape.kernel_sum(w);
    let correction = if padding == (k - 1) / 2 {
        tape.conv2d(x, ws, None, stride, 0)?
    } else {
        let wc = tape.embed_center(ws, k)?;
        tape.conv2d(x, wc, None, stride, padding)?
    };
    let scaled = tape.scale(correction, theta);
    tape.sub(main, scaled)
}

/// Brute-force CDC: evaluates the per-window definition with explicit
/// loops, summing in 64-bit. Verification oracle only; O(n c_out c_in h w k^2).
pub fn cdc_brute<S: Scalar>(
    x: &Tensor4<S>,
    w: &Tensor4<S>,
    b: Option<&Tensor4<S>>,
    theta: f64,
    stride: usize,
    padding: usize,
) -> Result<Tensor4<S>> {
    check_theta(theta)?;
    let [n, c_in, h, wd] = x.shape();
    let [c_out, wc_in, kh, kw] = w.shape();
    if wc_in != c_in || kh != kw {
        return Err(Error::shape(format!(
            "cdc_brute: kernel {:?} does not match input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let k = kh;
    check_odd_kernel(k)?;
    if stride == 0 {
        return Err(Error::shape("cdc_brute: stride must be >= 1"));
    }
    let h_out = (h + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
    let w_out = (wd + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
    let (Some(h_out), Some(w_out)) = (h_out, w_out) else {
        return Err(Error::shape("cdc_brute: kernel larger than padded input"));
    };
    // Zero-padded fetch.
    let at = |ni: usize, ci: usize, y: isize, xc: isize| -> f64 {
        if y < 0 || xc < 0 || y >= h as isize || xc >= wd as isize {
            0.0
        } else {
            x.at(ni, ci, y as usize, xc as usize).as_f64()
        }
    };
    let mid = (k / 2) as isize;
    let mut out = Tensor4::zeros([n, c_out, h_out, w_out]);
    for ni in 0..n {
        for co in 0..c_out {
            let bias = b.map(|b| b.data()[co].as_f64()).unwrap_or(0.0);
            for yo in 0..h_out {
                for xo in 0..w_out {
                    let oy = (yo * stride) as isize - padding as isize;
                    let ox = (xo * stride) as isize - padding as isize;
                    let mut acc = 0.0f64;
                    for ci in 0..c_in {
                        let fc = at(ni, ci, oy + mid, ox + mid);
                        for dy in 0..k {
                            for dx in 0..k {
                                let wij = w.at(co, ci, dy, dx).as_f64();
                                let fnb = at(ni, ci, oy + dy as isize, ox + dx as isize);
                                acc += theta * wij * (fnb - fc) + (1.0 - theta) * wij * fnb;
                            }
                        }
                    }
                    *out.at_mut(ni, co, yo, xo) = S::of_f64(acc + bias);
                }
            }
        }
    }
    Ok(out)
}

/// CDC layer: a kernel parameter, optional bias, and a fixed theta.
#[derive(Debug, Clone)]
pub struct CdcLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub theta: f64,
    pub stride: usize,
    pub padding: usize,
}

impl CdcLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        theta: f64,
    ) -> Result<Self> {
        check_theta(theta)?;
        check_odd_kernel(k)?;
        let weight = params.register(
            format!("{name}.weight"),
            kaiming_uniform(rng, [c_out, c_in, k, k]),
            true,
        );
        let bias = bias.then(|| {
            params.register(format!("{name}.bias"), Tensor4::zeros([1, c_out, 1, 1]), false)
        });
        Ok(CdcLayer {
            weight,
            bias,
            theta,
            stride,
            padding,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: NodeId) -> Result<NodeId> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        cdc_forward(tape, x, w, b, self.theta, self.stride, self.padding)
    }
}
