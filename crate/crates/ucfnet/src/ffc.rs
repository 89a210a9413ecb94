//! Fast Fourier convolution: a two-branch layer whose global branch mixes
//! features in the frequency domain, giving every output pixel an
//! image-level receptive field at full resolution.
//!
//! The Fourier Unit (FU) transforms a feature map with a real 2-D FFT,
//! stacks real and imaginary parts as channels, applies a 1x1 convolution
//! with normalization and activation, and transforms back. Because each
//! spectral bin is a weighted sum of every spatial position, one spectral
//! tap touches the whole image.
//!
//! [`FfcLayer`] splits channels into a local branch (3x3 convolutions) and
//! a global branch (the FU), with cross-branch transfer paths:
//!
//! ```text
//! Y_l = act(norm(conv_ll(x_l) + conv_gl(x_g)))
//! Y_g = act(norm(conv_lg(x_l) + FU(x_g)))
//! ```
//!
//! [`FfcResidualBlock`] cascades two FFC layers and adds the block input
//! back onto the result.

use crate::nn::{BatchNorm2d, BufferSet, ConvLayer, Mode, ParamSet};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Scalar;
use crate::{Error, Result};

use rand_chacha::ChaCha8Rng;

/// Spectral transform applied between the forward and inverse FFT: a 1x1
/// convolution over the 2*c_g stacked real/imaginary channels, batchnorm,
/// ReLU. `bypass_norm_act` is test instrumentation: with it set and the
/// convolution weights set to identity, the unit is an FFT roundtrip.
#[derive(Debug, Clone)]
pub struct FourierUnit {
    pub conv: ConvLayer,
    pub bn: BatchNorm2d,
    pub bypass_norm_act: bool,
}

impl FourierUnit {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        bufs: &mut BufferSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_g: usize,
    ) -> Self {
        let conv = ConvLayer::new(
            params,
            rng,
            &format!("{name}.spectral"),
            2 * c_g,
            2 * c_g,
            1,
            1,
            0,
            false,
        );
        let bn = BatchNorm2d::new(params, bufs, &format!("{name}.spectral_bn"), 2 * c_g);
        FourierUnit {
            conv,
            bn,
            bypass_norm_act: false,
        }
    }

    /// rfft2 -> stack -> 1x1 conv (+ BN + ReLU unless bypassed) -> unstack
    /// -> irfft2. Preserves shape and channel count.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        bufs: &mut BufferSet<S>,
        mode: Mode,
        x: NodeId,
    ) -> Result<NodeId> {
        let [_, _, h, w] = tape.shape(x);
        let spec = tape.rfft2_stack(x);
        let mut t = self.conv.forward(tape, spec)?;
        if !self.bypass_norm_act {
            t = self.bn.forward(tape, bufs, mode, t)?;
            t = tape.relu(t);
        }
        tape.irfft2_unstack(t, (h, w))
    }
}

/// Two-branch FFC layer. Channels are split `c_local` / `c_global` by
/// `round(alpha * c)`; both branches must end up non-empty.
#[derive(Debug, Clone)]
pub struct FfcLayer {
    pub alpha: f64,
    pub c_local: usize,
    pub c_global: usize,
    pub conv_ll: ConvLayer,
    pub conv_gl: ConvLayer,
    pub conv_lg: ConvLayer,
    pub fu: FourierUnit,
    pub bn_l: BatchNorm2d,
    pub bn_g: BatchNorm2d,
}

/// Channel split for a given total and global fraction.
pub fn channel_split(c: usize, alpha: f64) -> Result<(usize, usize)> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::config(format!(
            "ffc: alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let c_global = (alpha * c as f64).round() as usize;
    let c_local = c.saturating_sub(c_global);
    if c_global < 1 || c_local < 1 {
        return Err(Error::config(format!(
            "ffc: channel split {c_local}/{c_global} of {c} leaves an empty branch"
        )));
    }
    Ok((c_local, c_global))
}

impl FfcLayer {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        bufs: &mut BufferSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        alpha: f64,
    ) -> Result<Self> {
        let (c_local, c_global) = channel_split(c, alpha)?;
        // Transfer convolutions are 3x3 same-padding; batchnorm after each
        // branch sum absorbs any bias, so the convolutions carry none.
        let conv_ll = ConvLayer::new(params, rng, &format!("{name}.ll"), c_local, c_local, 3, 1, 1, false);
        let conv_gl = ConvLayer::new(params, rng, &format!("{name}.gl"), c_global, c_local, 3, 1, 1, false);
        let conv_lg = ConvLayer::new(params, rng, &format!("{name}.lg"), c_local, c_global, 3, 1, 1, false);
        let fu = FourierUnit::new(params, bufs, rng, &format!("{name}.fu"), c_global);
        let bn_l = BatchNorm2d::new(params, bufs, &format!("{name}.bn_l"), c_local);
        let bn_g = BatchNorm2d::new(params, bufs, &format!("{name}.bn_g"), c_global);
        Ok(FfcLayer {
            alpha,
            c_local,
            c_global,
            conv_ll,
            conv_gl,
            conv_lg,
            fu,
            bn_l,
            bn_g,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        bufs: &mut BufferSet<S>,
        mode: Mode,
        x: NodeId,
    ) -> Result<NodeId> {
        let c = self.c_local + self.c_global;
        if tape.shape(x)[1] != c {
            return Err(Error::shape(format!(
                "ffc: input has {} channels, layer expects {c}",
                tape.shape(x)[1]
            )));
        }
        let xl = tape.slice_channels(x, 0, self.c_local)?;
        let xg = tape.slice_channels(x, self.c_local, self.c_global)?;

        let ll = self.conv_ll.forward(tape, xl)?;
        let gl = self.conv_gl.forward(tape, xg)?;
        let mut yl = tape.add(ll, gl)?;
        yl = self.bn_l.forward(tape, bufs, mode, yl)?;
        yl = tape.relu(yl);

        let lg = self.conv_lg.forward(tape, xl)?;
        let gg = self.fu.forward(tape, bufs, mode, xg)?;
        let mut yg = tape.add(lg, gg)?;
        yg = self.bn_g.forward(tape, bufs, mode, yg)?;
        yg = tape.relu(yg);

        tape.concat_channels(yl, yg)
    }
}

/// Two cascaded FFC layers with a residual connection around the pair.
#[derive(Debug, Clone)]
pub struct FfcResidualBlock {
    pub ffc1: FfcLayer,
    pub ffc2: FfcLayer,
}

impl FfcResidualBlock {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        bufs: &mut BufferSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        alpha: f64,
    ) -> Result<Self> {
        Ok(FfcResidualBlock {
            ffc1: FfcLayer::new(params, bufs, rng, &format!("{name}.ffc1"), c, alpha)?,
            ffc2: FfcLayer::new(params, bufs, rng, &format!("{name}.ffc2"), c, alpha)?,
        })
    }

    /// out = x + ffc2(ffc1(x)); shape-preserving.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        bufs: &mut BufferSet<S>,
        mode: Mode,
        x: NodeId,
    ) -> Result<NodeId> {
        let h1 = self.ffc1.forward(tape, bufs, mode, x)?;
        let h2 = self.ffc2.forward(tape, bufs, mode, h1)?;
        tape.add(x, h2)
    }
}
