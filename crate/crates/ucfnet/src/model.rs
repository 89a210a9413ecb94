//! The U-shaped segmentation network: central-difference residual blocks
//! down the encoder, a chain of Fourier-convolution residual blocks for
//! global context, and a plain-convolution decoder with skip connections
//! ending in a 1-channel logit head.
//!
//! The channel ladder doubles per level from `base_width` (32 -> 64 -> 128
//! -> 256 -> 512 at the defaults), with exactly `depth` 2x2 maxpool
//! downsamplings and the mirror-image number of bilinear upsamplings.

use crate::cdc::CdcLayer;
use crate::ffc::FfcResidualBlock;
use crate::nn::{BatchNorm2d, BufferSet, ConvLayer, Mode, ModelState, ParamSet};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor4};
use crate::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Where the Fourier-convolution chain sits: on the deepest encoder
/// features (cheap, the default) or at full resolution right after the
/// stem block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfcPlacement {
    Bottleneck,
    Stem,
}

/// Architecture hyperparameters. `Default` gives the full model; ablation
/// rows are expressed by zeroing `theta` (plain convolutions) and/or
/// `n_ffc_blocks` (no spectral chain).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UcfConfig {
    pub base_width: usize,
    pub depth: usize,
    pub theta: f64,
    pub n_ffc_blocks: usize,
    pub alpha: f64,
    pub ffc_placement: FfcPlacement,
    pub in_channels: usize,
}

impl Default for UcfConfig {
    fn default() -> Self {
        UcfConfig {
            base_width: 32,
            depth: 4,
            theta: 0.7,
            n_ffc_blocks: 5,
            alpha: 0.5,
            ffc_placement: FfcPlacement::Bottleneck,
            in_channels: 1,
        }
    }
}

impl UcfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 4 {
            return Err(Error::config(format!(
                "base_width must be >= 4, got {}",
                self.base_width
            )));
        }
        if self.depth < 1 {
            return Err(Error::config("depth must be >= 1"));
        }
        if !(self.theta.is_finite() && (0.0..=1.0).contains(&self.theta)) {
            return Err(Error::config(format!(
                "theta must lie in [0, 1], got {}",
                self.theta
            )));
        }
        if self.n_ffc_blocks > 0 && !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.in_channels < 1 {
            return Err(Error::config("in_channels must be >= 1"));
        }
        Ok(())
    }

    /// Channel count at encoder level `i` (0 = full resolution).
    pub fn width_at(&self, i: usize) -> usize {
        self.base_width << i
    }
}

/// Encoder block: 3x3 conv and a central-difference conv, each with
/// batchnorm + ReLU, plus a 1x1 convolution on the input so the residual
/// matches the block's output channels.
#[derive(Debug, Clone)]
pub struct CdcResidualBlock {
    pub conv: ConvLayer,
    pub bn1: BatchNorm2d,
    pub cdc: CdcLayer,
    pub bn2: BatchNorm2d,
    pub res: ConvLayer,
}

impl CdcResidualBlock {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        bufs: &mut BufferSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        theta: f64,
    ) -> Result<Self> {
        let conv = ConvLayer::new(params, rng, &format!("{name}.conv"), c_in, c_out, 3, 1, 1, false);
        let bn1 = BatchNorm2d::new(params, bufs, &format!("{name}.bn1"), c_out);
        let cdc = CdcLayer::new(
            params,
            rng,
            &format!("{name}.cdc"),
            c_out,
            c_out,
            3,
            1,
            1,
            false,
            theta,
        )?;
        let bn2 = BatchNorm2d::new(params, bufs, &format!("{name}.bn2"), c_out);
        let res = ConvLayer::new(params, rng, &format!("{name}.res"), c_in, c_out, 1, 1, 0, true);
        Ok(CdcResidualBlock {
            conv,
            bn1,
            cdc,
            bn2,
            res,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        bufs: &mut BufferSet<S>,
        mode: Mode,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = self.conv.forward(tape, x)?;
        h = self.bn1.forward(tape, bufs, mode, h)?;
        h = tape.relu(h);
        h = self.cdc.forward(tape, h)?;
        h = self.bn2.forward(tape, bufs, mode, h)?;
        h = tape.relu(h);
        let r = self.res.forward(tape, x)?;
        tape.add(h, r)
    }
}

/// Decoder block: two 3x3 convolutions with batchnorm + ReLU and a 1x1
/// residual convolution for channel alignment.
#[derive(Debug, Clone)]
pub struct PlainResidualBlock {
    pub conv1: ConvLayer,
    pub bn1: BatchNorm2d,
    pub conv2: ConvLayer,
    pub bn2: BatchNorm2d,
    pub res: ConvLayer,
}

impl PlainResidualBlock {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        bufs: &mut BufferSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let conv1 = ConvLayer::new(params, rng, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, false);
        let bn1 = BatchNorm2d::new(params, bufs, &format!("{name}.bn1"), c_out);
        let conv2 = ConvLayer::new(params, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false);
        let bn2 = BatchNorm2d::new(params, bufs, &format!("{name}.bn2"), c_out);
        let res = ConvLayer::new(params, rng, &format!("{name}.res"), c_in, c_out, 1, 1, 0, true);
        PlainResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            res,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        bufs: &mut BufferSet<S>,
        mode: Mode,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = self.conv1.forward(tape, x)?;
        h = self.bn1.forward(tape, bufs, mode, h)?;
        h = tape.relu(h);
        h = self.conv2.forward(tape, h)?;
        h = self.bn2.forward(tape, bufs, mode, h)?;
        h = tape.relu(h);
        let r = self.res.forward(tape, x)?;
        tape.add(h, r)
    }
}

/// One decoder level: bilinear x2, a 3x3 conv (with norm + ReLU) that
/// halves the channels, concatenation with the encoder skip, then a plain
/// residual block back down to the level's width.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up_conv: ConvLayer,
    pub up_bn: BatchNorm2d,
    pub block: PlainResidualBlock,
}

impl DecoderStage {
    fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        bufs: &mut BufferSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let up_conv = ConvLayer::new(params, rng, &format!("{name}.up"), c_in, c_out, 3, 1, 1, false);
        let up_bn = BatchNorm2d::new(params, bufs, &format!("{name}.up_bn"), c_out);
        let block = PlainResidualBlock::new(params, bufs, rng, &format!("{name}.block"), 2 * c_out, c_out);
        DecoderStage { up_conv, up_bn, block }
    }

    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        bufs: &mut BufferSet<S>,
        mode: Mode,
        x: NodeId,
        skip: NodeId,
    ) -> Result<NodeId> {
        let mut u = tape.upsample_bilinear2(x);
        u = self.up_conv.forward(tape, u)?;
        u = self.up_bn.forward(tape, bufs, mode, u)?;
        u = tape.relu(u);
        let cat = tape.concat_channels(u, skip)?;
        self.block.forward(tape, bufs, mode, cat)
    }
}

/// The assembled network. Layer structs hold ids into a flat, named
/// parameter registry; the registry itself lives in the [`ModelState`]
/// returned alongside the model by [`build`], so optimizers and the
/// gradient checker can own or clone it independently.
#[derive(Debug, Clone)]
pub struct UcfModel {
    pub config: UcfConfig,
    /// Channel widths per encoder level, `depth + 1` entries.
    pub channels: Vec<usize>,
    pub encoder: Vec<CdcResidualBlock>,
    pub ffc_chain: Vec<FfcResidualBlock>,
    pub decoder: Vec<DecoderStage>,
    pub head: ConvLayer,
}

/// Builds the network with deterministic seed-derived initialization:
/// Kaiming-uniform conv kernels, zero biases, unit/zero norm affine.
/// The same config and seed always produce bitwise-identical parameters.
pub fn build<S: Scalar>(config: &UcfConfig, seed: u64) -> Result<(UcfModel, ModelState<S>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ModelState::default();
    let (params, bufs) = (&mut state.params, &mut state.bufs);

    let channels: Vec<usize> = (0..=config.depth).map(|i| config.width_at(i)).collect();

    let mut encoder = Vec::with_capacity(config.depth + 1);
    for (i, &c_out) in channels.iter().enumerate() {
        let c_in = if i == 0 { config.in_channels } else { channels[i - 1] };
        encoder.push(CdcResidualBlock::new(
            params,
            bufs,
            &mut rng,
            &format!("enc{i}"),
            c_in,
            c_out,
            config.theta,
        )?);
    }

    let ffc_width = match config.ffc_placement {
        FfcPlacement::Bottleneck => channels[config.depth],
        FfcPlacement::Stem => channels[0],
    };
    let mut ffc_chain = Vec::with_capacity(config.n_ffc_blocks);
    for i in 0..config.n_ffc_blocks {
        ffc_chain.push(FfcResidualBlock::new(
            params,
            bufs,
            &mut rng,
            &format!("ffc{i}"),
            ffc_width,
            config.alpha,
        )?);
    }

    // Decoder stages from deepest to shallowest; dec{i} produces level i.
    let mut decoder = Vec::with_capacity(config.depth);
    for i in (0..config.depth).rev() {
        decoder.push(DecoderStage::new(
            params,
            bufs,
            &mut rng,
            &format!("dec{i}"),
            channels[i + 1],
            channels[i],
        ));
    }

    let head = ConvLayer::new(params, &mut rng, "head", channels[0], 1, 1, 1, 0, true);

    let model = UcfModel {
        config: config.clone(),
        channels,
        encoder,
        ffc_chain,
        decoder,
        head,
    };
    Ok((model, state))
}

/// Total scalar parameter count of a built model.
pub fn parameter_count<S: Scalar>(state: &ModelState<S>) -> usize {
    state.params.total_elements()
}

impl UcfModel {
    /// Runs the network on a node already on the tape. Input must be
    /// (n, in_channels, h, w) with h and w divisible by 2^depth.
    pub fn forward_on<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        bufs: &mut BufferSet<S>,
        mode: Mode,
        x: NodeId,
    ) -> Result<NodeId> {
        let [_, c, h, w] = tape.shape(x);
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = 1usize << self.config.depth;
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} not divisible by 2^depth; pad spatial size to a multiple of {m}"
            )));
        }

        let mut cur = self.encoder[0].forward(tape, bufs, mode, x)?;
        if self.config.ffc_placement == FfcPlacement::Stem {
            for blk in &self.ffc_chain {
                cur = blk.forward(tape, bufs, mode, cur)?;
            }
        }
        let mut skips = vec![cur];
        for enc in &self.encoder[1..] {
            let pooled = tape.maxpool2(cur)?;
            cur = enc.forward(tape, bufs, mode, pooled)?;
            skips.push(cur);
        }
        if self.config.ffc_placement == FfcPlacement::Bottleneck {
            for blk in &self.ffc_chain {
                cur = blk.forward(tape, bufs, mode, cur)?;
            }
        }
        // decoder[j] lifts level depth-j to depth-j-1; skip index matches.
        for (j, stage) in self.decoder.iter().enumerate() {
            let skip = skips[self.config.depth - 1 - j];
            cur = stage.forward(tape, bufs, mode, cur, skip)?;
        }
        self.head.forward(tape, cur)
    }

    /// Convenience forward from a raw tensor: builds a throwaway tape over
    /// the state's parameters and returns the logits by value.
    pub fn forward<S: Scalar>(
        &self,
        state: &mut ModelState<S>,
        mode: Mode,
        x: &Tensor4<S>,
    ) -> Result<Tensor4<S>> {
        let ModelState { params, bufs } = state;
        let mut tape = Tape::new(params);
        let xn = tape.leaf(x.clone());
        let y = self.forward_on(&mut tape, bufs, mode, xn)?;
        Ok(tape.value(y).clone())
    }
}
