//! Parameter and buffer registries plus the two stateful layer wrappers
//! (convolution, batchnorm) shared by every block in the model.
//!
//! Parameters live in a flat named registry; layers hold ids into it. The
//! gradient tape borrows the registry read-only during forward/backward and
//! produces a parallel gradient table that is accumulated back afterwards.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{NodeId, Scalar, Tape, Tensor4};
use crate::{Error, Result};

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Handle into a [`BufferSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(pub(crate) usize);

/// A trainable tensor: value plus accumulated gradient. `weight_decay`
/// marks whether AdamW's decoupled decay applies (convolution kernels yes,
/// biases and norm affine parameters no).
#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor4<S>,
    pub grad: Tensor4<S>,
    pub weight_decay: bool,
}

/// Flat registry of named parameters in registration order. Registration
/// order is deterministic (model construction is a fixed traversal), which
/// makes checkpoints and optimizer state well-defined.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor4<S>, weight_decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor4::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            weight_decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor4<S> {
        &self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(S::zero());
        }
    }

    /// Adds tape-produced gradients into the stored `grad` fields.
    /// Repeated calls accumulate.
    pub fn accumulate(&mut self, grads: &ParamGrads<S>) {
        for (i, g) in grads.0.iter().enumerate() {
            if let Some(g) = g {
                let p = &mut self.params[i];
                debug_assert_eq!(p.value.shape(), g.shape());
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }
}

/// Gradient table produced by a backward pass, indexed like the [`ParamSet`]
/// it was computed against. Entries are `None` for parameters the forward
/// never touched.
#[derive(Debug)]
pub struct ParamGrads<S>(pub(crate) Vec<Option<Tensor4<S>>>);

impl<S: Scalar> ParamGrads<S> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor4<S>> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Non-trainable model state (batchnorm running statistics).
#[derive(Debug, Clone, Default)]
pub struct BufferSet<S> {
    buffers: Vec<(String, Tensor4<S>)>,
}

impl<S: Scalar> BufferSet<S> {
    pub fn new() -> Self {
        BufferSet { buffers: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor4<S>) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn value(&self, id: BufferId) -> &Tensor4<S> {
        &self.buffers[id.0].1
    }

    pub fn value_mut(&mut self, id: BufferId) -> &mut Tensor4<S> {
        &mut self.buffers[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4<S>)> {
        self.buffers.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor4<S>)> {
        self.buffers.iter_mut().map(|(n, v)| (n.as_str(), v))
    }
}

/// Trainable state of a model: parameters plus buffers. Cloneable so the
/// gradient checker can probe perturbed copies.
#[derive(Debug, Clone, Default)]
pub struct ModelState<S> {
    pub params: ParamSet<S>,
    pub bufs: BufferSet<S>,
}

/// Forward mode: training uses batch statistics and updates running stats,
/// eval uses the stored running statistics and has no side effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Kaiming-uniform fan-in init for convolution kernels (ReLU gain):
/// U(-b, b) with b = sqrt(6 / fan_in), fan_in = c_in * k * k.
pub fn kaiming_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<S> {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| S::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor4::from_vec_unchecked(shape, data)
}

/// 2-D convolution layer: kernel parameter, optional bias, fixed stride and
/// padding.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
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
    ) -> Self {
        let weight = params.register(
            format!("{name}.weight"),
            kaiming_uniform(rng, [c_out, c_in, k, k]),
            true,
        );
        let bias = bias.then(|| {
            params.register(format!("{name}.bias"), Tensor4::zeros([1, c_out, 1, 1]), false)
        });
        ConvLayer {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: NodeId) -> Result<NodeId> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Batchnorm over (n, h, w) per channel, population variance, with running
/// statistics for eval mode (momentum update in training mode).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        bufs: &mut BufferSet<S>,
        name: &str,
        c: usize,
    ) -> Self {
        let gamma = params.register(format!("{name}.gamma"), Tensor4::full([1, c, 1, 1], S::one()), false);
        let beta = params.register(format!("{name}.beta"), Tensor4::zeros([1, c, 1, 1]), false);
        let running_mean = bufs.register(format!("{name}.running_mean"), Tensor4::zeros([1, c, 1, 1]));
        let running_var = bufs.register(
            format!("{name}.running_var"),
            Tensor4::full([1, c, 1, 1], S::one()),
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        bufs: &mut BufferSet<S>,
        mode: Mode,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = tape.param(self.gamma);
        let beta = tape.param(self.beta);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, self.eps)?;
                let c = mean.len();
                let rm = bufs.value_mut(self.running_mean);
                for i in 0..c {
                    let old = rm.data()[i].as_f64();
                    rm.data_mut()[i] = S::of_f64((1.0 - self.momentum) * old + self.momentum * mean[i]);
                }
                let rv = bufs.value_mut(self.running_var);
                for i in 0..c {
                    let old = rv.data()[i].as_f64();
                    rv.data_mut()[i] = S::of_f64((1.0 - self.momentum) * old + self.momentum * var[i]);
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = bufs.value(self.running_mean).clone();
                let rv = bufs.value(self.running_var).clone();
                tape.batchnorm_eval(x, gamma, beta, rm, rv, self.eps)
            }
        }
    }
}

/// Validates that a tensor holds only exact 0/1 values (binary masks).
pub fn check_binary<S: Scalar>(t: &Tensor4<S>, what: &str) -> Result<()> {
    for &v in t.data() {
        if v != S::zero() && v != S::one() {
            return Err(Error::Numeric(format!(
                "{what}: entry {v} outside {{0, 1}}"
            )));
        }
    }
    Ok(())
}
