//! Reverse-mode automatic differentiation over the kernel set.
//!
//! A [`Tape`] is an ordered record of executed operations. Each builder
//! method runs the forward kernel eagerly, stores the result, and records
//! what it would take to push gradients back through. [`Tape::backward`]
//! then walks the record in exact reverse execution order, accumulating
//! gradients for every node that feeds the loss; gradients of interior
//! nodes are freed as soon as they have been consumed, so peak memory is
//! bounded by the forward activations plus one live gradient per pending
//! branch.
//!
//! Parameter values are not copied onto the tape. A parameter node stores
//! its [`ParamId`] and resolves the value through the borrowed [`ParamSet`],
//! which keeps per-step overhead independent of model size.

use std::collections::BTreeMap;

use crate::nn::{ParamGrads, ParamId, ParamSet};
use crate::{Error, Result};

use super::fft;
use super::kernels as k;
use super::{Scalar, Tensor4};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Value<S> {
    Owned(Tensor4<S>),
    Param(ParamId),
}

enum Op<S> {
    /// Input tensor supplied by the caller; its gradient is retained.
    Leaf,
    /// Reference to a registered parameter; gradient goes to the parameter
    /// table.
    ParamLeaf(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    /// Per-(c_out, c_in) sum of kernel taps, collapsed to a 1x1 kernel.
    KernelSum { w: NodeId },
    /// 1x1 kernels placed at the center tap of an odd k x k kernel.
    EmbedCenter { w1: NodeId, k: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: S },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: k::BnStats<S>,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: Tensor4<S>,
        running_var: Tensor4<S>,
        eps: f64,
    },
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    Upsample2 { x: NodeId },
    ConcatC { a: NodeId, b: NodeId },
    SliceC { x: NodeId, start: usize },
    Rfft2Stack { x: NodeId, w_in: usize },
    Irfft2Unstack { s: NodeId },
    SumAll { x: NodeId },
    BceLoss { z: NodeId, target: Tensor4<S> },
    SoftIouLoss {
        p: NodeId,
        target: Tensor4<S>,
        eps: f64,
    },
}

struct Node<S> {
    value: Value<S>,
    op: Op<S>,
}

/// Result of a backward pass: gradients for leaf inputs (by node id) and
/// for every parameter the forward touched.
#[derive(Debug)]
pub struct Gradients<S> {
    wrt: BTreeMap<usize, Tensor4<S>>,
    params: ParamGrads<S>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a leaf input, if it influenced the loss.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor4<S>> {
        self.wrt.get(&id.0)
    }

    pub fn params(&self) -> &ParamGrads<S> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<S> {
        self.params
    }
}

/// The gradient tape. Borrows the parameter registry read-only for its
/// whole lifetime; running-statistic updates happen outside, on the
/// separately owned buffer set.
pub struct Tape<'p, S> {
    params: &'p ParamSet<S>,
    nodes: Vec<Node<S>>,
}

fn add_into<S: Scalar>(slot: &mut Option<Tensor4<S>>, contribution: Tensor4<S>) {
    match slot {
        None => *slot = Some(contribution),
        Some(t) => {
            debug_assert_eq!(t.shape(), contribution.shape());
            for (a, b) in t.data_mut().iter_mut().zip(contribution.data()) {
                *a += *b;
            }
        }
    }
}

fn hadamard<S: Scalar>(a: &Tensor4<S>, b: &Tensor4<S>) -> Tensor4<S> {
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= bv;
    }
    out
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p ParamSet<S>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Resolves a node's forward value.
    pub fn value(&self, id: NodeId) -> &Tensor4<S> {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(p) => self.params.value(*p),
        }
    }

    pub fn shape(&self, id: NodeId) -> [usize; 4] {
        self.value(id).shape()
    }

    fn push(&mut self, value: Tensor4<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input tensor whose gradient should be retained.
    pub fn leaf(&mut self, x: Tensor4<S>) -> NodeId {
        self.push(x, Op::Leaf)
    }

    /// Records a parameter reference. The value is read from the registry;
    /// the gradient lands in the parameter table of [`Gradients`].
    pub fn param(&mut self, id: ParamId) -> NodeId {
        debug_assert!(self.params.len() > 0, "tape built over an empty registry");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::ParamLeaf(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let y = k::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    pub fn kernel_sum(&mut self, w: NodeId) -> NodeId {
        let y = k::kernel_sum(self.value(w));
        self.push(y, Op::KernelSum { w })
    }

    pub fn embed_center(&mut self, w1: NodeId, k_size: usize) -> Result<NodeId> {
        let [_, _, kh, kw] = self.shape(w1);
        if kh != 1 || kw != 1 {
            return Err(Error::shape(format!(
                "embed_center: expected 1x1 kernels, got {kh}x{kw}"
            )));
        }
        if k_size % 2 == 0 {
            return Err(Error::shape(format!(
                "embed_center: target kernel size must be odd, got {k_size}"
            )));
        }
        let y = k::embed_center(self.value(w1), k_size);
        Ok(self.push(y, Op::EmbedCenter { w1, k: k_size }))
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let mut y = self.value(a).clone();
        for (o, &bv) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += bv;
        }
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "sub")?;
        let mut y = self.value(a).clone();
        for (o, &bv) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= bv;
        }
        Ok(self.push(y, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mul")?;
        let y = hadamard(self.value(a), self.value(b));
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = S::of_f64(c);
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = k::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = k::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x })
    }

    fn check_affine(&self, x: NodeId, t: NodeId, what: &str) -> Result<()> {
        let c = self.shape(x)[1];
        if self.shape(t) != [1, c, 1, 1] {
            return Err(Error::shape(format!(
                "batchnorm: {what} shape {:?} does not match {c} channels",
                self.shape(t)
            )));
        }
        Ok(())
    }

    /// Training-mode batchnorm. Returns the output node plus the batch mean
    /// and population variance per channel, for the caller's running-stat
    /// update.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        self.check_affine(x, gamma, "gamma")?;
        self.check_affine(x, beta, "beta")?;
        let (y, stats) = k::bn_forward_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let mean: Vec<f64> = stats.mean.iter().map(|m| m.as_f64()).collect();
        let var: Vec<f64> = stats
            .inv_std
            .iter()
            .map(|s| {
                let istd = s.as_f64();
                (1.0 / (istd * istd) - eps).max(0.0)
            })
            .collect();
        let id = self.push(
            y,
            Op::BnTrain {
                x,
                gamma,
                beta,
                stats,
            },
        );
        Ok((id, mean, var))
    }

    /// Eval-mode batchnorm against snapshotted running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: Tensor4<S>,
        running_var: Tensor4<S>,
        eps: f64,
    ) -> Result<NodeId> {
        self.check_affine(x, gamma, "gamma")?;
        self.check_affine(x, beta, "beta")?;
        let c = self.shape(x)[1];
        if running_mean.shape() != [1, c, 1, 1] || running_var.shape() != [1, c, 1, 1] {
            return Err(Error::shape(format!(
                "batchnorm: running stats {:?}/{:?} do not match {c} channels",
                running_mean.shape(),
                running_var.shape()
            )));
        }
        let y = k::bn_forward_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            &running_mean,
            &running_var,
            eps,
        );
        Ok(self.push(
            y,
            Op::BnEval {
                x,
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            },
        ))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (y, argmax) = k::maxpool2_forward(self.value(x))?;
        Ok(self.push(y, Op::MaxPool2 { x, argmax }))
    }

    pub fn upsample_bilinear2(&mut self, x: NodeId) -> NodeId {
        let y = k::upsample_bilinear2_forward(self.value(x));
        self.push(y, Op::Upsample2 { x })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = k::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::ConcatC { a, b }))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let y = k::slice_channels(self.value(x), start, len)?;
        Ok(self.push(y, Op::SliceC { x, start }))
    }

    /// Unscaled forward real FFT; real and imaginary planes stacked along
    /// channels (2c channels out, half-spectrum width).
    pub fn rfft2_stack(&mut self, x: NodeId) -> NodeId {
        let w_in = self.shape(x)[3];
        let y = fft::rfft2_stacked(self.value(x));
        self.push(y, Op::Rfft2Stack { x, w_in })
    }

    /// Inverse of the stacked spectrum layout back to an (n, c, h, w) map,
    /// with 1/(h*w) scaling.
    pub fn irfft2_unstack(&mut self, s: NodeId, hw: (usize, usize)) -> Result<NodeId> {
        let y = fft::irfft2_stacked(self.value(s), hw)?;
        Ok(self.push(y, Op::Irfft2Unstack { s }))
    }

    /// Sum of all entries as a (1, 1, 1, 1) scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = k::sum_all(self.value(x));
        let y = Tensor4::full([1, 1, 1, 1], S::of_f64(s));
        self.push(y, Op::SumAll { x })
    }

    /// Mean of all entries, composed from sum and scale.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean binary cross-entropy on logits, as a scalar node. Targets must
    /// be exactly 0 or 1.
    pub fn bce_loss(&mut self, z: NodeId, target: &Tensor4<S>) -> Result<NodeId> {
        crate::nn::check_binary(target, "bce targets")?;
        let l = k::bce_with_logits(self.value(z), target)?;
        let y = Tensor4::full([1, 1, 1, 1], S::of_f64(l));
        Ok(self.push(
            y,
            Op::BceLoss {
                z,
                target: target.clone(),
            },
        ))
    }

    /// Soft IoU loss on probabilities, pooled over the whole batch, as a
    /// scalar node. Probabilities are assumed to lie in [0, 1] (the model
    /// head produces them through a sigmoid); targets must be binary.
    pub fn soft_iou_loss(&mut self, p: NodeId, target: &Tensor4<S>, eps: f64) -> Result<NodeId> {
        crate::nn::check_binary(target, "soft IoU targets")?;
        let l = k::soft_iou(self.value(p), target, eps)?;
        let y = Tensor4::full([1, 1, 1, 1], S::of_f64(l));
        Ok(self.push(
            y,
            Op::SoftIouLoss {
                p,
                target: target.clone(),
                eps,
            },
        ))
    }

    /// Runs reverse-mode accumulation from a scalar loss node. Operations
    /// are visited in exact reverse execution order; each node's gradient
    /// is dropped as soon as it has been pushed to its inputs.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        self.backward_impl(loss, None)
    }

    fn backward_impl(&self, loss: NodeId, mut trace: Option<&mut Vec<usize>>) -> Result<Gradients<S>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Grad(format!(
                "backward: node {} not on this tape",
                loss.0
            )));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Grad(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor4<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::full([1, 1, 1, 1], S::one()));

        let mut wrt = BTreeMap::new();
        let mut pgrads = ParamGrads((0..self.params.len()).map(|_| None).collect());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            debug_assert_eq!(g.shape(), self.value(NodeId(i)).shape());
            if let Some(t) = trace.as_deref_mut() {
                t.push(i);
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    wrt.insert(i, g);
                }
                Op::ParamLeaf(p) => {
                    add_into(&mut pgrads.0[p.0], g);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let cg = k::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        b.is_some(),
                        *stride,
                        *padding,
                        &g,
                        true,
                    )?;
                    add_into(&mut grads[x.0], cg.dx.expect("dx requested"));
                    add_into(&mut grads[w.0], cg.dw);
                    if let Some(b) = b {
                        add_into(&mut grads[b.0], cg.db.expect("db requested"));
                    }
                }
                Op::KernelSum { w } => {
                    let dw = k::kernel_sum_backward(&g, self.shape(*w));
                    add_into(&mut grads[w.0], dw);
                }
                Op::EmbedCenter { w1, k: ks } => {
                    let dw = k::embed_center_backward(&g, *ks);
                    add_into(&mut grads[w1.0], dw);
                }
                Op::Add { a, b } => {
                    add_into(&mut grads[a.0], g.clone());
                    add_into(&mut grads[b.0], g);
                }
                Op::Sub { a, b } => {
                    let db = g.map(|v| S::zero() - v);
                    add_into(&mut grads[a.0], g);
                    add_into(&mut grads[b.0], db);
                }
                Op::Mul { a, b } => {
                    let da = hadamard(&g, self.value(*b));
                    let db = hadamard(&g, self.value(*a));
                    add_into(&mut grads[a.0], da);
                    add_into(&mut grads[b.0], db);
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    add_into(&mut grads[x.0], g.map(|v| v * c));
                }
                Op::Relu { x } => {
                    add_into(&mut grads[x.0], k::relu_backward(self.value(*x), &g));
                }
                Op::Sigmoid { x } => {
                    // Uses the saved forward output (this node's value).
                    add_into(&mut grads[x.0], k::sigmoid_backward(self.value(NodeId(i)), &g));
                }
                Op::BnTrain {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let bg = k::bn_backward_train(self.value(*x), self.value(*gamma), stats, &g);
                    add_into(&mut grads[x.0], bg.dx);
                    add_into(&mut grads[gamma.0], bg.dgamma);
                    add_into(&mut grads[beta.0], bg.dbeta);
                }
                Op::BnEval {
                    x,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                } => {
                    let bg = k::bn_backward_eval(
                        self.value(*x),
                        self.value(*gamma),
                        running_mean,
                        running_var,
                        *eps,
                        &g,
                    );
                    add_into(&mut grads[x.0], bg.dx);
                    add_into(&mut grads[gamma.0], bg.dgamma);
                    add_into(&mut grads[beta.0], bg.dbeta);
                }
                Op::MaxPool2 { x, argmax } => {
                    add_into(&mut grads[x.0], k::maxpool2_backward(self.shape(*x), argmax, &g));
                }
                Op::Upsample2 { x } => {
                    add_into(
                        &mut grads[x.0],
                        k::upsample_bilinear2_backward(self.shape(*x), &g),
                    );
                }
                Op::ConcatC { a, b } => {
                    let ca = self.shape(*a)[1];
                    let cb = self.shape(*b)[1];
                    let da = k::slice_channels(&g, 0, ca)?;
                    let db = k::slice_channels(&g, ca, cb)?;
                    add_into(&mut grads[a.0], da);
                    add_into(&mut grads[b.0], db);
                }
                Op::SliceC { x, start } => {
                    let xs = self.shape(*x);
                    let [n, _, h, w] = g.shape();
                    let mut dx = Tensor4::zeros(xs);
                    let len = g.shape()[1];
                    for ni in 0..n {
                        for ci in 0..len {
                            dx.plane_mut(ni, start + ci).copy_from_slice(g.plane(ni, ci));
                        }
                    }
                    let _ = (h, w);
                    add_into(&mut grads[x.0], dx);
                }
                Op::Rfft2Stack { x, w_in } => {
                    add_into(&mut grads[x.0], fft::rfft2_stacked_backward(&g, *w_in));
                }
                Op::Irfft2Unstack { s } => {
                    add_into(&mut grads[s.0], fft::irfft2_stacked_backward(&g));
                }
                Op::SumAll { x } => {
                    let gv = g.data()[0];
                    add_into(&mut grads[x.0], Tensor4::full(self.shape(*x), gv));
                }
                Op::BceLoss { z, target } => {
                    let up = g.data()[0].as_f64();
                    add_into(
                        &mut grads[z.0],
                        k::bce_with_logits_backward(self.value(*z), target, up),
                    );
                }
                Op::SoftIouLoss { p, target, eps } => {
                    let up = g.data()[0].as_f64();
                    add_into(
                        &mut grads[p.0],
                        k::soft_iou_backward(self.value(*p), target, *eps, up),
                    );
                }
            }
        }
        Ok(Gradients {
            wrt,
            params: pgrads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;

    fn t(shape: [usize; 4], data: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_backward_is_ones() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let x = tape.leaf(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum_all(x);
        assert_eq!(tape.value(s).data()[0], 10.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_via_mul_gives_two_x() {
        // f(x) = sum(x^2); at x = (1, 2) the gradient is (2, 4).
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let x = tape.leaf(t([1, 1, 1, 2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        assert_eq!(tape.value(s).data()[0], 5.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0], "d/dx sum(x^2) = 2x");
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let x = tape.leaf(t([1, 1, 1, 2], &[3.0, 5.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn param_gradient_lands_in_param_table() {
        // y = w * x as a 1x1 convolution; dL/dw = sum(x * g) with g = 1.
        let mut params = ParamSet::<f64>::new();
        let w = params.register("w", t([1, 1, 1, 1], &[2.0]), true);
        let mut tape = Tape::new(&params);
        let x = tape.leaf(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let wn = tape.param(w);
        let y = tape.conv2d(x, wn, None, 1, 0).unwrap();
        let s = tape.sum_all(y);
        assert_eq!(tape.value(s).data()[0], 20.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.params().get(w).unwrap().data(), &[10.0], "dw = sum(x)");
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0; 4], "dx = w");
    }

    #[test]
    fn shared_parameter_gradients_sum_across_uses() {
        let mut params = ParamSet::<f64>::new();
        let w = params.register("w", t([1, 1, 1, 1], &[1.5]), true);
        let mut tape = Tape::new(&params);
        let x = tape.leaf(t([1, 1, 1, 2], &[1.0, 2.0]));
        let wn = tape.param(w);
        let y1 = tape.conv2d(x, wn, None, 1, 0).unwrap();
        let y2 = tape.conv2d(x, wn, None, 1, 0).unwrap();
        let y = tape.add(y1, y2).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(
            g.params().get(w).unwrap().data(),
            &[6.0],
            "both uses contribute sum(x) = 3 each"
        );
    }

    #[test]
    fn backward_visits_ops_in_reverse_execution_order() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let x = tape.leaf(t([1, 1, 2, 2], &[1.0, -2.0, 3.0, -4.0]));
        let a = tape.relu(x);
        let b = tape.scale(a, 2.0);
        let c = tape.sigmoid(b);
        let d = tape.mul(c, b).unwrap();
        let s = tape.sum_all(d);
        let mut order = Vec::new();
        tape.backward_impl(s, Some(&mut order)).unwrap();
        let expected: Vec<usize> = (0..tape.len()).rev().collect();
        assert_eq!(order, expected, "reverse of execution order, no skips");
        let _ = (a, b, c, d);
    }

    #[test]
    fn batchnorm_train_reports_batch_statistics() {
        let mut params = ParamSet::<f64>::new();
        let gamma = params.register("g", t([1, 1, 1, 1], &[1.0]), false);
        let beta = params.register("b", t([1, 1, 1, 1], &[0.0]), false);
        let mut tape = Tape::new(&params);
        let x = tape.leaf(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let gn = tape.param(gamma);
        let bn = tape.param(beta);
        let (_, mean, var) = tape.batchnorm_train(x, gn, bn, 1e-5).unwrap();
        assert!((mean[0] - 2.5).abs() < 1e-12);
        assert!((var[0] - 1.25).abs() < 1e-9, "population variance, not sample");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let x = tape.leaf(t([1, 1, 1, 2], &[1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"), "got: {err}");
    }

    #[test]
    fn bce_loss_rejects_non_binary_targets() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let z = tape.leaf(t([1, 1, 1, 2], &[0.0, 0.0]));
        let bad = t([1, 1, 1, 2], &[0.5, 1.0]);
        assert!(tape.bce_loss(z, &bad).is_err());
    }

    #[test]
    fn slice_backward_scatters_into_the_right_channels() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let x = tape.leaf(t([1, 3, 1, 1], &[1.0, 2.0, 3.0]));
        let mid = tape.slice_channels(x, 1, 1).unwrap();
        let s = tape.sum_all(mid);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
