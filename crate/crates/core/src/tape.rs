//! Tensor-level reverse-mode tape.
//!
//! Every primitive called through a [`Tape`] stores its output as a new
//! node and, when recording, an op record that points at its input
//! nodes. [`Tape::backward`] walks the records in reverse and returns the
//! gradient of every parameter leaf. Ops are appended in execution order,
//! so the record list is always topologically sorted.
//!
//! A non-recording tape runs the same forward code without keeping op
//! records, and [`Tape::release`] frees intermediate values early.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::ops::activation::Activation;
use crate::ops::batchnorm::{normalize, normalize_backward, BatchStats};
use crate::ops::conv::{conv2d, conv2d_backward, ConvKernel};
use crate::ops::linear::{linear, linear_backward};
use crate::ops::pad::{channel_pad, channel_pad_backward};
use crate::ops::pool::{global_max_pool, maxpool2x2, pool_backward};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// One scaled tensor in a [`Tape::weighted_sum`]: `coeffs[index] · tensor`.
#[derive(Clone, Copy, Debug)]
pub struct Term {
    pub coeffs: NodeId,
    pub index: usize,
    pub tensor: NodeId,
}

enum Op {
    Conv {
        input: NodeId,
        weight: NodeId,
        groups: usize,
        padding: (usize, usize),
        out: NodeId,
    },
    Act {
        kind: Activation,
        input: NodeId,
        out: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    WeightedSum {
        base: NodeId,
        terms: Vec<Term>,
        out: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BatchStats,
        coupled: bool,
        out: NodeId,
    },
    Pool {
        input: NodeId,
        argmax: Vec<usize>,
        out: NodeId,
    },
    ChannelPad {
        input: NodeId,
        channels: usize,
        out: NodeId,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        out: NodeId,
    },
}

impl Op {
    fn out(&self) -> NodeId {
        match self {
            Op::Conv { out, .. }
            | Op::Act { out, .. }
            | Op::Add { out, .. }
            | Op::WeightedSum { out, .. }
            | Op::BatchNorm { out, .. }
            | Op::Pool { out, .. }
            | Op::ChannelPad { out, .. }
            | Op::Linear { out, .. } => *out,
        }
    }
}

pub struct Tape<S> {
    values: Vec<Option<Tensor4<S>>>,
    requires_grad: Vec<bool>,
    ops: Vec<Op>,
    /// Parameter leaves as (caller key, node).
    params: Vec<(usize, NodeId)>,
    recording: bool,
}

/// Gradients of the parameter leaves, by caller key.
pub struct ParamGradients<S> {
    entries: Vec<(usize, Tensor4<S>)>,
}

impl<S: Scalar> ParamGradients<S> {
    pub fn get(&self, key: usize) -> Option<&Tensor4<S>> {
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, g)| g)
    }

    pub fn into_entries(self) -> Vec<(usize, Tensor4<S>)> {
        self.entries
    }
}

impl<S: Scalar> Tape<S> {
    /// A tape that records ops for a later backward pass.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape used only to evaluate a forward pass.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Tape {
            values: Vec::new(),
            requires_grad: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            recording,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of op records (zero for an inference tape).
    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    /// Fingerprint of every piecewise choice made by the recorded ops:
    /// which ReLU outputs are active and which inputs the max pools
    /// selected. Two forward passes with equal signatures evaluated the
    /// same smooth piece of the network.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for op in &self.ops {
            match op {
                Op::Act {
                    kind: Activation::Relu,
                    out,
                    ..
                } => {
                    if let Some(v) = &self.values[out.0] {
                        for x in v.data() {
                            (*x > S::zero()).hash(&mut h);
                        }
                    }
                }
                Op::Pool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor4<S>, requires_grad: bool) -> NodeId {
        self.values.push(Some(value));
        self.requires_grad.push(requires_grad && self.recording);
        NodeId(self.values.len() - 1)
    }

    fn record(&mut self, op: Op) {
        if self.recording {
            self.ops.push(op);
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor4<S> {
        self.values[id.0]
            .as_ref()
            .expect("tape value read after release")
    }

    pub fn dims(&self, id: NodeId) -> Dims {
        self.value(id).dims()
    }

    /// Drops a value that will not be read again. No-op while recording.
    pub fn release(&mut self, id: NodeId) {
        if !self.recording {
            self.values[id.0] = None;
        }
    }

    /// Input data: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor4<S>) -> NodeId {
        self.push(value, false)
    }

    /// A trainable leaf identified by `key` in the returned gradients.
    pub fn param(&mut self, key: usize, value: Tensor4<S>) -> NodeId {
        let id = self.push(value, true);
        self.params.push((key, id));
        id
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.requires_grad[id.0])
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        groups: usize,
        padding: (usize, usize),
    ) -> Result<NodeId> {
        // The kernel wrapper borrows the weight tensor only for the call.
        let kernel = ConvKernel::new(self.value(weight).clone(), groups)?;
        let y = conv2d(self.value(input), &kernel, padding)?;
        let rg = self.needs(&[input, weight]);
        let out = self.push(y, rg);
        self.record(Op::Conv {
            input,
            weight,
            groups,
            padding,
            out,
        });
        Ok(out)
    }

    pub fn activation(&mut self, kind: Activation, input: NodeId) -> NodeId {
        let y = kind.forward(self.value(input));
        let rg = self.needs(&[input]);
        let out = self.push(y, rg);
        self.record(Op::Act { kind, input, out });
        out
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        let out = self.push(y, rg);
        self.record(Op::Add { a, b, out });
        out
    }

    /// `base + Σ coeffs[index] · tensor`, accumulated in term order.
    pub fn weighted_sum(&mut self, base: NodeId, terms: Vec<Term>) -> NodeId {
        let mut y = self.value(base).clone();
        for t in &terms {
            let c = self.value(t.coeffs).data()[t.index];
            y.add_scaled(self.value(t.tensor), c);
        }
        let mut deps = vec![base];
        deps.extend(terms.iter().flat_map(|t| [t.coeffs, t.tensor]));
        let rg = self.needs(&deps);
        let out = self.push(y, rg);
        self.record(Op::WeightedSum { base, terms, out });
        out
    }

    /// Normalizes with fixed `stats`. `coupled` marks the statistics as
    /// computed from this very input (train mode).
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BatchStats,
        coupled: bool,
    ) -> Result<NodeId> {
        let y = normalize(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            &stats,
        )?;
        let rg = self.needs(&[input, gamma, beta]);
        let out = self.push(y, rg);
        self.record(Op::BatchNorm {
            input,
            gamma,
            beta,
            stats,
            coupled,
            out,
        });
        Ok(out)
    }

    pub fn maxpool2x2(&mut self, input: NodeId) -> NodeId {
        let p = maxpool2x2(self.value(input));
        self.pooled(input, p)
    }

    pub fn global_max_pool(&mut self, input: NodeId) -> NodeId {
        let p = global_max_pool(self.value(input));
        self.pooled(input, p)
    }

    fn pooled(&mut self, input: NodeId, p: crate::ops::pool::Pooled<S>) -> NodeId {
        let rg = self.needs(&[input]);
        let out = self.push(p.output, rg);
        let argmax = if self.recording { p.argmax } else { Vec::new() };
        self.record(Op::Pool { input, argmax, out });
        out
    }

    pub fn channel_pad(&mut self, input: NodeId, target: usize) -> Result<NodeId> {
        let channels = self.dims(input).c;
        let y = channel_pad(self.value(input), target)?;
        let rg = self.needs(&[input]);
        let out = self.push(y, rg);
        self.record(Op::ChannelPad {
            input,
            channels,
            out,
        });
        Ok(out)
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let y = linear(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.needs(&[input, weight, bias]);
        let out = self.push(y, rg);
        self.record(Op::Linear {
            input,
            weight,
            bias,
            out,
        });
        Ok(out)
    }

    /// Propagates `seed` (the gradient of a scalar loss with respect to
    /// `root`) back to every parameter leaf.
    pub fn backward(&self, root: NodeId, seed: Tensor4<S>) -> Result<ParamGradients<S>> {
        if !self.recording {
            return Err(Error::Internal("backward on an inference tape".into()));
        }
        if seed.dims() != self.dims(root) {
            return Err(Error::Internal(format!(
                "seed {} does not match root {}",
                seed.dims(),
                self.dims(root)
            )));
        }
        let mut grads: Vec<Option<Tensor4<S>>> = vec![None; self.values.len()];
        grads[root.0] = Some(seed);
        for op in self.ops.iter().rev() {
            let Some(g) = grads[op.out().0].take() else {
                continue;
            };
            self.backward_op(op, &g, &mut grads)?;
        }
        let entries = self
            .params
            .iter()
            .map(|&(key, id)| {
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor4::zeros(self.dims(id)));
                (key, g)
            })
            .collect();
        Ok(ParamGradients { entries })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4<S>>], id: NodeId, g: Tensor4<S>) {
        if !self.requires_grad[id.0] {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_op(&self, op: &Op, g: &Tensor4<S>, grads: &mut [Option<Tensor4<S>>]) -> Result<()> {
        match op {
            Op::Conv {
                input,
                weight,
                groups,
                padding,
                ..
            } => {
                let kernel = ConvKernel::new(self.value(*weight).clone(), *groups)?;
                let need_input = self.requires_grad[input.0];
                let (gi, gw) = conv2d_backward(g, self.value(*input), &kernel, *padding, need_input)?;
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, gi);
                }
                self.accumulate(grads, *weight, gw);
            }
            Op::Act { kind, input, out } => {
                let gi = kind.backward(g, self.value(*input), self.value(*out));
                self.accumulate(grads, *input, gi);
            }
            Op::Add { a, b, .. } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::WeightedSum { base, terms, .. } => {
                self.accumulate(grads, *base, g.clone());
                for t in terms {
                    let coeffs = self.value(t.coeffs);
                    let c = coeffs.data()[t.index];
                    if self.requires_grad[t.tensor.0] {
                        self.accumulate(grads, t.tensor, g.map(|v| v * c));
                    }
                    if self.requires_grad[t.coeffs.0] {
                        let dot: f64 = g
                            .data()
                            .iter()
                            .zip(self.value(t.tensor).data())
                            .map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy())
                            .sum();
                        let mut gc = Tensor4::zeros(coeffs.dims());
                        gc.data_mut()[t.index] = S::from_f64_lossy(dot);
                        self.accumulate(grads, t.coeffs, gc);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                stats,
                coupled,
                ..
            } => {
                let gamma_v = self.value(*gamma);
                let r = normalize_backward(g, self.value(*input), gamma_v.data(), stats, *coupled)?;
                self.accumulate(grads, *input, r.input);
                let dims = gamma_v.dims();
                self.accumulate(grads, *gamma, Tensor4::from_vec(dims, r.gamma)?);
                self.accumulate(grads, *beta, Tensor4::from_vec(dims, r.beta)?);
            }
            Op::Pool { input, argmax, .. } => {
                let gi = pool_backward(g, argmax, self.dims(*input));
                self.accumulate(grads, *input, gi);
            }
            Op::ChannelPad {
                input, channels, ..
            } => {
                let gi = channel_pad_backward(g, *channels);
                self.accumulate(grads, *input, gi);
            }
            Op::Linear {
                input,
                weight,
                bias,
                ..
            } => {
                let r = linear_backward(g, self.value(*input), self.value(*weight))?;
                self.accumulate(grads, *input, r.input);
                self.accumulate(grads, *weight, r.weights);
                self.accumulate(grads, *bias, r.bias);
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::batchnorm::batch_stats;

    #[test]
    fn records_in_execution_order() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::full(Dims::new(1, 1, 2, 2), 1.0));
        let w = tape.param(0, Tensor4::full(Dims::new(1, 1, 1, 1), 2.0));
        let c = tape.conv2d(x, w, 1, (0, 0)).unwrap();
        let a = tape.activation(Activation::Relu, c);
        let s = tape.add(a, x);
        assert_eq!(tape.op_count(), 3);
        assert_eq!(tape.value(s).data(), &[3.0; 4]);
        let grads = tape
            .backward(s, Tensor4::full(Dims::new(1, 1, 2, 2), 1.0))
            .unwrap();
        // d/dw Σ relu(w·x) = Σ x = 4
        assert_eq!(grads.get(0).unwrap().data(), &[4.0]);
    }

    #[test]
    fn inference_tape_frees_and_refuses_backward() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor4::full(Dims::new(2, 1, 1, 1), 1.0));
        let y = tape.activation(Activation::Tanh, x);
        tape.release(x);
        assert!(tape.values[x.0].is_none());
        assert_eq!(tape.op_count(), 0);
        assert!(tape.backward(y, Tensor4::zeros(Dims::new(2, 1, 1, 1))).is_err());
    }

    #[test]
    fn untouched_param_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(7, Tensor4::full(Dims::new(2, 1, 1, 1), 1.0));
        let unused = tape.param(8, Tensor4::full(Dims::new(1, 1, 1, 3), 1.0));
        let _ = unused;
        let gamma = tape.constant(Tensor4::full(Dims::new(1, 1, 1, 1), 1.0));
        let beta = tape.constant(Tensor4::zeros(Dims::new(1, 1, 1, 1)));
        let stats = batch_stats(tape.value(x), 1e-5).unwrap();
        let y = tape.batchnorm(x, gamma, beta, stats, true).unwrap();
        let grads = tape.backward(y, Tensor4::full(Dims::new(2, 1, 1, 1), 1.0)).unwrap();
        assert_eq!(grads.get(8).unwrap().data(), &[0.0; 3]);
        assert!(grads.get(7).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }
}
