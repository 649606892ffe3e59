//! Reverse-mode differentiation over a recorded op sequence.
//!
//! Ops are recorded in execution order; `backward` walks them strictly in
//! reverse and accumulates vector-Jacobian products additively. Gradients of
//! any recorded intermediate are retrievable afterwards, which Grad-CAM
//! relies on.

use super::ops::{
    self, activation_backward, conv2d_backward, cross_entropy_backward, elementwise_backward,
    linear_backward, norm_channels_backward, spatial_mean_backward,
};
use super::{
    Activation, BinaryKind, ConvSpec, ParamId, ParamStore, Result, Scalar, Tensor, TensorError,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    NormChannels {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    SliceChannels {
        x: Var,
        offset: usize,
    },
    ConcatChannels {
        parts: Vec<Var>,
    },
    SpatialMean {
        x: Var,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        epsilon: f64,
    },
    SumAll {
        x: Var,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
}

/// Recorded op applications plus their outputs.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::InvalidVar {
                index: v.0,
                len: self.nodes.len(),
            })
        }
    }

    /// Value of a recorded variable.
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Records a constant (non-parameter) input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Records a parameter leaf; its gradient can later be folded back into
    /// the store with [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.push(value, Op::Leaf { param: Some(id) })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let out = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
        )?;
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = ops::activation(kind, self.value(x))?;
        Ok(self.push(out, Op::Activation { x, kind }))
    }

    pub fn norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let out = ops::norm_channels(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::NormChannels { x, gamma, beta, eps }))
    }

    pub fn slice_channels(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let out = ops::slice_channels(self.value(x), offset, len)?;
        Ok(self.push(out, Op::SliceChannels { x, offset }))
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        self.check(x)?;
        let total: usize = sizes.iter().sum();
        if total != self.value(x).shape().c() || sizes.iter().any(|&s| s == 0) {
            return Err(TensorError::InvalidArgument {
                op: "split_channels",
                detail: format!(
                    "sizes {sizes:?} must be positive and sum to {}",
                    self.value(x).shape().c()
                ),
            });
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &len in sizes {
            out.push(self.slice_channels(x, off, len)?);
            off += len;
        }
        Ok(out)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(
            out,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = ops::spatial_mean(self.value(x))?;
        Ok(self.push(out, Op::SpatialMean { x }))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::elementwise(kind, self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn cross_entropy_smoothed(&mut self, logits: Var, labels: &[usize], epsilon: f64) -> Result<Var> {
        self.check(logits)?;
        let out = ops::cross_entropy_smoothed(self.value(logits), labels, epsilon)?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                epsilon,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = ops::sum_all(self.value(x));
        Ok(self.push(out, Op::SumAll { x }))
    }

    /// Reverse pass from a scalar output. Visits recorded ops in strict
    /// reverse order; gradients accumulate additively.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        self.check(output)?;
        let out_shape = self.value(output).shape();
        if !out_shape.is_scalar() {
            return Err(TensorError::NonScalarOutput {
                shape: out_shape.to_string(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(S::ONE));

        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                Op::Conv2d { x, w, b, spec } => {
                    let (dx, dw, db) =
                        conv2d_backward(self.value(*x), self.value(*w), spec, &dy, b.is_some());
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *w, dw);
                    if let (Some(bv), Some(db)) = (b, db) {
                        add_grad(&mut grads, *bv, db);
                    }
                }
                Op::Activation { x, kind } => {
                    let dx = activation_backward(*kind, self.value(*x), &dy);
                    add_grad(&mut grads, *x, dx);
                }
                Op::NormChannels { x, gamma, beta, eps } => {
                    let (dx, dgamma, dbeta) =
                        norm_channels_backward(self.value(*x), self.value(*gamma), *eps, &dy);
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *gamma, dgamma);
                    add_grad(&mut grads, *beta, dbeta);
                }
                Op::SliceChannels { x, offset } => {
                    let xs = self.value(*x).shape();
                    let hw = xs.h() * xs.w();
                    let ds = dy.shape();
                    let mut dx = Tensor::zeros(xs);
                    let dst = dx.data_mut();
                    for ni in 0..xs.n() {
                        let src_base = ni * ds.c() * hw;
                        let dst_base = (ni * xs.c() + offset) * hw;
                        dst[dst_base..dst_base + ds.c() * hw]
                            .copy_from_slice(&dy.data()[src_base..src_base + ds.c() * hw]);
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::ConcatChannels { parts } => {
                    let ds = dy.shape();
                    let hw = ds.h() * ds.w();
                    let mut off = 0;
                    for &p in parts {
                        let ps = self.value(p).shape();
                        let mut dp = Tensor::zeros(ps);
                        {
                            let dst = dp.data_mut();
                            for ni in 0..ps.n() {
                                let src_base = (ni * ds.c() + off) * hw;
                                let dst_base = ni * ps.c() * hw;
                                dst[dst_base..dst_base + ps.c() * hw]
                                    .copy_from_slice(&dy.data()[src_base..src_base + ps.c() * hw]);
                            }
                        }
                        add_grad(&mut grads, p, dp);
                        off += ps.c();
                    }
                }
                Op::SpatialMean { x } => {
                    let dx = spatial_mean_backward(self.value(*x).shape(), &dy);
                    add_grad(&mut grads, *x, dx);
                }
                Op::Binary { kind, a, b } => {
                    let (da, db) = elementwise_backward(*kind, self.value(*a), self.value(*b), &dy);
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = linear_backward(self.value(*x), self.value(*w), &dy);
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *w, dw);
                    add_grad(&mut grads, *b, db);
                }
                Op::CrossEntropy { logits, labels, epsilon } => {
                    let dl = cross_entropy_backward(self.value(*logits), labels, *epsilon, dy.data()[0]);
                    add_grad(&mut grads, *logits, dl);
                }
                Op::SumAll { x } => {
                    let xs = self.value(*x).shape();
                    add_grad(&mut grads, *x, Tensor::full(xs, dy.data()[0]));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds the computed leaf gradients into their parameters' `grad`
    /// buffers, in tape order. Non-trainable parameters are skipped.
    pub fn accumulate_param_grads(&self, grads: &Gradients<S>, store: &mut ParamStore<S>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if !store.get(id).trainable {
                    continue;
                }
                if let Some(g) = &grads.grads[i] {
                    store.get_mut(id).grad.add_assign(g);
                }
            }
        }
    }
}

fn add_grad<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by one backward pass, indexed by tape variable.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the scalar output w.r.t. a recorded variable. `None` if
    /// the variable does not influence the output.
    pub fn of(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
