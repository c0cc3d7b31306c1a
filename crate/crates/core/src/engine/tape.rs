use std::collections::HashMap;

use crate::engine::ops::{conv, filter, norm, pointwise, shape, warp};
use crate::engine::{GradStore, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// What a recorded value is, for gradient bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Parameter,
    Intermediate,
    Input,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: conv::Conv2dGeometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: conv::Conv2dGeometry,
    },
    Warp {
        input: Var,
        u: Var,
        v: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Scale(Var, T),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    SoftmaxChannels(Var),
    LocalFilter {
        weights: Var,
        frame: Var,
        size: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Sum(Var),
    WeightedSquaredError {
        pred: Var,
        target: Tensor<T>,
        weights: Tensor<T>,
    },
    WeightedAbsError {
        pred: Var,
        target: Tensor<T>,
        weights: Tensor<T>,
    },
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) role: Role,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<ParamId>,
}

/// Append-only record of a forward computation, replayed in reverse by
/// [`Tape::backward`].
pub struct Tape<T: Scalar = f64> {
    pub(crate) nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant input that receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, Role::Input, false)
    }

    /// Record an input whose gradient is wanted (gradient checks, saliency).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, Role::Input, true)
    }

    /// Bind a stored parameter; binding the same id twice returns the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&var) = self.bound.get(&id) {
            return var;
        }
        let var = self.leaf(store.get(id).clone(), Role::Parameter, true);
        self.nodes[var.0].param = Some(id);
        self.bound.insert(id, var);
        var
    }

    fn leaf(&mut self, value: Tensor<T>, role: Role, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            role,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            role: Role::Intermediate,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn role(&self, var: Var) -> Role {
        self.nodes[var.0].role
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be a scalar, got shape {:?}", out.shape()),
            ));
        }
        self.backward_with(output, Tensor::ones(out.shape()))
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed shape {:?} does not match output shape {:?}",
                    seed.shape(),
                    self.shape(output)
                ),
            ));
        }
        let mut acc = GradAcc {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            wants: self.nodes.iter().map(|n| n.requires_grad).collect(),
        };
        acc.grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(gout) = acc.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(idx, &gout, &mut acc);
            }
            // Only leaf cotangents are kept; intermediates are released as we go.
            if matches!(node.op, Op::Leaf) {
                acc.grads[idx] = Some(gout);
            }
        }
        Ok(Gradients { grads: acc.grads })
    }

    fn backward_node(&self, idx: usize, gout: &Tensor<T>, acc: &mut GradAcc<T>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => conv::conv2d_backward(self, *input, *weight, *bias, *geom, gout, acc),
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => conv::conv_transpose2d_backward(self, *input, *weight, *bias, *geom, gout, acc),
            Op::Warp { input, u, v } => warp::warp_backward(self, *input, *u, *v, gout, acc),
            Op::Add(a, b) => {
                acc.accumulate(*a, gout);
                acc.accumulate(*b, gout);
            }
            Op::Sub(a, b) => {
                acc.accumulate(*a, gout);
                acc.accumulate_map(*b, gout.shape(), |g| {
                    for (d, &s) in g.iter_mut().zip(gout.data()) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc.accumulate_map(*a, gout.shape(), |g| {
                    for ((d, &s), &o) in g.iter_mut().zip(gout.data()).zip(bv) {
                        *d += s * o;
                    }
                });
                acc.accumulate_map(*b, gout.shape(), |g| {
                    for ((d, &s), &o) in g.iter_mut().zip(gout.data()).zip(av) {
                        *d += s * o;
                    }
                });
            }
            Op::OneMinus(a) => acc.accumulate_map(*a, gout.shape(), |g| {
                for (d, &s) in g.iter_mut().zip(gout.data()) {
                    *d -= s;
                }
            }),
            Op::Scale(a, factor) => acc.accumulate_map(*a, gout.shape(), |g| {
                for (d, &s) in g.iter_mut().zip(gout.data()) {
                    *d += s * *factor;
                }
            }),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc.accumulate_map(*a, gout.shape(), |g| {
                    for ((d, &s), &y) in g.iter_mut().zip(gout.data()).zip(y) {
                        *d += s * y * (T::one() - y);
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                acc.accumulate_map(*a, gout.shape(), |g| {
                    for ((d, &s), &x) in g.iter_mut().zip(gout.data()).zip(x) {
                        *d += if x >= T::zero() { s } else { s * *slope };
                    }
                });
            }
            Op::Concat { inputs, axis } => shape::concat_backward(self, inputs, *axis, gout, acc),
            Op::Slice { input, axis, start } => {
                shape::slice_backward(self, *input, *axis, *start, gout, acc)
            }
            Op::SoftmaxChannels(a) => pointwise::softmax_channels_backward(node, *a, gout, acc),
            Op::LocalFilter {
                weights,
                frame,
                size,
            } => filter::local_filter_backward(self, *weights, *frame, *size, gout, acc),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => norm::batch_norm_backward(
                self,
                *input,
                *gamma,
                *beta,
                normalized,
                inv_std,
                *batch_stats,
                gout,
                acc,
            ),
            Op::Sum(a) => {
                let s = gout.item();
                acc.accumulate_map(*a, self.shape(*a), |g| {
                    for d in g.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::WeightedSquaredError {
                pred,
                target,
                weights,
            } => {
                let s = gout.item();
                let p = self.value(*pred).data();
                acc.accumulate_map(*pred, target.shape(), |g| {
                    let two = T::one() + T::one();
                    for (((d, &p), &t), &w) in
                        g.iter_mut().zip(p).zip(target.data()).zip(weights.data())
                    {
                        *d += s * two * w * (p - t);
                    }
                });
            }
            Op::WeightedAbsError {
                pred,
                target,
                weights,
            } => {
                let s = gout.item();
                let p = self.value(*pred).data();
                acc.accumulate_map(*pred, target.shape(), |g| {
                    for (((d, &p), &t), &w) in
                        g.iter_mut().zip(p).zip(target.data()).zip(weights.data())
                    {
                        let r = p - t;
                        if r > T::zero() {
                            *d += s * w;
                        } else if r < T::zero() {
                            *d -= s * w;
                        }
                    }
                });
            }
        }
    }

    /// Collect parameter gradients in store order; parameters not reached by
    /// the backward pass (or never bound) get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>, store: &ParamStore<T>) -> GradStore<T> {
        let mut out = GradStore::zeros_like(store);
        for (&id, &var) in &self.bound {
            if let Some(g) = grads.get(var) {
                out.get_mut(id).add_assign(g);
            }
        }
        out
    }
}

/// Gradient accumulator threaded through the reverse pass.
pub(crate) struct GradAcc<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    wants: Vec<bool>,
}

impl<T: Scalar> GradAcc<T> {
    pub(crate) fn wants(&self, var: Var) -> bool {
        self.wants[var.0]
    }

    pub(crate) fn accumulate(&mut self, var: Var, g: &Tensor<T>) {
        if !self.wants[var.0] {
            return;
        }
        match &mut self.grads[var.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Accumulate an owned gradient without copying when the slot is empty.
    pub(crate) fn accumulate_owned(&mut self, var: Var, g: Tensor<T>) {
        if !self.wants[var.0] {
            return;
        }
        match &mut self.grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Run `f` on the (zero-initialized if absent) gradient buffer of `var`.
    pub(crate) fn accumulate_map(&mut self, var: Var, shape: &[usize], f: impl FnOnce(&mut [T])) {
        if !self.wants[var.0] {
            return;
        }
        let slot = self.grads[var.0].get_or_insert_with(|| Tensor::zeros(shape));
        f(slot.data_mut());
    }
}

/// Result of a reverse pass: the cotangent of every reachable value.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the leaf `var`, or `None` when it does not influence the
    /// output.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, materializing zeros when it is unreachable.
    pub fn wrt(&self, tape: &Tape<T>, var: Var) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(var)))
    }
}

pub(crate) fn check_same_shape<T: Scalar>(
    tape: &Tape<T>,
    op: &'static str,
    a: Var,
    b: Var,
) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            op,
            format!(
                "operand shapes differ: {:?} vs {:?}",
                tape.shape(a),
                tape.shape(b)
            ),
        ));
    }
    Ok(())
}
