//! Reverse-mode automatic differentiation over a recording tape.
//!
//! A [`Tape`] stores every operation of one forward pass in execution order,
//! so the reversed list is a valid topological order for backward. Leaf
//! gradients accumulate across [`Tape::backward`] calls until
//! [`Tape::zero_grads`].

use std::sync::atomic::{AtomicU64, Ordering};

use crate::ops::{self, BatchNormParams, BatchNormSaved, PoolSpec, RunningStats};
use crate::tensor::{shape_err, Element, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Pool {
        input: Var,
        spec: PoolSpec,
        argmax: Option<Vec<usize>>,
    },
    Concat(Vec<Var>),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape(Var),
    Sum(Var),
    Square(Var),
    MulConst {
        input: Var,
        factor: Tensor<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

/// Recording of one forward pass.
pub struct Tape<T: Element = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Vec<(usize, Var)>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>, TensorError> {
        if v.tape != self.id {
            return Err(TensorError::NoGraph(format!(
                "value {} belongs to tape {}, not tape {}",
                v.index, v.tape, self.id
            )));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| TensorError::NoGraph(format!("no node {} on tape {}", v.index, self.id)))
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var { tape: self.id, index }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a trainable leaf bound to the caller's parameter slot `slot`.
    pub fn param(&mut self, slot: usize, value: Tensor<T>) -> Var {
        let v = self.leaf(value, true);
        self.params.push((slot, v));
        v
    }

    /// `(slot, var)` pairs registered through [`Tape::param`], in order.
    pub fn param_bindings(&self) -> &[(usize, Var)] {
        &self.params
    }

    /// Value of a recorded handle.
    ///
    /// # Panics
    /// If `v` was recorded on a different tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("handle belongs to this tape").value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.node(v).ok().and_then(|n| n.grad.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn any_grad(&self, vars: &[Var]) -> Result<bool, TensorError> {
        let mut any = false;
        for &v in vars {
            any |= self.node(v)?.requires_grad;
        }
        Ok(any)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps)?;
        let bias_value = bias.map(|b| self.node(b).map(|n| &n.value)).transpose()?;
        let out = ops::conv2d(
            &self.node(input)?.value,
            &self.node(weight)?.value,
            bias_value,
            stride,
            padding,
        )?;
        Ok(self.push(out, rg, Op::Conv2d { input, weight, bias, stride, padding }))
    }

    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        params: BatchNormParams,
    ) -> Result<Var, TensorError> {
        let rg = self.any_grad(&[input, gamma, beta])?;
        let (out, saved) = ops::batchnorm2d(
            &self.node(input)?.value,
            &self.node(gamma)?.value,
            &self.node(beta)?.value,
            running,
            params,
        )?;
        Ok(self.push(out, rg, Op::BatchNorm { input, gamma, beta, saved }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TensorError> {
        let n = self.node(input)?;
        let (out, rg) = (ops::relu(&n.value), n.requires_grad);
        Ok(self.push(out, rg, Op::Relu(input)))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var, TensorError> {
        let n = self.node(input)?;
        let (out, rg) = (ops::sigmoid(&n.value), n.requires_grad);
        Ok(self.push(out, rg, Op::Sigmoid(input)))
    }

    pub fn pool2d(&mut self, input: Var, spec: PoolSpec) -> Result<Var, TensorError> {
        let n = self.node(input)?;
        let rg = n.requires_grad;
        let pooled = ops::pool2d_with_indices(&n.value, spec)?;
        Ok(self.push(
            pooled.output,
            rg,
            Op::Pool { input, spec, argmax: pooled.argmax },
        ))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let rg = self.any_grad(inputs)?;
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&values)?;
        Ok(self.push(out, rg, Op::Concat(inputs.to_vec())))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let rg = self.any_grad(&[input, weight, bias])?;
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, rg, Op::Linear { input, weight, bias }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n = self.node(input)?;
        let (out, rg) = (n.value.reshape(shape.to_vec())?, n.requires_grad);
        Ok(self.push(out, rg, Op::Reshape(input)))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        let n = self.node(input)?;
        let (out, rg) = (Tensor::scalar(n.value.sum()), n.requires_grad);
        Ok(self.push(out, rg, Op::Sum(input)))
    }

    pub fn square(&mut self, input: Var) -> Result<Var, TensorError> {
        let n = self.node(input)?;
        let (out, rg) = (n.value.map(|x| x * x), n.requires_grad);
        Ok(self.push(out, rg, Op::Square(input)))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, input: Var, factor: Tensor<T>) -> Result<Var, TensorError> {
        let n = self.node(input)?;
        if n.value.shape() != factor.shape() {
            return Err(shape_err(
                "mul_const",
                format!("{:?} vs {:?}", n.value.shape(), factor.shape()),
            ));
        }
        let data = n.value.data().iter().zip(factor.data()).map(|(&a, &b)| a * b).collect();
        let (out, rg) = (Tensor::new(n.value.shape().to_vec(), data)?, n.requires_grad);
        Ok(self.push(out, rg, Op::MulConst { input, factor }))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var, TensorError> {
        let n = self.node(logits)?;
        let loss = ops::bce_with_logits(&n.value, &targets)?;
        let rg = n.requires_grad;
        Ok(self.push(Tensor::scalar(loss), rg, Op::BceWithLogits { logits, targets }))
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient and
    /// adds the result into the leaves' gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(TensorError::NoGraph(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(TensorError::NoGraph(
                "loss does not depend on any value that requires a gradient".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Tensor::ones(root.value.shape().to_vec()));

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.input_grads(i, &g)?;
            for (var, dg) in contributions {
                if !self.nodes[var.index].requires_grad {
                    continue;
                }
                debug_assert!(var.index < i, "inputs precede their consumers");
                accumulate(&mut grads[var.index], dg);
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                accumulate(&mut self.nodes[i].grad, g);
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, TensorError> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride, padding } => {
                let grads = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    bias.is_some(),
                    *stride,
                    *padding,
                    g,
                    self.requires_grad(*input),
                )?;
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                out.push((*weight, grads.weight));
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    out.push((*b, db));
                }
            }
            Op::BatchNorm { input, gamma, beta, saved } => {
                let (dx, dgamma, dbeta) = ops::batchnorm2d_backward(saved, self.value(*gamma), g)?;
                out.extend([(*input, dx), (*gamma, dgamma), (*beta, dbeta)]);
            }
            Op::Relu(x) => out.push((*x, ops::relu_backward(self.value(*x), g))),
            Op::Sigmoid(x) => out.push((*x, ops::sigmoid_backward(&node.value, g))),
            Op::Pool { input, spec, argmax } => {
                let dx = ops::pool2d_backward(self.value(*input).shape(), *spec, argmax.as_deref(), g)?;
                out.push((*input, dx));
            }
            Op::Concat(inputs) => {
                let widths: Vec<usize> = inputs.iter().map(|&v| self.value(v).shape()[1]).collect();
                let parts = ops::split_channels(g, &widths)?;
                out.extend(inputs.iter().copied().zip(parts));
            }
            Op::Linear { input, weight, bias } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*input), self.value(*weight), g)?;
                out.extend([(*input, dx), (*weight, dw), (*bias, db)]);
            }
            Op::Reshape(x) => out.push((*x, g.reshape(self.value(*x).shape().to_vec())?)),
            Op::Sum(x) => {
                let s = g.data()[0];
                out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), s)));
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let two = T::one() + T::one();
                let data = xv.data().iter().zip(g.data()).map(|(&a, &d)| two * a * d).collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::MulConst { input, factor } => {
                let data = factor.data().iter().zip(g.data()).map(|(&f, &d)| f * d).collect();
                out.push((*input, Tensor::new(factor.shape().to_vec(), data)?));
            }
            Op::BceWithLogits { logits, targets } => {
                let dx = ops::bce_with_logits_backward(self.value(*logits), targets, g.data()[0])?;
                out.push((*logits, dx));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
    }
}

/// The operations a network forward pass needs, implemented both by the
/// recording [`Tape`] and by the non-recording [`Eager`] executor.
pub trait Recorder<T: Element> {
    type Node: Clone;

    fn input(&mut self, value: Tensor<T>) -> Self::Node;
    /// Parameter tensor stored in the caller's slot `slot`.
    fn param(&mut self, slot: usize, value: &Tensor<T>) -> Self::Node;
    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor<T>;

    fn conv2d(
        &mut self,
        input: &Self::Node,
        weight: &Self::Node,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Node, TensorError>;
    fn batchnorm2d(
        &mut self,
        input: &Self::Node,
        gamma: &Self::Node,
        beta: &Self::Node,
        running: &mut RunningStats<T>,
        params: BatchNormParams,
    ) -> Result<Self::Node, TensorError>;
    fn relu(&mut self, input: &Self::Node) -> Result<Self::Node, TensorError>;
    fn pool2d(&mut self, input: &Self::Node, spec: PoolSpec) -> Result<Self::Node, TensorError>;
    fn concat_channels(&mut self, inputs: &[Self::Node]) -> Result<Self::Node, TensorError>;
    fn flatten(&mut self, input: &Self::Node) -> Result<Self::Node, TensorError>;
    fn linear(
        &mut self,
        input: &Self::Node,
        weight: &Self::Node,
        bias: &Self::Node,
    ) -> Result<Self::Node, TensorError>;
}

fn flat_shape(shape: &[usize]) -> Vec<usize> {
    vec![shape[0], shape[1..].iter().product()]
}

impl<T: Element> Recorder<T> for Tape<T> {
    type Node = Var;

    fn input(&mut self, value: Tensor<T>) -> Var {
        self.constant(value)
    }

    fn param(&mut self, slot: usize, value: &Tensor<T>) -> Var {
        Tape::param(self, slot, value.clone())
    }

    fn value<'a>(&'a self, node: &'a Var) -> &'a Tensor<T> {
        Tape::value(self, *node)
    }

    fn conv2d(&mut self, input: &Var, weight: &Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        Tape::conv2d(self, *input, *weight, None, stride, padding)
    }

    fn batchnorm2d(
        &mut self,
        input: &Var,
        gamma: &Var,
        beta: &Var,
        running: &mut RunningStats<T>,
        params: BatchNormParams,
    ) -> Result<Var, TensorError> {
        Tape::batchnorm2d(self, *input, *gamma, *beta, running, params)
    }

    fn relu(&mut self, input: &Var) -> Result<Var, TensorError> {
        Tape::relu(self, *input)
    }

    fn pool2d(&mut self, input: &Var, spec: PoolSpec) -> Result<Var, TensorError> {
        Tape::pool2d(self, *input, spec)
    }

    fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        Tape::concat_channels(self, inputs)
    }

    fn flatten(&mut self, input: &Var) -> Result<Var, TensorError> {
        let shape = flat_shape(self.value(*input).shape());
        self.reshape(*input, &shape)
    }

    fn linear(&mut self, input: &Var, weight: &Var, bias: &Var) -> Result<Var, TensorError> {
        Tape::linear(self, *input, *weight, *bias)
    }
}

/// Executes operations immediately without recording anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Element> Recorder<T> for Eager {
    type Node = Tensor<T>;

    fn input(&mut self, value: Tensor<T>) -> Tensor<T> {
        value
    }

    fn param(&mut self, _slot: usize, value: &Tensor<T>) -> Tensor<T> {
        value.clone()
    }

    fn value<'a>(&'a self, node: &'a Tensor<T>) -> &'a Tensor<T> {
        node
    }

    fn conv2d(&mut self, input: &Tensor<T>, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>, TensorError> {
        ops::conv2d(input, weight, None, stride, padding)
    }

    fn batchnorm2d(
        &mut self,
        input: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running: &mut RunningStats<T>,
        params: BatchNormParams,
    ) -> Result<Tensor<T>, TensorError> {
        ops::batchnorm2d(input, gamma, beta, running, params).map(|(y, _)| y)
    }

    fn relu(&mut self, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        Ok(ops::relu(input))
    }

    fn pool2d(&mut self, input: &Tensor<T>, spec: PoolSpec) -> Result<Tensor<T>, TensorError> {
        ops::pool2d(input, spec)
    }

    fn concat_channels(&mut self, inputs: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        let refs: Vec<&Tensor<T>> = inputs.iter().collect();
        ops::concat_channels(&refs)
    }

    fn flatten(&mut self, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        input.reshape(flat_shape(input.shape()))
    }

    fn linear(&mut self, input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        ops::linear(input, weight, bias)
    }
}
