//! Recorded computation graph with reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only, topologically ordered list of primitive
//! applications. Leaves hold input tensors (named leaves are parameters);
//! every other node stores its operator, input node ids, and whatever the
//! backward pass needs. [`Tape::backward`] walks the list in reverse and
//! accumulates gradients, summing across fan-out. A tape is confined to one
//! thread and its recorded forward pass can be replayed bit-for-bit.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::ops::{self, Activation, BnBatchStats, BnSaved, RunningStats};
use super::Tensor;

pub type NodeId = usize;

enum Op {
    Leaf {
        name: Option<String>,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    BnTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        saved: BnSaved,
    },
    BnEval {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running: RunningStats,
    },
    MaxPool {
        input: NodeId,
        window: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Act {
        input: NodeId,
        kind: Activation,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Sum {
        input: NodeId,
    },
    Bce {
        probs: NodeId,
        labels: Tensor,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    /// True when any transitive leaf input requires gradients.
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to named leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    by_name: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn into_map(self) -> HashMap<String, Tensor> {
        self.by_name
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Record an unnamed constant leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let needs = value.requires_grad();
        self.push(Op::Leaf { name: None }, value, needs)
    }

    /// Record a named leaf; gradients are reported under this name when the
    /// tensor requires gradients.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let needs = value.requires_grad();
        self.push(
            Op::Leaf {
                name: Some(name.into()),
            },
            value,
            needs,
        )
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let value = ops::conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            pad,
        )?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            value,
            needs,
        ))
    }

    /// Train-mode batch norm; also returns the batch statistics so the caller
    /// can fold them into running stats.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BnBatchStats)> {
        let (value, saved, stats) =
            ops::bn_train_forward(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            Op::BnTrain {
                input,
                gamma,
                beta,
                eps,
                saved,
            },
            value,
            needs,
        );
        Ok((id, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &RunningStats,
        eps: f64,
    ) -> Result<NodeId> {
        let value = ops::bn_eval_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running,
            eps,
        )?;
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::BnEval {
                input,
                gamma,
                beta,
                eps,
                running: running.clone(),
            },
            value,
            needs,
        ))
    }

    pub fn max_pool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (value, argmax) = ops::max_pool2d_with_argmax(self.value(input), window, stride)?;
        let needs = self.needs(input);
        Ok(self.push(
            Op::MaxPool {
                input,
                window,
                stride,
                argmax,
            },
            value,
            needs,
        ))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::global_avg_pool(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(Op::GlobalAvgPool { input }, value, needs))
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
            },
            value,
            needs,
        ))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> NodeId {
        let value = ops::activation(self.value(input), kind);
        let needs = self.needs(input);
        self.push(Op::Act { input, kind }, value, needs)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let value = ops::add(self.value(lhs), self.value(rhs))?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(Op::Add { lhs, rhs }, value, needs))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = ops::sum_all(self.value(input));
        let needs = self.needs(input);
        self.push(Op::Sum { input }, value, needs)
    }

    /// Mean binary cross entropy against constant labels.
    pub fn bce_loss(&mut self, probs: NodeId, labels: &Tensor) -> Result<NodeId> {
        let value = ops::bce(self.value(probs), labels)?;
        let needs = self.needs(probs);
        Ok(self.push(
            Op::Bce {
                probs,
                labels: labels.clone(),
            },
            value,
            needs,
        ))
    }

    /// Reverse pass from a scalar loss node. Returns dLoss/dP for every named
    /// leaf that requires gradients; gradients sum across fan-out.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(Error::InvalidInput(format!(
                "backward: node {loss} is not on the tape"
            )));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(Tensor::ones(&[1]).expect("scalar"));

        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[id].clone() else {
                continue;
            };
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let (dx, dk, db) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &gout,
                        *stride,
                        *pad,
                    );
                    self.accumulate(&mut grads, *input, dx);
                    self.accumulate(&mut grads, *kernel, dk);
                    self.accumulate(&mut grads, *bias, db);
                }
                Op::BnTrain {
                    input,
                    gamma,
                    beta,
                    saved,
                    ..
                } => {
                    let (dx, dg, db) =
                        ops::bn_train_backward(self.value(*input), self.value(*gamma), saved, &gout);
                    self.accumulate(&mut grads, *input, dx);
                    self.accumulate(&mut grads, *gamma, dg);
                    self.accumulate(&mut grads, *beta, db);
                }
                Op::BnEval {
                    input,
                    gamma,
                    beta,
                    eps,
                    running,
                } => {
                    let (dx, dg, db) = ops::bn_eval_backward(
                        self.value(*input),
                        self.value(*gamma),
                        running,
                        *eps,
                        &gout,
                    );
                    self.accumulate(&mut grads, *input, dx);
                    self.accumulate(&mut grads, *gamma, dg);
                    self.accumulate(&mut grads, *beta, db);
                }
                Op::MaxPool { input, argmax, .. } => {
                    let src = self.value(*input);
                    let dx = ops::max_pool2d_backward(src.len(), src.shape(), argmax, &gout);
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::GlobalAvgPool { input } => {
                    let dx = ops::global_avg_pool_backward(self.value(*input).shape(), &gout);
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let (dx, dw, db) =
                        ops::dense_backward(self.value(*input), self.value(*weight), &gout);
                    self.accumulate(&mut grads, *input, dx);
                    self.accumulate(&mut grads, *weight, dw);
                    self.accumulate(&mut grads, *bias, db);
                }
                Op::Act { input, kind } => {
                    let dx = match kind {
                        Activation::Relu => ops::relu_backward(self.value(*input), &gout),
                        Activation::Sigmoid => ops::sigmoid_backward(&node.value, &gout),
                    };
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Add { lhs, rhs } => {
                    self.accumulate(&mut grads, *lhs, gout.clone());
                    self.accumulate(&mut grads, *rhs, gout);
                }
                Op::Sum { input } => {
                    let src = self.value(*input);
                    let dx = Tensor::full(src.shape(), gout.data()[0]).expect("finite");
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Bce { probs, labels } => {
                    let dx = ops::bce_backward(self.value(*probs), labels, gout.data()[0]);
                    self.accumulate(&mut grads, *probs, dx);
                }
            }
        }

        let mut by_name = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate().take(loss + 1) {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if node.value.requires_grad() {
                    let grad = grads[id]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape()).expect("shape"));
                    by_name.insert(name.clone(), grad);
                }
            }
        }
        Ok(Gradients { by_name })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, grad: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        grads[id] = Some(match grads[id].take() {
            None => grad,
            Some(existing) => ops::add(&existing, &grad).expect("gradient shapes agree"),
        });
    }

    /// Recompute every node's forward value from the recorded leaves. Used to
    /// verify that replaying the tape reproduces recorded activations exactly.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf { .. } => node.value.clone(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => ops::conv2d(
                    &values[*input],
                    &values[*kernel],
                    &values[*bias],
                    *stride,
                    *pad,
                )?,
                Op::BnTrain {
                    input,
                    gamma,
                    beta,
                    eps,
                    ..
                } => {
                    let (v, _, _) =
                        ops::bn_train_forward(&values[*input], &values[*gamma], &values[*beta], *eps)?;
                    v
                }
                Op::BnEval {
                    input,
                    gamma,
                    beta,
                    eps,
                    running,
                } => ops::bn_eval_forward(
                    &values[*input],
                    &values[*gamma],
                    &values[*beta],
                    running,
                    *eps,
                )?,
                Op::MaxPool {
                    input,
                    window,
                    stride,
                    ..
                } => ops::max_pool2d(&values[*input], *window, *stride)?,
                Op::GlobalAvgPool { input } => ops::global_avg_pool(&values[*input])?,
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => ops::dense(&values[*input], &values[*weight], &values[*bias])?,
                Op::Act { input, kind } => ops::activation(&values[*input], *kind),
                Op::Add { lhs, rhs } => ops::add(&values[*lhs], &values[*rhs])?,
                Op::Sum { input } => ops::sum_all(&values[*input]),
                Op::Bce { probs, labels } => ops::bce(&values[*probs], labels)?,
            };
            values.push(value);
        }
        Ok(values)
    }
}
