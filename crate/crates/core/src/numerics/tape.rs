use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a `B x C x H x W` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct MapDims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl MapDims {
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

pub(crate) enum Op {
    Leaf,
    ConvPointwise { input: Var, kernel: Var, bias: Var, dims: MapDims, out_channels: usize },
    Conv2dSame { input: Var, kernel: Var, bias: Var, dims: MapDims, size: usize },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        channels: usize,
        spatial: usize,
        train: bool,
    },
    Relu(Var),
    Scale(Var, f64),
    Sigmoid(Var),
    PoolSpatial { input: Var, dims: MapDims, argmax: Option<Vec<usize>> },
    PoolChannel { input: Var, dims: MapDims, argmax: Option<Vec<usize>> },
    ConcatChannels { parts: Vec<(Var, usize)>, batch: usize, spatial: usize },
    MulBroadcast { x: Var, gate: Var, x_dims: [usize; 4], gate_dims: [usize; 4] },
    Add(Var, Var),
    Reshape(Var),
    Dense { input: Var, weight: Var, bias: Option<Var>, rows: usize },
    L2Normalize { input: Var, rows: usize, norms: Vec<f64> },
    Sum(Var),
    Dot(Var, Var),
    Contrastive { input: Var, coeff: Vec<f64>, rows: usize, temperature: f64 },
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<usize> },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so every op's inputs precede it.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    backpropagated: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradient of the last back-propagated loss with respect to a leaf.
    ///
    /// Returns `None` before [`Tape::backward`] has run or for interior nodes.
    /// Leaves that did not participate in the loss get an all-zero gradient.
    pub fn grad(&self, var: Var) -> Option<Tensor> {
        if !self.backpropagated {
            return None;
        }
        let node = &self.nodes[var.0];
        if !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &node.grad {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    /// Reverse sweep from a scalar loss. Rejected on a tape that has already
    /// been swept.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.backpropagated {
            return Err(NumericsError::AlreadyBackpropagated);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(NumericsError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].grad = Some(g);
            }
        }
        self.backpropagated = true;
        Ok(())
    }

    /// Zero-initialized gradient accumulator for `var`, or `None` when the
    /// node does not need a gradient.
    pub(crate) fn slot<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        var: Var,
    ) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let len = self.nodes[var.0].value.len();
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::ConvPointwise { input, kernel, bias, dims, out_channels } => {
                self.conv_pointwise_backward(g, *input, *kernel, *bias, *dims, *out_channels, grads)
            }
            Op::Conv2dSame { input, kernel, bias, dims, size } => {
                self.conv2d_same_backward(g, *input, *kernel, *bias, *dims, *size, grads)
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, channels, spatial, train } => self
                .batch_norm_backward(
                    g, *input, *gamma, *beta, xhat, inv_std, *channels, *spatial, *train, grads,
                ),
            Op::Relu(input) => {
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        if y > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Scale(input, factor) => {
                if let Some(dx) = self.slot(grads, *input) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += factor * gi;
                    }
                }
            }
            Op::Sigmoid(input) => {
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::PoolSpatial { input, dims, argmax } => {
                self.pool_spatial_backward(g, *input, *dims, argmax.as_deref(), grads)
            }
            Op::PoolChannel { input, dims, argmax } => {
                self.pool_channel_backward(g, *input, *dims, argmax.as_deref(), grads)
            }
            Op::ConcatChannels { parts, batch, spatial } => {
                self.concat_backward(g, parts, *batch, *spatial, grads)
            }
            Op::MulBroadcast { x, gate, x_dims, gate_dims } => {
                self.mul_broadcast_backward(g, *x, *gate, *x_dims, *gate_dims, grads)
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::Reshape(input) => {
                if let Some(d) = self.slot(grads, *input) {
                    d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::Dense { input, weight, bias, rows } => {
                self.dense_backward(g, *input, *weight, *bias, *rows, grads)
            }
            Op::L2Normalize { input, rows, norms } => {
                self.l2_normalize_backward(g, out, *input, *rows, norms, grads)
            }
            Op::Sum(input) => {
                if let Some(d) = self.slot(grads, *input) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(&vb).for_each(|(d, y)| *d += g[0] * y);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(&va).for_each(|(d, x)| *d += g[0] * x);
                }
            }
            Op::Contrastive { input, coeff, rows, temperature } => {
                self.contrastive_backward(g[0], *input, coeff, *rows, *temperature, grads)
            }
            Op::CrossEntropy { logits, probs, targets } => {
                self.cross_entropy_backward(g[0], *logits, probs, targets, grads)
            }
        }
    }
}
