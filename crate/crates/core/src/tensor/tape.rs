use std::borrow::Cow;

use super::kernels::{self, ConvGeometry};
use super::{argmax, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive operations a tape can record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// `[in] x [out, in] x [out] -> [out]`
    Dense,
    /// `[cin, h, w] x [cout, cin, k, k] x [cout] -> [cout, h', w']`, valid padding.
    Conv2d {
        stride: usize,
    },
    Softplus {
        beta: f64,
    },
    Flatten,
    /// `logits [C] x target distribution [C] -> [1]`
    SoftmaxCrossEntropy,
    Add,
    Mul,
    ReduceSum,
}

enum Op {
    Leaf,
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        geom: ConvGeometry,
    },
    Softplus {
        x: NodeId,
        beta: f64,
    },
    Flatten {
        x: NodeId,
    },
    SoftmaxCe {
        logits: NodeId,
        target: NodeId,
        log_probs: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    ReduceSum {
        x: NodeId,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, k, b, .. } => vec![*x, *k, *b],
            Op::Softplus { x, .. } | Op::Flatten { x } | Op::ReduceSum { x } => vec![*x],
            Op::SoftmaxCe { logits, target, .. } => vec![*logits, *target],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Single-use computation record.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Tape::backward`] is one reverse sweep.
/// Leaves may borrow their tensors (model parameters) for the lifetime `'a`.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    consumed: bool,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the seeded output.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Differentiable leaf (an input or a parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Differentiable leaf that borrows its value instead of copying it.
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation; backward skips work that only
    /// feeds constants.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push_checked(&mut self, value: Tensor, op: Op, what: &str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("{what} produced a non-finite value")));
        }
        let requires_grad = op.inputs().iter().any(|&i| self.requires_grad(i));
        Ok(self.push(Cow::Owned(value), op, requires_grad))
    }

    fn check_input(&self, id: NodeId) -> Result<&Tensor> {
        let node = self
            .nodes
            .get(id.0)
            .ok_or_else(|| Error::State(format!("node {} is not on this tape", id.0)))?;
        if !node.value.is_finite() {
            return Err(Error::numeric(format!("input node {} is not finite", id.0)));
        }
        Ok(&node.value)
    }

    /// Uniform entry point: applies `op` to `inputs` in the arity the
    /// primitive expects.
    pub fn apply(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match op {
            Primitive::Dense | Primitive::Conv2d { .. } => 3,
            Primitive::SoftmaxCrossEntropy | Primitive::Add | Primitive::Mul => 2,
            Primitive::Softplus { .. } | Primitive::Flatten | Primitive::ReduceSum => 1,
        };
        if inputs.len() != arity {
            return Err(Error::config(format!(
                "{op:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match op {
            Primitive::Dense => self.dense(inputs[0], inputs[1], inputs[2]),
            Primitive::Conv2d { stride } => self.conv2d(inputs[0], inputs[1], inputs[2], stride),
            Primitive::Softplus { beta } => self.softplus(inputs[0], beta),
            Primitive::Flatten => self.flatten(inputs[0]),
            Primitive::SoftmaxCrossEntropy => self.softmax_cross_entropy(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::ReduceSum => self.reduce_sum(inputs[0]),
        }
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.check_input(x)?, self.check_input(w)?, self.check_input(b)?);
        if xv.shape().len() != 1 {
            return Err(Error::Shape {
                context: "dense input (expected rank 1)",
                expected: vec![xv.len()],
                found: xv.shape().to_vec(),
            });
        }
        let n_in = xv.len();
        let n_out = bv.len();
        if wv.shape() != [n_out, n_in] || bv.shape() != [n_out] {
            return Err(Error::Shape {
                context: "dense weight",
                expected: vec![n_out, n_in],
                found: wv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n_out];
        kernels::dense_forward(xv.data(), wv.data(), bv.data(), &mut out);
        let value = Tensor::from_parts(vec![n_out], out);
        self.push_checked(value, Op::Dense { x, w, b }, "dense")
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (xv, kv, bv) = (self.check_input(x)?, self.check_input(k)?, self.check_input(b)?);
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() != 3 || ks.len() != 4 || ks[2] != ks[3] || ks[1] != xs[0] {
            return Err(Error::Shape {
                context: "conv2d input/kernel",
                expected: xs.to_vec(),
                found: ks.to_vec(),
            });
        }
        if bv.shape() != [ks[0]] {
            return Err(Error::Shape {
                context: "conv2d bias",
                expected: vec![ks[0]],
                found: bv.shape().to_vec(),
            });
        }
        if ks[2] > xs[1] || ks[2] > xs[2] {
            return Err(Error::Shape {
                context: "conv2d kernel larger than input",
                expected: xs.to_vec(),
                found: ks.to_vec(),
            });
        }
        let geom = ConvGeometry {
            in_channels: xs[0],
            height: xs[1],
            width: xs[2],
            out_channels: ks[0],
            kernel: ks[2],
            stride,
        };
        let shape = vec![geom.out_channels, geom.out_height(), geom.out_width()];
        let mut out = vec![0.0; shape.iter().product()];
        kernels::conv2d_forward(geom, xv.data(), kv.data(), bv.data(), &mut out);
        let value = Tensor::from_parts(shape, out);
        self.push_checked(value, Op::Conv2d { x, k, b, geom }, "conv2d")
    }

    pub fn softplus(&mut self, x: NodeId, beta: f64) -> Result<NodeId> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::config(format!(
                "softplus sharpness must be positive, got {beta}"
            )));
        }
        let value = self.check_input(x)?.map(|z| kernels::softplus(z, beta));
        self.push_checked(value, Op::Softplus { x, beta }, "softplus")
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.check_input(x)?;
        let value = xv.reshape(&[xv.len()])?;
        self.push_checked(value, Op::Flatten { x }, "flatten")
    }

    /// `-sum_j t_j log softmax(z)_j`; the target need not be one-hot.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let (zv, tv) = (self.check_input(logits)?, self.check_input(target)?);
        if zv.shape().len() != 1 || zv.shape() != tv.shape() {
            return Err(Error::Shape {
                context: "softmax cross-entropy logits/target",
                expected: zv.shape().to_vec(),
                found: tv.shape().to_vec(),
            });
        }
        let z = zv.data();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = z.iter().map(|v| v - lse).collect();
        let loss = -tv
            .data()
            .iter()
            .zip(&log_probs)
            .map(|(t, lp)| if *t == 0.0 { 0.0 } else { t * lp })
            .sum::<f64>();
        self.push_checked(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                target,
                log_probs,
            },
            "softmax cross-entropy",
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.check_input(a)?, self.check_input(b)?);
        same_shape("add", av, bv)?;
        let value = av.axpy(1.0, bv);
        self.push_checked(value, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.check_input(a)?, self.check_input(b)?);
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push_checked(value, Op::Mul { a, b }, "mul")
    }

    pub fn reduce_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.check_input(x)?.data().iter().sum());
        self.push_checked(value, Op::ReduceSum { x }, "reduce_sum")
    }

    /// Reverse sweep from `output` seeded with `seed`, returning
    /// `d(seed . output)/d(node)` for every node the output depends on.
    ///
    /// A tape can be swept once; later calls fail with a state error.
    pub fn backward(&mut self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("computation record already consumed".into()));
        }
        let out = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::State(format!("node {} is not on this tape", output.0)))?;
        seed.ensure_shape("backward seed", out.value.shape())?;
        if !seed.is_finite() {
            return Err(Error::numeric("backward seed is not finite"));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Dense { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut gx = self.requires_grad(*x).then(|| vec![0.0; xv.len()]);
                    let mut gw = self.requires_grad(*w).then(|| vec![0.0; wv.len()]);
                    kernels::dense_backward(
                        xv.data(),
                        wv.data(),
                        g.data(),
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                    );
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                    }
                    if let Some(gw) = gw {
                        accumulate(&mut grads, *w, Tensor::from_parts(wv.shape().to_vec(), gw));
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Conv2d { x, k, b, geom } => {
                    let xv = self.value(*x);
                    let kv = self.value(*k);
                    let mut gx = self.requires_grad(*x).then(|| vec![0.0; xv.len()]);
                    let mut gk = self.requires_grad(*k).then(|| vec![0.0; kv.len()]);
                    let mut gb = self.requires_grad(*b).then(|| vec![0.0; geom.out_channels]);
                    kernels::conv2d_backward(
                        *geom,
                        xv.data(),
                        kv.data(),
                        g.data(),
                        gx.as_deref_mut(),
                        gk.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                    }
                    if let Some(gk) = gk {
                        accumulate(&mut grads, *k, Tensor::from_parts(kv.shape().to_vec(), gk));
                    }
                    if let Some(gb) = gb {
                        accumulate(&mut grads, *b, Tensor::from_parts(vec![geom.out_channels], gb));
                    }
                }
                Op::Softplus { x, beta } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(z, go)| go * kernels::softplus_grad(*z, *beta))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
                }
                Op::Flatten { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(shape, g.into_data()));
                }
                Op::SoftmaxCe {
                    logits,
                    target,
                    log_probs,
                } => {
                    let s = g.data()[0];
                    let t = self.value(*target).data();
                    let mass: f64 = t.iter().sum();
                    if self.requires_grad(*logits) {
                        let mut gz: Vec<f64> = log_probs
                            .iter()
                            .zip(t)
                            .map(|(lp, tv)| mass * lp.exp() - tv)
                            .collect();
                        // For the most probable class both terms are near the
                        // same value; the others sum to minus it without the
                        // cancellation.
                        let k = argmax(log_probs);
                        gz[k] = -gz
                            .iter()
                            .enumerate()
                            .filter(|&(j, _)| j != k)
                            .map(|(_, v)| v)
                            .sum::<f64>();
                        let gz = gz.into_iter().map(|v| s * v).collect();
                        accumulate(&mut grads, *logits, Tensor::from_parts(vec![t.len()], gz));
                    }
                    if self.requires_grad(*target) {
                        let gt = log_probs.iter().map(|lp| -s * lp).collect();
                        accumulate(&mut grads, *target, Tensor::from_parts(vec![t.len()], gt));
                    }
                }
                Op::Add { a, b } => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.requires_grad(*a) {
                        let ga = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                    }
                    if self.requires_grad(*b) {
                        let gb = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
                    }
                }
                Op::ReduceSum { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::filled(&shape, g.data()[0]));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn same_shape(context: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            context,
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign_scaled(1.0, &g),
        slot => *slot = Some(g),
    }
}
