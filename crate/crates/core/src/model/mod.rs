//! Softplus classifiers: topology, parameters, gradients, training and
//! checkpoints.

mod adam;
mod checkpoint;
mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load, save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{accuracy, train, Fitter, SoftExample, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax, NodeId, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Dense {
        width: usize,
    },
}

/// Layer list of a softplus network. Every layer except the last is followed
/// by a softplus with sharpness `softplus_beta`; the last layer emits logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub softplus_beta: f64,
    pub num_classes: usize,
}

impl NetworkSpec {
    /// conv 16@5x5/2 -> conv 32@5x5/2 -> dense 128 -> dense 10 on 1x28x28.
    pub fn small_cnn() -> Self {
        Self {
            input_shape: vec![1, 28, 28],
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 5,
                    stride: 2,
                },
                LayerSpec::Conv {
                    out_channels: 32,
                    kernel: 5,
                    stride: 2,
                },
                LayerSpec::Dense { width: 128 },
                LayerSpec::Dense { width: 10 },
            ],
            softplus_beta: 1.0,
            num_classes: 10,
        }
    }

    /// Fully connected network on a flat input of `inputs` features.
    pub fn mlp(inputs: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut layers: Vec<LayerSpec> = hidden.iter().map(|&width| LayerSpec::Dense { width }).collect();
        layers.push(LayerSpec::Dense { width: num_classes });
        Self {
            input_shape: vec![inputs],
            layers,
            softplus_beta: 1.0,
            num_classes,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.softplus_beta = beta;
        self
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Weight and bias shapes, layer by layer; validates the topology.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if !(self.softplus_beta > 0.0 && self.softplus_beta.is_finite()) {
            return Err(Error::config("softplus sharpness must be positive"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::config("input shape must have positive dimensions"));
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { width }) if *width == self.num_classes => {}
            _ => {
                return Err(Error::config(format!(
                    "final layer must be dense with width {}",
                    self.num_classes
                )))
            }
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if shape.len() != 3 {
                        return Err(Error::config(format!(
                            "conv layer {i} needs a [c, h, w] input, got {shape:?}"
                        )));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::config(format!("conv layer {i} has a zero size")));
                    }
                    if kernel > shape[1] || kernel > shape[2] {
                        return Err(Error::config(format!(
                            "conv layer {i}: kernel {kernel} exceeds input {shape:?}"
                        )));
                    }
                    shapes.push(vec![out_channels, shape[0], kernel, kernel]);
                    shapes.push(vec![out_channels]);
                    shape = vec![
                        out_channels,
                        (shape[1] - kernel) / stride + 1,
                        (shape[2] - kernel) / stride + 1,
                    ];
                }
                LayerSpec::Dense { width } => {
                    if width == 0 {
                        return Err(Error::config(format!("dense layer {i} has width 0")));
                    }
                    let fan_in = shape.iter().product();
                    shapes.push(vec![width, fan_in]);
                    shapes.push(vec![width]);
                    shape = vec![width];
                }
            }
        }
        Ok(shapes)
    }
}

/// Which class score an input gradient differentiates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassScore {
    /// Pre-softmax logit `z_c`.
    #[default]
    Logit,
    /// Softmax probability `p_c`.
    Probability,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub dataset: String,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// A softplus classifier with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
    pub meta: TrainingMeta,
}

impl Network {
    /// He-style uniform fan-in initialization, zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::from_parts(shape.clone(), data)
            })
            .collect();
        Ok(Self {
            spec,
            params,
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::config(format!(
                "spec needs {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (shape, p) in shapes.iter().zip(&params) {
            p.ensure_shape("network parameter", shape)?;
        }
        Ok(Self {
            spec,
            params,
            meta: TrainingMeta::default(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        x.ensure_shape("network input", &self.spec.input_shape)?;
        if !x.is_finite() {
            return Err(Error::numeric("network input is not finite"));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`; returns the logits node and the
    /// parameter nodes in `params()` order.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        input: NodeId,
        differentiate_params: bool,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                if differentiate_params {
                    tape.leaf_ref(p)
                } else {
                    tape.constant_ref(p)
                }
            })
            .collect();
        let mut h = input;
        let last = self.spec.layers.len() - 1;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let (w, b) = (param_nodes[2 * i], param_nodes[2 * i + 1]);
            h = match layer {
                LayerSpec::Conv { stride, .. } => tape.conv2d(h, w, b, *stride)?,
                LayerSpec::Dense { .. } => {
                    if tape.value(h).shape().len() != 1 {
                        h = tape.flatten(h)?;
                    }
                    tape.dense(h, w, b)?
                }
            };
            if i != last {
                h = tape.softplus(h, self.spec.softplus_beta)?;
            }
        }
        Ok((h, param_nodes))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xn = tape.constant_ref(x);
        let (out, _) = self.forward(&mut tape, xn, false)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Softmax class probabilities.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn predict_class(&self, x: &Tensor) -> Result<usize> {
        Ok(crate::tensor::argmax(&self.logits(x)?))
    }

    /// Input gradient of `seed . logits`, where the seed is chosen after the
    /// forward pass from the logits. Returns the logits too.
    pub fn input_gradient(
        &self,
        x: &Tensor,
        seed: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Tensor)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xn = tape.leaf_ref(x);
        let (out, _) = self.forward(&mut tape, xn, false)?;
        let logits = tape.value(out).data().to_vec();
        let seed = Tensor::new(vec![logits.len()], seed(&logits))?;
        let mut grads = tape.backward(out, &seed)?;
        let g = grads
            .take(xn)
            .unwrap_or_else(|| Tensor::zeros(&self.spec.input_shape));
        Ok((logits, g))
    }

    /// Gradient of one class score with respect to the input.
    pub fn score_gradient(&self, x: &Tensor, class: usize, score: ClassScore) -> Result<(Vec<f64>, Tensor)> {
        let c = self.num_classes();
        if class >= c {
            return Err(Error::config(format!("class {class} out of range 0..{c}")));
        }
        self.input_gradient(x, |logits| match score {
            ClassScore::Logit => (0..c).map(|j| f64::from(u8::from(j == class))).collect(),
            // d p_c / d z_j = p_c (1[j = c] - p_j)
            ClassScore::Probability => {
                let p = softmax(logits);
                // 1 - p_c as the sum of the other probabilities, which stays
                // accurate when p_c is close to 1.
                let rest: f64 = (0..c).filter(|&j| j != class).map(|j| p[j]).sum();
                (0..c)
                    .map(|j| {
                        if j == class {
                            p[class] * rest
                        } else {
                            -p[class] * p[j]
                        }
                    })
                    .collect()
            }
        })
    }

    /// Cross-entropy against `target` and its input gradient.
    pub fn loss_input_gradient(&self, x: &Tensor, target: &[f64]) -> Result<(f64, Tensor)> {
        self.check_input(x)?;
        let t = Tensor::new(vec![target.len()], target.to_vec())?;
        let mut tape = Tape::new();
        let xn = tape.leaf_ref(x);
        let (out, _) = self.forward(&mut tape, xn, false)?;
        let tn = tape.constant(t);
        let loss = tape.softmax_cross_entropy(out, tn)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss, &Tensor::scalar(1.0))?;
        let g = grads
            .take(xn)
            .unwrap_or_else(|| Tensor::zeros(&self.spec.input_shape));
        Ok((value, g))
    }

    /// Cross-entropy against `target` with gradients for every parameter.
    /// Also returns the logits.
    pub fn loss_param_gradients(&self, x: &Tensor, target: &[f64]) -> Result<(f64, Vec<f64>, Vec<Tensor>)> {
        self.check_input(x)?;
        let t = Tensor::new(vec![target.len()], target.to_vec())?;
        let mut tape = Tape::new();
        let xn = tape.constant_ref(x);
        let (out, pnodes) = self.forward(&mut tape, xn, true)?;
        let logits = tape.value(out).data().to_vec();
        let tn = tape.constant(t);
        let loss = tape.softmax_cross_entropy(out, tn)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss, &Tensor::scalar(1.0))?;
        let pgrads = pnodes
            .iter()
            .zip(&self.params)
            .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, logits, pgrads))
    }
}

/// One-hot distribution over `num_classes`.
pub fn one_hot(class: usize, num_classes: usize) -> Vec<f64> {
    (0..num_classes)
        .map(|j| f64::from(u8::from(j == class)))
        .collect()
}
