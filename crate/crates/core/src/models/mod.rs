//! The two network families: a LeakyReLU MLP for 2-D toy data and a small
//! convolutional network for 28×28 digits, plus custom layer lists.

mod checkpoint;
mod infer;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{softmax_rows, Adam, AdamConfig, Scalar, Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 3×3 "same" convolution, then activation, then dropout.
    Conv3x3 {
        filters: usize,
        activation: Activation,
        #[serde(default)]
        dropout: f64,
        #[serde(default)]
        l2: f64,
    },
    MaxPool2x2,
    Flatten,
    /// Fully connected layer, then activation, then dropout.
    Dense {
        units: usize,
        activation: Activation,
        #[serde(default)]
        dropout: f64,
        #[serde(default)]
        l2: f64,
    },
}

/// Architecture description; serializable as part of an experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

pub const MLP_YINYANG: &str = "mlp-yinyang";
pub const CNN_MNIST: &str = "cnn-mnist";

const DROPOUT: f64 = 0.33;
const L2: f64 = 1e-3;

impl ModelSpec {
    /// 2 → 50 → 50 → 50 → 2, LeakyReLU + dropout after each hidden layer,
    /// every layer L2-regularized.
    pub fn mlp_yinyang() -> Self {
        let hidden = || LayerSpec::Dense {
            units: 50,
            activation: Activation::LeakyRelu,
            dropout: DROPOUT,
            l2: L2,
        };
        Self {
            id: MLP_YINYANG.into(),
            input_shape: vec![2],
            layers: vec![
                hidden(),
                hidden(),
                hidden(),
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Linear,
                    dropout: 0.0,
                    l2: L2,
                },
            ],
        }
    }

    /// Four conv blocks of 16 filters with pooling after the second and
    /// fourth, then a dense softmax head. Only the conv kernels carry L2.
    pub fn cnn_mnist() -> Self {
        let block = || LayerSpec::Conv3x3 {
            filters: 16,
            activation: Activation::LeakyRelu,
            dropout: DROPOUT,
            l2: L2,
        };
        Self {
            id: CNN_MNIST.into(),
            input_shape: vec![28, 28, 1],
            layers: vec![
                block(),
                block(),
                LayerSpec::MaxPool2x2,
                block(),
                block(),
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 10,
                    activation: Activation::Linear,
                    dropout: 0.0,
                    l2: 0.0,
                },
            ],
        }
    }

    pub fn named(id: &str) -> Result<Self> {
        match id {
            MLP_YINYANG => Ok(Self::mlp_yinyang()),
            CNN_MNIST => Ok(Self::cnn_mnist()),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?}; expected {MLP_YINYANG} or {CNN_MNIST}"
            ))),
        }
    }

    /// Checks the layer list and returns per-layer parameter shapes plus the
    /// number of output classes.
    fn plan(&self) -> Result<(Vec<Vec<Vec<usize>>>, usize)> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        let mut params = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let ctx = |msg: String| Error::Config(format!("layer {i} ({layer:?}): {msg}"));
            match *layer {
                LayerSpec::Conv3x3 { filters, dropout, l2, .. } => {
                    check_reg(dropout, l2).map_err(ctx)?;
                    let [h, w, c] = shape[..] else {
                        return Err(ctx(format!("needs [h, w, c] input, got {shape:?}")));
                    };
                    if filters == 0 {
                        return Err(ctx("zero filters".into()));
                    }
                    params.push(vec![vec![3, 3, c, filters], vec![filters]]);
                    shape = vec![h, w, filters];
                }
                LayerSpec::MaxPool2x2 => {
                    let [h, w, c] = shape[..] else {
                        return Err(ctx(format!("needs [h, w, c] input, got {shape:?}")));
                    };
                    params.push(vec![]);
                    shape = vec![h.div_ceil(2), w.div_ceil(2), c];
                }
                LayerSpec::Flatten => {
                    params.push(vec![]);
                    shape = vec![shape.iter().product()];
                }
                LayerSpec::Dense { units, dropout, l2, .. } => {
                    check_reg(dropout, l2).map_err(ctx)?;
                    let [n] = shape[..] else {
                        return Err(ctx(format!("needs flat input, got {shape:?}")));
                    };
                    if units == 0 {
                        return Err(ctx("zero units".into()));
                    }
                    params.push(vec![vec![n, units], vec![units]]);
                    shape = vec![units];
                }
            }
        }
        match self.layers.last() {
            Some(LayerSpec::Dense {
                units,
                activation: Activation::Linear,
                dropout,
                ..
            }) if *units >= 2 && *dropout == 0.0 => Ok((params, *units)),
            _ => Err(Error::Config(
                "last layer must be a linear dense layer without dropout and with at least 2 units".into(),
            )),
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.plan()?.1)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        let (plan, _) = self.plan()?;
        Ok(plan.iter().flatten().map(|s| s.iter().product::<usize>()).sum())
    }
}

fn check_reg(dropout: f64, l2: f64) -> std::result::Result<(), String> {
    if !(0.0..1.0).contains(&dropout) {
        return Err(format!("dropout rate {dropout} outside [0, 1)"));
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(format!("L2 weight {l2} must be finite and non-negative"));
    }
    Ok(())
}

/// How a forward pass treats dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout on, tape recorded for a gradient step.
    Train,
    /// Dropout off.
    Eval,
    /// Dropout on, no tape: one Monte-Carlo sample of the predictive distribution.
    Mc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// L2 weight applied to this tensor (zero for biases).
    pub l2: f64,
}

/// An initialized network.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    params: Vec<Param<T>>,
    classes: usize,
    seed: u64,
}

impl<T: Scalar> Model<T> {
    /// Glorot-uniform kernels, zero biases.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let (plan, classes) = spec.plan()?;
        crate::heap::retain_freed_memory();
        let mut rng = Rng::from_seed(seed);
        let mut params = Vec::new();
        for (i, (layer, shapes)) in spec.layers.iter().zip(&plan).enumerate() {
            let (kind, l2) = match layer {
                LayerSpec::Conv3x3 { l2, .. } => ("conv", *l2),
                LayerSpec::Dense { l2, .. } => ("dense", *l2),
                _ => continue,
            };
            let kshape = &shapes[0];
            let (fan_in, fan_out) = match kshape[..] {
                [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
                [n_in, n_out] => (n_in, n_out),
                _ => unreachable!("planned kernel shapes are rank 2 or 4"),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = kshape.iter().product();
            let kernel: Vec<T> = (0..n).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
            params.push(Param {
                name: format!("{kind}{i}.kernel"),
                value: Tensor::new(kshape.clone(), kernel)?,
                l2,
            });
            params.push(Param {
                name: format!("{kind}{i}.bias"),
                value: Tensor::zeros(&shapes[1]),
                l2: 0.0,
            });
        }
        Ok(Self {
            spec,
            params,
            classes,
            seed,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn from_parts(spec: ModelSpec, params: Vec<Param<T>>, seed: u64) -> Result<Self> {
        let reference = Self::build(spec.clone(), seed)?;
        if reference.params.len() != params.len()
            || reference
                .params
                .iter()
                .zip(&params)
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::Config("parameters do not match the model spec".into()));
        }
        let classes = reference.classes;
        Ok(Self {
            spec,
            params,
            classes,
            seed,
        })
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let s = batch.shape();
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            return Err(Error::Dimension(format!(
                "batch of shape {s:?} does not match model input {:?}",
                self.spec.input_shape
            )));
        }
        Ok(s[0])
    }

    /// Records the network on `tape` and returns the logits variable.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        param_vars: &[Var],
        input: Var,
        dropout: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let mut x = input;
        let mut p = 0;
        for layer in &self.spec.layers {
            match *layer {
                LayerSpec::Conv3x3 {
                    activation, dropout: rate, ..
                } => {
                    x = tape.conv3x3(x, param_vars[p], param_vars[p + 1])?;
                    p += 2;
                    x = activate(tape, x, activation);
                    x = tape.dropout(x, rate, rng, dropout)?;
                }
                LayerSpec::MaxPool2x2 => x = tape.maxpool2x2(x)?,
                LayerSpec::Flatten => {
                    let s = tape.value(x).shape();
                    let n = s[0];
                    let rest: usize = s[1..].iter().product();
                    x = tape.reshape(x, &[n, rest])?;
                }
                LayerSpec::Dense {
                    activation, dropout: rate, ..
                } => {
                    x = tape.matmul(x, param_vars[p])?;
                    x = tape.add_bias(x, param_vars[p + 1])?;
                    p += 2;
                    x = activate(tape, x, activation);
                    x = tape.dropout(x, rate, rng, dropout)?;
                }
            }
        }
        Ok(x)
    }

    /// Class probabilities `[n, C]` for a batch `[n, ..input_shape]`.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let logits = self.logits(batch, mode != Mode::Eval, rng)?;
        let n = batch.shape()[0];
        Tensor::new(vec![n, self.classes], softmax_rows(&logits, self.classes))
    }

    /// Mean cross-entropy plus L2 penalty, and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        batch: &Tensor<T>,
        targets: &[usize],
        dropout: bool,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let input = tape.leaf(batch.clone());
        let logits = self.forward_tape(&mut tape, &vars, input, dropout, rng)?;
        let mut loss = tape.softmax_cross_entropy(logits, targets)?;
        // group tensors by weight so each distinct lambda is one penalty node
        let mut lambdas: Vec<f64> = self.params.iter().map(|p| p.l2).filter(|&l| l > 0.0).collect();
        lambdas.sort_by(f64::total_cmp);
        lambdas.dedup();
        for lambda in lambdas {
            let group: Vec<Var> = self
                .params
                .iter()
                .zip(&vars)
                .filter(|(p, _)| p.l2 == lambda)
                .map(|(_, &v)| v)
                .collect();
            let pen = tape.l2(&group, lambda);
            loss = tape.add(loss, pen)?;
        }
        let value = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
        let mut grads = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
    }

    pub fn apply_gradients(&mut self, optimizer: &mut Adam<T>, grads: &[Tensor<T>]) -> Result<()> {
        let mut values: Vec<&mut Tensor<T>> = self.params.iter_mut().map(|p| &mut p.value).collect();
        optimizer.step(&mut values, grads)
    }

    /// One optimizer step on a mini-batch with dropout active.
    pub fn train_step(
        &mut self,
        optimizer: &mut Adam<T>,
        batch: &Tensor<T>,
        targets: &[usize],
        rng: &mut Rng,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(batch, targets, true, rng)?;
        self.apply_gradients(optimizer, &grads)?;
        Ok(loss)
    }
}

fn activate<T: Scalar>(tape: &mut Tape<T>, x: Var, activation: Activation) -> Var {
    match activation {
        Activation::LeakyRelu => tape.leaky_relu(x),
        Activation::Linear => x,
    }
}

/// A model together with its optimizer state.
#[derive(Clone, Debug)]
pub struct Network {
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
}

impl Network {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            model: Model::build(spec, seed)?,
            optimizer: Adam::new(AdamConfig::default()),
        })
    }
}
