//! Feed-forward embedding networks built from conv, max-pool, PReLU and
//! fully-connected layers, with hand-written backward passes.

pub(crate) mod checkpoint;
mod layers;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use layers::WeightInit;

use layers::{Conv2d, Linear, MaxPool2d, PRelu};

use crate::error::{bail, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

pub const DEFAULT_PRELU_SLOPE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    PRelu,
    FullyConnected {
        out_features: usize,
    },
}

impl LayerSpec {
    /// 5×5 convolution, stride 1, padding 2.
    pub fn conv5(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: 5,
            stride: 1,
            padding: 2,
        }
    }

    pub fn pool2() -> Self {
        LayerSpec::MaxPool { window: 2, stride: 2 }
    }

    pub fn fc(out_features: usize) -> Self {
        LayerSpec::FullyConnected { out_features }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layer<T> {
    Conv(Conv2d<T>),
    MaxPool(MaxPool2d),
    PRelu(PRelu<T>),
    Linear(Linear<T>),
}

impl<T: Scalar> Layer<T> {
    fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
            },
            Layer::MaxPool(p) => LayerSpec::MaxPool {
                window: p.window,
                stride: p.stride,
            },
            Layer::PRelu(_) => LayerSpec::PRelu,
            Layer::Linear(l) => LayerSpec::FullyConnected {
                out_features: l.out_features(),
            },
        }
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::MaxPool(_) => vec![],
            Layer::PRelu(p) => vec![&p.slopes],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::MaxPool(_) => vec![],
            Layer::PRelu(p) => vec![&mut p.slopes],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
        }
    }
}

fn as_spatial(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    match *shape {
        [h, w, c] => Ok([h, w, c]),
        _ => bail!(Shape, "{what} needs a [height, width, channels] input, got {shape:?}"),
    }
}

/// Output shape of one layer given its per-sample input shape.
fn spec_output_shape(spec: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    Ok(match *spec {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let s = as_spatial(input, "convolution")?;
            let c = Conv2d::<f64> {
                in_shape: s,
                out_channels,
                kernel,
                stride,
                padding,
                weight: Tensor::zeros(&[0]),
                bias: Tensor::zeros(&[0]),
            };
            c.out_shape()?.to_vec()
        }
        LayerSpec::MaxPool { window, stride } => {
            MaxPool2d::new(as_spatial(input, "max-pool")?, window, stride)?.out_shape()?.to_vec()
        }
        LayerSpec::PRelu => input.to_vec(),
        LayerSpec::FullyConnected { out_features } => vec![out_features],
    })
}

/// An ordered stack of layers mapping samples of `input_shape` to embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

/// Activations kept by [`EmbeddingModel::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    batch: usize,
    /// Input to each layer, flattened `[batch * per_sample]`.
    inputs: Vec<Vec<T>>,
    /// Argmax routing for max-pool layers, empty elsewhere.
    routes: Vec<Vec<usize>>,
}

impl<T> ForwardTrace<T> {
    pub fn num_layers(&self) -> usize {
        self.inputs.len()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradients in the order of [`EmbeddingModel::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub params: Vec<Tensor<T>>,
    /// `[batch, input_shape..]`, or `None` when not requested.
    pub input: Option<Tensor<T>>,
}

impl<T: Scalar> EmbeddingModel<T> {
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], init: WeightInit, rng: &mut Rng) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            bail!(Shape, "input shape {input_shape:?} must be non-empty with positive dims");
        }
        if specs.is_empty() {
            bail!(Parameter, "a model needs at least one layer");
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let layer = match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => Layer::Conv(Conv2d::new(
                    as_spatial(&shape, "convolution")?,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    init,
                    rng,
                )?),
                LayerSpec::MaxPool { window, stride } => {
                    Layer::MaxPool(MaxPool2d::new(as_spatial(&shape, "max-pool")?, window, stride)?)
                }
                LayerSpec::PRelu => Layer::PRelu(PRelu::new(*shape.last().unwrap(), T::lit(DEFAULT_PRELU_SLOPE))),
                LayerSpec::FullyConnected { out_features } => {
                    Layer::Linear(Linear::new(shape.iter().product(), out_features, init, rng)?)
                }
            };
            shape = spec_output_shape(spec, &shape)?;
            layers.push(layer);
        }
        if shape.len() != 1 {
            bail!(Shape, "the last layer must produce a flat embedding, got {shape:?}");
        }
        Ok(EmbeddingModel {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-sample shape after each layer.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        self.layers
            .iter()
            .map(|l| {
                shape = spec_output_shape(&l.spec(), &shape).expect("validated at construction");
                shape.clone()
            })
            .collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layer_shapes().last().unwrap()[0]
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Replaces all parameters, checking each shape.
    pub fn set_params(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            bail!(Consistency, "expected {} parameter tensors, got {}", slots.len(), values.len());
        }
        for (slot, v) in slots.iter().zip(&values) {
            if slot.shape() != v.shape() {
                bail!(Shape, "parameter shape {:?} does not match {:?}", v.shape(), slot.shape());
            }
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            **slot = v;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingModel<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv2d {
                    in_shape: c.in_shape,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                }),
                Layer::MaxPool(p) => Layer::MaxPool(p.clone()),
                Layer::PRelu(p) => Layer::PRelu(PRelu { slopes: p.slopes.cast() }),
                Layer::Linear(l) => Layer::Linear(Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                }),
            })
            .collect();
        EmbeddingModel {
            input_shape: self.input_shape.clone(),
            layers,
        }
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<usize> {
        if images.ndim() < 1 || images.row_len() != self.input_len() {
            bail!(
                Shape,
                "images of shape {:?} do not match model input {:?}",
                images.shape(),
                self.input_shape
            );
        }
        Ok(images.rows())
    }

    fn run(&self, images: &Tensor<T>, mut keep: Option<&mut ForwardTrace<T>>) -> Result<Tensor<T>> {
        let batch = self.check_input(images)?;
        let mut act = images.data().to_vec();
        for layer in &self.layers {
            let (next, route) = match layer {
                Layer::Conv(c) => (c.forward(&act, batch)?, Vec::new()),
                Layer::MaxPool(p) => p.forward(&act, batch)?,
                Layer::PRelu(p) => (p.forward(&act), Vec::new()),
                Layer::Linear(l) => (l.forward(&act, batch), Vec::new()),
            };
            if let Some(trace) = keep.as_deref_mut() {
                trace.inputs.push(std::mem::replace(&mut act, next));
                trace.routes.push(route);
            } else {
                act = next;
            }
        }
        let dim = act.len() / batch.max(1);
        let out = Tensor::from_parts_unchecked(vec![batch, dim], act);
        out.ensure_finite("embedding")?;
        Ok(out)
    }

    /// Embeds a `[batch, input_shape..]` tensor and keeps the activations needed by
    /// [`EmbeddingModel::backward`].
    pub fn forward(&self, images: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let mut trace = ForwardTrace {
            batch: 0,
            inputs: Vec::with_capacity(self.layers.len()),
            routes: Vec::with_capacity(self.layers.len()),
        };
        let out = self.run(images, Some(&mut trace))?;
        trace.batch = out.rows();
        Ok((out, trace))
    }

    /// Forward pass without a trace.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(images, None)
    }

    /// Backpropagates `grad_features` (`[batch, embedding_dim]`).
    pub fn backward(&self, trace: &ForwardTrace<T>, grad_features: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_with(trace, grad_features, true)
    }

    /// Like [`EmbeddingModel::backward`]; skips the input gradient unless `want_input`.
    pub fn backward_with(
        &self,
        trace: &ForwardTrace<T>,
        grad_features: &Tensor<T>,
        want_input: bool,
    ) -> Result<Gradients<T>> {
        if trace.inputs.len() != self.layers.len() {
            bail!(
                Consistency,
                "trace has {} layers, model has {}",
                trace.inputs.len(),
                self.layers.len()
            );
        }
        let batch = trace.batch;
        if grad_features.shape() != [batch, self.embedding_dim()] {
            bail!(
                Shape,
                "feature gradient shape {:?}, expected [{batch}, {}]",
                grad_features.shape(),
                self.embedding_dim()
            );
        }
        let mut per_layer: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.layers.len());
        let mut grad = grad_features.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            let need = want_input || i > 0;
            let (params, gin) = match layer {
                Layer::Conv(c) => {
                    if input.len() != batch * c.in_shape.iter().product::<usize>() {
                        bail!(Consistency, "trace activations do not match layer {i}");
                    }
                    let (gw, gb, gin) = c.backward(input, &grad, batch, need)?;
                    (vec![gw, gb], gin)
                }
                Layer::MaxPool(p) => (Vec::new(), p.backward(&trace.routes[i], &grad, batch)),
                Layer::PRelu(p) => {
                    let (ga, gin) = p.backward(input, &grad);
                    (vec![ga], gin)
                }
                Layer::Linear(l) => {
                    if input.len() != batch * l.in_features() {
                        bail!(Consistency, "trace activations do not match layer {i}");
                    }
                    let (gw, gb, gin) = l.backward(input, &grad, batch);
                    (vec![gw, gb], gin)
                }
            };
            per_layer.push(params);
            grad = gin;
        }
        per_layer.reverse();
        let input = if want_input {
            let mut shape = vec![batch];
            shape.extend_from_slice(&self.input_shape);
            Some(Tensor::from_parts_unchecked(shape, grad))
        } else {
            None
        };
        Ok(Gradients {
            params: per_layer.into_iter().flatten().collect(),
            input,
        })
    }

    pub(crate) fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }
}

/// Layer list of the LeNet++-style network: three stages of two 5×5 convolutions
/// (32, 64, 128 channels) with PReLU after each, a 2×2 max-pool closing every
/// stage, then a fully-connected projection to `embedding_dim`.
pub fn lenetpp_specs(embedding_dim: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for channels in [32, 64, 128] {
        for _ in 0..2 {
            specs.push(LayerSpec::conv5(channels));
            specs.push(LayerSpec::PRelu);
        }
        specs.push(LayerSpec::pool2());
    }
    specs.push(LayerSpec::fc(embedding_dim));
    specs
}

pub const LENETPP_INIT: WeightInit = WeightInit::Gaussian { std: 0.01 };

/// LeNet++-style network for 28×28 single-channel images with a 2-D embedding.
pub fn build_lenetpp<T: Scalar>(rng: &mut Rng) -> Result<EmbeddingModel<T>> {
    build_lenetpp_with(rng, &[28, 28, 1], 2, LENETPP_INIT)
}

pub fn build_lenetpp_with<T: Scalar>(
    rng: &mut Rng,
    input_shape: &[usize],
    embedding_dim: usize,
    init: WeightInit,
) -> Result<EmbeddingModel<T>> {
    EmbeddingModel::new(input_shape, &lenetpp_specs(embedding_dim), init, rng)
}

/// Fully-connected network with PReLU between hidden layers.
pub fn build_mlp<T: Scalar>(
    rng: &mut Rng,
    input_shape: &[usize],
    hidden: &[usize],
    embedding_dim: usize,
    init: WeightInit,
) -> Result<EmbeddingModel<T>> {
    let mut specs = Vec::new();
    for &h in hidden {
        specs.push(LayerSpec::fc(h));
        specs.push(LayerSpec::PRelu);
    }
    specs.push(LayerSpec::fc(embedding_dim));
    EmbeddingModel::new(input_shape, &specs, init, rng)
}
