//! Layer pipelines with end-to-end reverse-mode differentiation.

mod layers;
mod loss;

pub use layers::{Conv2d, FullyConnected, Layer, LayerKind, MaxPool2x2, ParamMut, ParamRef, Relu, Reshape, Softmax};
pub use loss::{loss_and_grad, LossFn};

use crate::error::{Error, Result};
use crate::model::SensingConfig;
use crate::tensor::Tensor;

/// What a network was built as. Drives which model-level operations apply.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NetKind {
    /// Arbitrary layer stack.
    Custom,
    /// Learned sensing, learned expansion, convolutional classifier.
    Proposed(SensingConfig),
    /// Frozen Gaussian sensing with transpose reprojection, then the classifier.
    Baseline(SensingConfig),
    /// The measurement-domain half of a detached proposed network.
    Inference(SensingConfig),
}

impl NetKind {
    pub fn sensing(&self) -> Option<SensingConfig> {
        match *self {
            NetKind::Custom => None,
            NetKind::Proposed(c) | NetKind::Baseline(c) | NetKind::Inference(c) => Some(c),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NetKind::Custom => "custom",
            NetKind::Proposed(_) => "proposed",
            NetKind::Baseline(_) => "baseline",
            NetKind::Inference(_) => "inference",
        }
    }
}

/// An ordered chain of layers.
///
/// Shapes stored here are per sample; every pass runs on a batch with a
/// leading batch axis. An input matching the per-sample shape exactly is
/// treated as a batch of one and the output is returned without a batch axis.
#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    kind: NetKind,
    pending_backward: bool,
}

impl Network {
    pub fn new(input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        Self::with_kind(input_shape, layers, NetKind::Custom)
    }

    pub fn with_kind(input_shape: &[usize], layers: Vec<Layer>, kind: NetKind) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::shape(format!("invalid network input shape {input_shape:?}")));
        }
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| e.at_layer(i))?;
        }
        Ok(Network {
            layers,
            input_shape: input_shape.to_vec(),
            output_shape: shape,
            kind,
            pending_backward: false,
        })
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    /// Per-sample shape after each layer, starting with the input shape.
    pub fn shape_chain(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty")).expect("validated at construction");
            shapes.push(next);
        }
        shapes
    }

    /// Adds a leading batch axis if `input` is a single sample.
    fn batched(&self, input: &Tensor) -> Result<(Tensor, bool)> {
        if input.shape() == self.input_shape.as_slice() {
            let mut shape = vec![1];
            shape.extend_from_slice(&self.input_shape);
            return Ok((input.clone().reshape(&shape)?, true));
        }
        if input.rank() == self.input_shape.len() + 1 && &input.shape()[1..] == self.input_shape.as_slice() {
            return Ok((input.clone(), false));
        }
        Err(Error::shape(format!(
            "network expects input {:?} or [B, {:?}], got {:?}",
            self.input_shape,
            self.input_shape,
            input.shape()
        ))
        .at_layer(0))
    }

    fn unbatched(&self, out: Tensor, single: bool) -> Result<Tensor> {
        if single {
            out.reshape(&self.output_shape)
        } else {
            Ok(out)
        }
    }

    /// Forward pass that fills every layer's backward cache.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (mut x, single) = self.batched(input)?;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            x = layer.forward(&x).map_err(|e| e.at_layer(i))?;
        }
        self.pending_backward = true;
        self.unbatched(x, single)
    }

    /// Forward pass that leaves caches untouched; usable through `&self`.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let (mut x, single) = self.batched(input)?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.infer(&x).map_err(|e| e.at_layer(i))?;
        }
        self.unbatched(x, single)
    }

    /// Activations after every layer (batched), without caching.
    pub fn trace(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let (mut x, _) = self.batched(input)?;
        let mut acts = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.infer(&x).map_err(|e| e.at_layer(i))?;
            acts.push(x.clone());
        }
        Ok(acts)
    }

    /// Backpropagates `loss_grad` (gradient w.r.t. the network output),
    /// accumulating parameter gradients, and returns the input gradient.
    pub fn backward(&mut self, loss_grad: &Tensor) -> Result<Tensor> {
        if !self.pending_backward {
            return Err(Error::State("backward called before forward".into()));
        }
        self.pending_backward = false;
        let single = loss_grad.shape() == self.output_shape.as_slice();
        let mut g = if single {
            let mut shape = vec![1];
            shape.extend_from_slice(&self.output_shape);
            loss_grad.clone().reshape(&shape)?
        } else {
            loss_grad.clone()
        };
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward(&g).map_err(|e| e.at_layer(i))?;
        }
        if single {
            g.reshape(&self.input_shape)
        } else {
            Ok(g)
        }
    }

    pub fn zero_grads(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero_grads);
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
        self.pending_backward = false;
    }

    /// `(layer index, parameter)` pairs in layer order.
    pub fn params(&self) -> Vec<(usize, ParamRef<'_>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |p| (i, p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(usize, ParamMut<'_>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut().into_iter().map(move |p| (i, p)))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn num_trainable_params(&self) -> usize {
        self.params().iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum()
    }

    /// Splits into `layers[..at]` and `layers[at..]`. The second half's
    /// input shape is the first half's output shape.
    pub fn split_at(self, at: usize, first_kind: NetKind, second_kind: NetKind) -> Result<(Network, Network)> {
        if at > self.layers.len() {
            return Err(Error::InvalidArgument(format!("split index {at} beyond {} layers", self.layers.len())));
        }
        let chain = self.shape_chain();
        let mut layers = self.layers;
        let tail = layers.split_off(at);
        let head = Network::with_kind(&self.input_shape, layers, first_kind)?;
        let tail = Network::with_kind(&chain[at], tail, second_kind)?;
        Ok((head, tail))
    }
}
