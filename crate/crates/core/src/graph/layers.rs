//! Differentiable layers.
//!
//! Every layer takes a batched input whose leading axis is the batch, keeps
//! whatever it needs for the backward pass in a private cache, and
//! accumulates parameter gradients until they are explicitly zeroed.

use crate::error::{Error, Result};
use crate::tensor::{self, col2im, gemm, im2col, Scalar, Tensor};

/// Discriminant used by serialization and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    FullyConnected,
    Conv2d,
    Relu,
    MaxPool2x2,
    Reshape,
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2x2 => "maxpool2x2",
            LayerKind::Reshape => "reshape",
            LayerKind::Softmax => "softmax",
        }
    }
}

/// Borrowed view of one parameter and its gradient.
pub struct ParamRef<'a> {
    pub name: &'static str,
    pub value: &'a Tensor,
    pub grad: &'a Tensor,
    pub trainable: bool,
}

pub struct ParamMut<'a> {
    pub name: &'static str,
    pub value: &'a mut Tensor,
    pub grad: &'a mut Tensor,
    pub trainable: bool,
}

fn missing_cache(kind: LayerKind) -> Error {
    Error::State(format!("{} backward called before forward", kind.name()))
}

fn split_batch(t: &Tensor, per_sample: &[usize], what: &str) -> Result<usize> {
    let shape = t.shape();
    if shape.len() != per_sample.len() + 1 || &shape[1..] != per_sample {
        return Err(Error::shape(format!(
            "{what}: expected [B, {}], got {shape:?}",
            per_sample.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(shape[0])
}

/// Affine map `y = x W^T + b` with `W` stored as `[out, in]`.
#[derive(Clone, Debug)]
pub struct FullyConnected {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub weight_grad: Tensor,
    pub bias_grad: Option<Tensor>,
    /// Frozen layers still propagate input gradients but never accumulate
    /// parameter gradients and are skipped by the optimizer.
    pub frozen: bool,
    cache: Option<Tensor>,
}

impl FullyConnected {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::shape(format!("fully connected weight must be [out, in], got {:?}", weight.shape())));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::shape(format!("bias {:?} does not match weight {:?}", b.shape(), weight.shape())));
            }
        }
        Ok(FullyConnected {
            weight_grad: Tensor::zeros(weight.shape()),
            bias_grad: bias.as_ref().map(|b| Tensor::zeros(b.shape())),
            weight,
            bias,
            frozen: false,
            cache: None,
        })
    }

    pub fn zeroed(inputs: usize, outputs: usize, with_bias: bool) -> Self {
        Self::new(Tensor::zeros(&[outputs, inputs]), with_bias.then(|| Tensor::zeros(&[outputs]))).expect("consistent shapes")
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let b = split_batch(input, &[self.inputs()], "fully_connected")?;
        let (n_in, n_out) = (self.inputs(), self.outputs());
        let mut out = vec![0.0; b * n_out];
        gemm(b, n_in, n_out, input.data(), false, self.weight.data(), true, &mut out, 0.0);
        if let Some(bias) = &self.bias {
            for row in out.chunks_mut(n_out) {
                row.iter_mut().zip(bias.data()).for_each(|(y, bo)| *y += bo);
            }
        }
        Ok(Tensor::from_parts(vec![b, n_out], out))
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.infer(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or_else(|| missing_cache(LayerKind::FullyConnected))?;
        let b = input.shape()[0];
        let (n_in, n_out) = (self.inputs(), self.outputs());
        if upstream.shape() != [b, n_out] {
            return Err(Error::shape(format!("fully_connected backward: upstream {:?}, expected [{b}, {n_out}]", upstream.shape())));
        }
        if !self.frozen {
            gemm(n_out, b, n_in, upstream.data(), true, input.data(), false, self.weight_grad.data_mut(), 1.0);
            if let Some(bg) = &mut self.bias_grad {
                for row in upstream.data().chunks(n_out) {
                    bg.data_mut().iter_mut().zip(row).for_each(|(g, u)| *g += u);
                }
            }
        }
        let mut dx = vec![0.0; b * n_in];
        gemm(b, n_out, n_in, upstream.data(), false, self.weight.data(), false, &mut dx, 0.0);
        Ok(Tensor::from_parts(vec![b, n_in], dx))
    }
}

/// Valid 2-D convolution over `[B, C, H, W]` inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub weight_grad: Tensor,
    pub bias_grad: Option<Tensor>,
    cache: Option<ConvCache>,
}

#[derive(Clone, Debug)]
struct ConvCache {
    input_shape: Vec<usize>,
    cols: Vec<Scalar>,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::shape(format!("conv weight must be [O, C, KH, KW], got {:?}", weight.shape())));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::shape(format!("bias {:?} does not match conv weight {:?}", b.shape(), weight.shape())));
            }
        }
        Ok(Conv2d {
            weight_grad: Tensor::zeros(weight.shape()),
            bias_grad: bias.as_ref().map(|b| Tensor::zeros(b.shape())),
            weight,
            bias,
            cache: None,
        })
    }

    pub fn zeroed(in_channels: usize, out_channels: usize, kernel: usize, with_bias: bool) -> Self {
        Self::new(
            Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            with_bias.then(|| Tensor::zeros(&[out_channels])),
        )
        .expect("consistent shapes")
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    fn run(&self, input: &Tensor, keep_cols: bool) -> Result<(Tensor, Vec<Scalar>)> {
        if input.rank() != 4 {
            return Err(Error::shape(format!("conv2d: expected [B, C, H, W], got {:?}", input.shape())));
        }
        let g = tensor::conv_geometry(input, &self.weight, self.bias.as_ref())?;
        let in_len = g.in_channels * g.height * g.width;
        let out_len = g.out_channels * g.out_h() * g.out_w();
        let col_len = g.col_len();
        let mut cols = vec![0.0; if keep_cols { g.batch * col_len } else { col_len }];
        let mut out = vec![0.0; g.batch * out_len];
        for b in 0..g.batch {
            let c = if keep_cols { &mut cols[b * col_len..(b + 1) * col_len] } else { &mut cols[..] };
            im2col(&input.data()[b * in_len..(b + 1) * in_len], g.in_channels, g.height, g.width, g.kh, g.kw, c);
            tensor::conv_from_cols(&g, c, self.weight.data(), self.bias.as_ref().map(|t| t.data()), &mut out[b * out_len..(b + 1) * out_len]);
        }
        let shape = vec![g.batch, g.out_channels, g.out_h(), g.out_w()];
        Ok((Tensor::from_parts(shape, out), cols))
    }

    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.run(input, false)?.0)
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (out, cols) = self.run(input, true)?;
        self.cache = Some(ConvCache {
            input_shape: input.shape().to_vec(),
            cols,
        });
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache(LayerKind::Conv2d))?;
        let [batch, c, h, w] = <[usize; 4]>::try_from(cache.input_shape.as_slice()).expect("rank checked in forward");
        let (kh, kw) = self.kernel();
        let o = self.out_channels();
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        if upstream.shape() != [batch, o, oh, ow] {
            return Err(Error::shape(format!(
                "conv2d backward: upstream {:?}, expected [{batch}, {o}, {oh}, {ow}]",
                upstream.shape()
            )));
        }
        let plane = oh * ow;
        let rows = c * kh * kw;
        let col_len = rows * plane;
        let in_len = c * h * w;
        let mut dx = vec![0.0; batch * in_len];
        let mut dcols = vec![0.0; col_len];
        for b in 0..batch {
            let g = &upstream.data()[b * o * plane..(b + 1) * o * plane];
            let cols = &cache.cols[b * col_len..(b + 1) * col_len];
            gemm(o, plane, rows, g, false, cols, true, self.weight_grad.data_mut(), 1.0);
            if let Some(bg) = &mut self.bias_grad {
                for (oc, gb) in bg.data_mut().iter_mut().enumerate() {
                    *gb += g[oc * plane..(oc + 1) * plane].iter().sum::<Scalar>();
                }
            }
            gemm(rows, o, plane, self.weight.data(), true, g, false, &mut dcols, 0.0);
            col2im(&dcols, c, h, w, kh, kw, &mut dx[b * in_len..(b + 1) * in_len]);
        }
        Ok(Tensor::from_parts(cache.input_shape, dx))
    }
}

/// Elementwise `max(0, x)`. The subgradient at exactly zero is zero.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        Ok(tensor::relu(input))
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        self.cache = Some(input.clone());
        Ok(tensor::relu(input))
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or_else(|| missing_cache(LayerKind::Relu))?;
        if upstream.shape() != input.shape() {
            return Err(Error::shape(format!("relu backward: upstream {:?}, cached {:?}", upstream.shape(), input.shape())));
        }
        let data = input
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        Ok(Tensor::from_parts(input.shape().to_vec(), data))
    }
}

/// 2x2 max pooling with stride 2 over `[B, C, H, W]` inputs.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2x2 {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2x2 {
    fn check(input: &Tensor) -> Result<()> {
        if input.rank() != 4 {
            return Err(Error::shape(format!("maxpool2x2: expected [B, C, H, W], got {:?}", input.shape())));
        }
        Ok(())
    }

    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        Self::check(input)?;
        Ok(tensor::maxpool2x2(input)?.output)
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        Self::check(input)?;
        let pooled = tensor::maxpool2x2(input)?;
        self.cache = Some((input.shape().to_vec(), pooled.argmax));
        Ok(pooled.output)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (shape, argmax) = self.cache.take().ok_or_else(|| missing_cache(LayerKind::MaxPool2x2))?;
        if upstream.len() != argmax.len() {
            return Err(Error::shape(format!(
                "maxpool2x2 backward: upstream {:?} does not match pooled size {}",
                upstream.shape(),
                argmax.len()
            )));
        }
        let mut dx = Tensor::zeros(&shape);
        let d = dx.data_mut();
        for (&idx, &g) in argmax.iter().zip(upstream.data()) {
            d[idx] += g;
        }
        Ok(dx)
    }
}

/// Changes the per-sample shape; the flat buffer is untouched.
#[derive(Clone, Debug)]
pub struct Reshape {
    pub target: Vec<usize>,
    cache: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(target: Vec<usize>) -> Self {
        Reshape { target, cache: None }
    }

    fn batched_target(&self, input: &Tensor) -> Result<Vec<usize>> {
        let per_sample: usize = self.target.iter().product();
        let b = input.leading();
        if input.rank() < 2 || input.len() != b * per_sample {
            return Err(Error::shape(format!(
                "reshape: cannot map {:?} to [B, {:?}]",
                input.shape(),
                self.target
            )));
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&self.target);
        Ok(shape)
    }

    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let shape = self.batched_target(input)?;
        input.clone().reshape(&shape)
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.infer(input)?;
        self.cache = Some(input.shape().to_vec());
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let shape = self.cache.take().ok_or_else(|| missing_cache(LayerKind::Reshape))?;
        upstream.clone().reshape(&shape)
    }
}

/// Row-wise softmax over `[B, K]`.
#[derive(Clone, Debug, Default)]
pub struct Softmax {
    cache: Option<Tensor>,
}

impl Softmax {
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        if input.rank() != 2 {
            return Err(Error::shape(format!("softmax: expected [B, K], got {:?}", input.shape())));
        }
        tensor::softmax(input)
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.infer(input)?;
        self.cache = Some(out.clone());
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let probs = self.cache.take().ok_or_else(|| missing_cache(LayerKind::Softmax))?;
        if upstream.shape() != probs.shape() {
            return Err(Error::shape(format!("softmax backward: upstream {:?}, cached {:?}", upstream.shape(), probs.shape())));
        }
        let k = probs.shape()[1];
        let mut dx = Vec::with_capacity(probs.len());
        for (s, g) in probs.data().chunks(k).zip(upstream.data().chunks(k)) {
            let dot: Scalar = s.iter().zip(g).map(|(a, b)| a * b).sum();
            dx.extend(s.iter().zip(g).map(|(si, gi)| si * (gi - dot)));
        }
        Ok(Tensor::from_parts(probs.shape().to_vec(), dx))
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    FullyConnected(FullyConnected),
    Conv2d(Conv2d),
    Relu(Relu),
    MaxPool2x2(MaxPool2x2),
    Reshape(Reshape),
    Softmax(Softmax),
}

macro_rules! dispatch {
    ($self:ident, $l:ident => $e:expr) => {
        match $self {
            Layer::FullyConnected($l) => $e,
            Layer::Conv2d($l) => $e,
            Layer::Relu($l) => $e,
            Layer::MaxPool2x2($l) => $e,
            Layer::Reshape($l) => $e,
            Layer::Softmax($l) => $e,
        }
    };
}

impl Layer {
    pub fn relu() -> Self {
        Layer::Relu(Relu::default())
    }

    pub fn maxpool() -> Self {
        Layer::MaxPool2x2(MaxPool2x2::default())
    }

    pub fn reshape(target: &[usize]) -> Self {
        Layer::Reshape(Reshape::new(target.to_vec()))
    }

    pub fn softmax() -> Self {
        Layer::Softmax(Softmax::default())
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::FullyConnected(_) => LayerKind::FullyConnected,
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Relu(_) => LayerKind::Relu,
            Layer::MaxPool2x2(_) => LayerKind::MaxPool2x2,
            Layer::Reshape(_) => LayerKind::Reshape,
            Layer::Softmax(_) => LayerKind::Softmax,
        }
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        dispatch!(self, l => l.forward(input))
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        dispatch!(self, l => l.backward(upstream))
    }

    /// Forward pass without touching the backward cache.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        dispatch!(self, l => l.infer(input))
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::shape(format!("{} cannot accept per-sample input {input:?}", self.kind().name()));
        match self {
            Layer::FullyConnected(fc) => {
                if input != [fc.inputs()] {
                    return Err(mismatch());
                }
                Ok(vec![fc.outputs()])
            }
            Layer::Conv2d(conv) => {
                let (kh, kw) = conv.kernel();
                match input {
                    [c, h, w] if *c == conv.in_channels() && *h >= kh && *w >= kw => {
                        Ok(vec![conv.out_channels(), h - kh + 1, w - kw + 1])
                    }
                    _ => Err(mismatch()),
                }
            }
            Layer::Relu(_) => Ok(input.to_vec()),
            Layer::MaxPool2x2(_) => match input {
                [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(mismatch()),
            },
            Layer::Reshape(r) => {
                if input.iter().product::<usize>() != r.target.iter().product::<usize>() {
                    return Err(mismatch());
                }
                Ok(r.target.clone())
            }
            Layer::Softmax(_) => match input {
                [_] => Ok(input.to_vec()),
                _ => Err(mismatch()),
            },
        }
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        match self {
            Layer::FullyConnected(fc) => {
                let trainable = !fc.frozen;
                let mut v = vec![ParamRef { name: "weight", value: &fc.weight, grad: &fc.weight_grad, trainable }];
                if let (Some(b), Some(g)) = (&fc.bias, &fc.bias_grad) {
                    v.push(ParamRef { name: "bias", value: b, grad: g, trainable });
                }
                v
            }
            Layer::Conv2d(conv) => {
                let mut v = vec![ParamRef { name: "weight", value: &conv.weight, grad: &conv.weight_grad, trainable: true }];
                if let (Some(b), Some(g)) = (&conv.bias, &conv.bias_grad) {
                    v.push(ParamRef { name: "bias", value: b, grad: g, trainable: true });
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        match self {
            Layer::FullyConnected(fc) => {
                let trainable = !fc.frozen;
                let mut v = vec![ParamMut { name: "weight", value: &mut fc.weight, grad: &mut fc.weight_grad, trainable }];
                if let (Some(b), Some(g)) = (&mut fc.bias, &mut fc.bias_grad) {
                    v.push(ParamMut { name: "bias", value: b, grad: g, trainable });
                }
                v
            }
            Layer::Conv2d(conv) => {
                let mut v = vec![ParamMut { name: "weight", value: &mut conv.weight, grad: &mut conv.weight_grad, trainable: true }];
                if let (Some(b), Some(g)) = (&mut conv.bias, &mut conv.bias_grad) {
                    v.push(ParamMut { name: "bias", value: b, grad: g, trainable: true });
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Number of inputs feeding each output unit; drives weight initialization.
    pub fn fan_in(&self) -> Option<usize> {
        match self {
            Layer::FullyConnected(fc) => Some(fc.inputs()),
            Layer::Conv2d(conv) => {
                let (kh, kw) = conv.kernel();
                Some(conv.in_channels() * kh * kw)
            }
            _ => None,
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::FullyConnected(l) => l.cache = None,
            Layer::Conv2d(l) => l.cache = None,
            Layer::Relu(l) => l.cache = None,
            Layer::MaxPool2x2(l) => l.cache = None,
            Layer::Reshape(l) => l.cache = None,
            Layer::Softmax(l) => l.cache = None,
        }
    }
}
