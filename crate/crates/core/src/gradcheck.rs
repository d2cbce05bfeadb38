//! Finite-difference verification of analytic gradients.
//!
//! Each check compares backward-pass gradients against central differences
//! `(L(t + eps) - L(t - eps)) / (2 eps)` for trainable parameters and for the
//! network input. The error measure is `|a - n| / max(|a|, |n|, floor)`.
//!
//! ReLU and max-pool are not differentiable everywhere. A coordinate whose
//! perturbation changes any ReLU sign or pooling winner is skipped and
//! counted, never compared.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Conv2d, FullyConnected, Layer, LossFn, Network};
use crate::model::{ModelKind, SensingConfig, MNIST_SIGNAL_LEN, NUM_CLASSES};
use crate::tensor::{maxpool2x2, Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that two
    /// near-zero gradients do not produce a meaningless ratio.
    pub floor: f64,
    pub batch: usize,
    /// Coordinates sampled per tensor in whole-network checks; 0 checks all.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Test hook: scales every analytic gradient by `1 + 1e-2`, emulating a
    /// faulty backward pass.
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: DEFAULT_EPS,
            tol: DEFAULT_TOL,
            floor: 1e-6,
            batch: 3,
            samples_per_tensor: 256,
            seed: 0,
            inject_fault: false,
        }
    }
}

const FAULT_SCALE: f64 = 1.0 + 1e-2;

/// Result for one gradient tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    /// `input` or `layer <i> <param>`.
    pub target: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// All targets of one checked network or layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub name: String,
    pub targets: Vec<TargetResult>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.targets.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.targets.iter().map(|t| t.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.targets.iter().map(|t| t.skipped).sum()
    }

    /// Every target checked at least once and all errors below `tol`.
    pub fn passed(&self, tol: f64) -> bool {
        self.targets.iter().all(|t| t.checked > 0) && self.max_rel_error() < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Scalar objective on the network output: value plus gradient w.r.t. the output.
pub trait Objective {
    fn value(&self, output: &Tensor) -> Result<f64>;
    fn grad(&self, output: &Tensor) -> Result<Tensor>;
}

/// `L = sum(c * output)` for a fixed tensor `c`; exercises arbitrary upstream gradients.
pub struct Projection(pub Tensor);

impl Objective for Projection {
    fn value(&self, output: &Tensor) -> Result<f64> {
        if output.shape() != self.0.shape() {
            return Err(Error::shape(format!("projection {:?} vs output {:?}", self.0.shape(), output.shape())));
        }
        Ok(output.data().iter().zip(self.0.data()).map(|(&o, &c)| o as f64 * c as f64).sum())
    }

    fn grad(&self, _: &Tensor) -> Result<Tensor> {
        Ok(self.0.clone())
    }
}

/// Mean cross-entropy against fixed targets.
pub struct CrossEntropy(pub Vec<u8>);

impl Objective for CrossEntropy {
    fn value(&self, output: &Tensor) -> Result<f64> {
        Ok(LossFn::CrossEntropy.loss_and_grad(output, &self.0)?.0 as f64)
    }

    fn grad(&self, output: &Tensor) -> Result<Tensor> {
        Ok(LossFn::CrossEntropy.loss_and_grad(output, &self.0)?.1)
    }
}

/// ReLU signs and pooling winners along a forward pass.
fn kink_pattern(net: &Network, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let acts = net.trace(x)?;
    let mut pattern = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let input = if i == 0 { x } else { &acts[i - 1] };
        match layer {
            Layer::Relu(_) => pattern.extend(input.data().iter().map(|&v| (v > 0.0) as usize)),
            Layer::MaxPool2x2(_) => pattern.extend(maxpool2x2(input)?.argmax),
            _ => {}
        }
    }
    let out = acts.into_iter().last().unwrap_or_else(|| x.clone());
    Ok((out, pattern))
}

enum Coord {
    Input,
    Param(usize),
}

/// Overwrites one coordinate and returns its previous value.
fn set_coord(net: &mut Network, x: &mut Tensor, coord: &Coord, j: usize, v: Scalar) -> Scalar {
    match coord {
        Coord::Input => std::mem::replace(&mut x.data_mut()[j], v),
        Coord::Param(p) => std::mem::replace(&mut net.params_mut()[*p].1.value.data_mut()[j], v),
    }
}

fn coord_value(net: &Network, x: &Tensor, coord: &Coord, j: usize) -> Scalar {
    match coord {
        Coord::Input => x.data()[j],
        Coord::Param(p) => net.params()[*p].1.value.data()[j],
    }
}

/// Checks `net` at input `x` (batched) under `objective`.
pub fn check_network(name: &str, net: &mut Network, x: &Tensor, objective: &dyn Objective, cfg: &GradcheckConfig) -> Result<GradReport> {
    net.zero_grads();
    let out = net.forward(x)?;
    let input_grad = net.backward(&objective.grad(&out)?)?;
    let (_, base_pattern) = kink_pattern(net, x)?;

    let mut targets: Vec<(String, Coord, Vec<Scalar>)> = vec![("input".into(), Coord::Input, input_grad.into_data())];
    for (p, (layer, param)) in net.params().into_iter().enumerate() {
        if param.trainable {
            targets.push((format!("layer {layer} {}", param.name), Coord::Param(p), param.grad.data().to_vec()));
        }
    }
    net.zero_grads();

    let eps = cfg.eps as Scalar;
    let scale = if cfg.inject_fault { FAULT_SCALE } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = x.clone();
    let mut results = Vec::with_capacity(targets.len());
    for (label, coord, analytic) in targets {
        let n = analytic.len();
        let coords: Vec<usize> = if cfg.samples_per_tensor == 0 || cfg.samples_per_tensor >= n {
            (0..n).collect()
        } else {
            let mut picked = index::sample(&mut rng, n, cfg.samples_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut r = TargetResult { target: label, max_rel_error: 0.0, checked: 0, skipped: 0 };
        for j in coords {
            let v = coord_value(net, &x, &coord, j);
            let (hi, lo) = (v + eps, v - eps);
            set_coord(net, &mut x, &coord, j, hi);
            let (out_plus, pat_plus) = kink_pattern(net, &x)?;
            set_coord(net, &mut x, &coord, j, lo);
            let (out_minus, pat_minus) = kink_pattern(net, &x)?;
            set_coord(net, &mut x, &coord, j, v);
            if pat_plus != base_pattern || pat_minus != base_pattern {
                r.skipped += 1;
                continue;
            }
            let numeric = (objective.value(&out_plus)? - objective.value(&out_minus)?) / (hi - lo) as f64;
            let err = relative_error(analytic[j] as f64 * scale, numeric, cfg.floor);
            r.max_rel_error = r.max_rel_error.max(err);
            r.checked += 1;
        }
        results.push(r);
    }
    Ok(GradReport { name: name.to_string(), targets: results })
}

fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Uniform::new(lo, hi).expect("valid range");
    Tensor::from_fn(shape, |_| dist.sample(rng) as Scalar)
}

fn batched(batch: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend_from_slice(per_sample);
    s
}

/// Checks one layer in isolation under a random projection objective.
/// Parameters and biases are randomized.
pub fn check_layer(mut layer: Layer, input_shape: &[usize], cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for p in layer.params_mut() {
        let shape = p.value.shape().to_vec();
        *p.value = uniform_tensor(&shape, -1.0, 1.0, &mut rng);
    }
    let name = layer.kind().name();
    let mut net = Network::new(input_shape, vec![layer])?;
    let x = uniform_tensor(&batched(cfg.batch, input_shape), -1.0, 1.0, &mut rng);
    let out_shape = batched(cfg.batch, net.output_shape());
    let projection = Projection(uniform_tensor(&out_shape, -1.0, 1.0, &mut rng));
    let exhaustive = GradcheckConfig { samples_per_tensor: 0, ..cfg.clone() };
    check_network(name, &mut net, &x, &projection, &exhaustive)
}

/// One small instance of every layer kind with its per-sample input shape.
pub fn layer_cases() -> Vec<(Layer, Vec<usize>)> {
    vec![
        (Layer::FullyConnected(FullyConnected::zeroed(7, 5, true)), vec![7]),
        (Layer::Conv2d(Conv2d::zeroed(2, 3, 3, true)), vec![2, 6, 6]),
        (Layer::relu(), vec![10]),
        (Layer::maxpool(), vec![2, 6, 6]),
        (Layer::reshape(&[2, 3, 4]), vec![24]),
        (Layer::softmax(), vec![10]),
    ]
}

/// Checks a freshly built MNIST-sized network under mean cross-entropy on a
/// random batch with inputs in `[0, 1]`.
pub fn check_model(kind: ModelKind, rate: f64, cfg: &GradcheckConfig) -> Result<GradReport> {
    let sensing = SensingConfig::new(MNIST_SIGNAL_LEN, rate)?;
    let mut net = kind.build(sensing, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let x = uniform_tensor(&[cfg.batch, MNIST_SIGNAL_LEN], 0.0, 1.0, &mut rng);
    let labels = Uniform::new(0, NUM_CLASSES as u8).expect("valid range");
    let targets: Vec<u8> = (0..cfg.batch).map(|_| labels.sample(&mut rng)).collect();
    let name = format!("{kind} R={rate}");
    check_network(&name, &mut net, &x, &CrossEntropy(targets), cfg)
}

/// Every layer kind, then the proposed network at R = 0.25 and R = 0.01 and
/// the baseline at R = 0.01.
pub fn standard_suite(cfg: &GradcheckConfig) -> Result<Vec<GradReport>> {
    let mut reports = layer_cases()
        .into_iter()
        .map(|(layer, shape)| check_layer(layer, &shape, cfg))
        .collect::<Result<Vec<_>>>()?;
    for (kind, rate) in [(ModelKind::Proposed, 0.25), (ModelKind::Proposed, 0.01), (ModelKind::Baseline, 0.01)] {
        reports.push(check_model(kind, rate, cfg)?);
    }
    Ok(reports)
}
