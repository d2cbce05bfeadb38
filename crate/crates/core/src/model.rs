//! Network assembly: the jointly trained sensing network, the frozen
//! random-sensing baseline, and detachment of the sensing stage.
//!
//! Layer layout of the proposed network (indices are layer positions):
//!
//! ```text
//!  0 FC N->M (sensing)     6 ReLU              12 FC 256->120
//!  1 ReLU                  7 MaxPool 2x2       13 ReLU
//!  2 FC M->N (expansion)   8 Conv 5x5, 6->16   14 FC 120->84
//!  3 ReLU                  9 ReLU              15 ReLU
//!  4 Reshape to 1xHxW     10 MaxPool 2x2       16 FC 84->10 (logits)
//!  5 Conv 5x5, 1->6       11 Reshape to 256
//! ```
//!
//! The baseline replaces layers 0-3 with a frozen Gaussian `Phi` followed by
//! a frozen `Phi^T` (no activations), so its classifier starts at index 2.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Conv2d, FullyConnected, Layer, NetKind, Network};
use crate::tensor::{relu, Scalar, Shape2D, Tensor};

pub const MNIST_SIGNAL_LEN: usize = 784;
pub const NUM_CLASSES: usize = 10;
pub const KERNEL: usize = 5;

/// Number of layers in front of the classifier in a proposed network.
pub const PROPOSED_FRONT_END: usize = 4;
/// Number of layers in front of the classifier in a baseline network.
pub const BASELINE_FRONT_END: usize = 2;
/// Layers making up the sensing stage (FC + ReLU) of a proposed network.
pub const SENSING_STAGE: usize = 2;

/// Compression geometry: signal length `n`, sensing rate `rate`, and
/// measurement count `m = round_half_up(n * rate)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensingConfig {
    pub n: usize,
    pub rate: f64,
    pub m: usize,
}

impl SensingConfig {
    pub fn new(n: usize, rate: f64) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0 && rate <= 1.0) {
            return Err(Error::InvalidArgument(format!("sensing rate {rate} outside (0, 1]")));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("signal length must be positive".into()));
        }
        let m = (n as f64 * rate + 0.5).floor() as usize;
        if m == 0 {
            return Err(Error::InvalidArgument(format!("rate {rate} yields zero measurements for n = {n}")));
        }
        Ok(SensingConfig { n, rate, m: m.min(n) })
    }

    pub fn mnist(rate: f64) -> Result<Self> {
        Self::new(MNIST_SIGNAL_LEN, rate)
    }
}

impl fmt::Display for SensingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N={} R={} M={}", self.n, self.rate, self.m)
    }
}

/// Which network family to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Proposed,
    Baseline,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Proposed => "proposed",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn build(&self, cfg: SensingConfig, seed: u64) -> Result<Network> {
        match self {
            ModelKind::Proposed => build_cl_net(cfg, seed),
            ModelKind::Baseline => build_baseline_net(cfg, seed),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "proposed" => Ok(ModelKind::Proposed),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::InvalidArgument(format!("unknown model kind '{other}' (expected proposed|baseline)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetOptions {
    /// Bias on the sensing and expansion layers. Disable for the bias-free ablation.
    pub sensing_bias: bool,
}

impl Default for NetOptions {
    fn default() -> Self {
        NetOptions { sensing_bias: true }
    }
}

/// Deterministic per-layer generator: the stream depends only on `(seed, layer_index)`.
pub fn layer_rng(seed: u64, layer_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer_index as u64);
    rng
}

/// Weights ~ U(-s, s) with `s = sqrt(1 / fan_in)`, biases zero.
pub fn init_params(layer: &mut Layer, seed: u64, layer_index: usize) {
    let Some(fan_in) = layer.fan_in() else { return };
    let s = (1.0 / fan_in as f64).sqrt();
    let dist = Uniform::new(-s, s).expect("finite positive bound");
    let mut rng = layer_rng(seed, layer_index);
    for p in layer.params_mut() {
        if p.name == "bias" {
            p.value.fill(0.0);
        } else {
            p.value.data_mut().iter_mut().for_each(|w| *w = dist.sample(&mut rng) as Scalar);
        }
    }
}

/// LeNet-style classifier over a single-channel `side x side` image.
fn classifier_layers(side: usize) -> Result<Vec<Layer>> {
    if side < KERNEL {
        return Err(Error::shape(format!("image side {side} smaller than the {KERNEL}x{KERNEL} kernel")));
    }
    let s1 = side - KERNEL + 1;
    if s1 % 2 != 0 || s1 / 2 < KERNEL || (s1 / 2 - KERNEL + 1) % 2 != 0 {
        return Err(Error::shape(format!("image side {side} incompatible with two conv+pool stages")));
    }
    let s2 = (s1 / 2 - KERNEL + 1) / 2;
    let flat = 16 * s2 * s2;
    Ok(vec![
        Layer::Conv2d(Conv2d::zeroed(1, 6, KERNEL, true)),
        Layer::relu(),
        Layer::maxpool(),
        Layer::Conv2d(Conv2d::zeroed(6, 16, KERNEL, true)),
        Layer::relu(),
        Layer::maxpool(),
        Layer::reshape(&[flat]),
        Layer::FullyConnected(FullyConnected::zeroed(flat, 120, true)),
        Layer::relu(),
        Layer::FullyConnected(FullyConnected::zeroed(120, 84, true)),
        Layer::relu(),
        Layer::FullyConnected(FullyConnected::zeroed(84, NUM_CLASSES, true)),
    ])
}

pub fn build_cl_net(cfg: SensingConfig, seed: u64) -> Result<Network> {
    build_cl_net_with(cfg, seed, NetOptions::default())
}

/// Proposed network: learned sensing `v = relu(Phi x + b)`, learned expansion
/// `z = relu(Psi v + c)`, then the convolutional classifier on `z` as an image.
pub fn build_cl_net_with(cfg: SensingConfig, seed: u64, opts: NetOptions) -> Result<Network> {
    let plane = Shape2D::square(cfg.n)?;
    let mut layers = vec![
        Layer::FullyConnected(FullyConnected::zeroed(cfg.n, cfg.m, opts.sensing_bias)),
        Layer::relu(),
        Layer::FullyConnected(FullyConnected::zeroed(cfg.m, cfg.n, opts.sensing_bias)),
        Layer::relu(),
        Layer::reshape(&[1, plane.height, plane.width]),
    ];
    layers.extend(classifier_layers(plane.height)?);
    for (i, layer) in layers.iter_mut().enumerate() {
        init_params(layer, seed, i);
    }
    Network::with_kind(&[cfg.n], layers, NetKind::Proposed(cfg))
}

/// Random-sensing baseline: frozen `Phi` with i.i.d. N(0, 1/M) entries, the
/// reprojection `z = Phi^T (Phi x)`, then the same classifier. Only the
/// classifier trains.
pub fn build_baseline_net(cfg: SensingConfig, seed: u64) -> Result<Network> {
    let plane = Shape2D::square(cfg.n)?;
    let phi = gaussian_matrix(cfg.m, cfg.n, seed);
    let mut sensing = FullyConnected::new(phi.clone(), None)?;
    sensing.frozen = true;
    let mut reproject = FullyConnected::new(transpose(&phi), None)?;
    reproject.frozen = true;
    let mut layers = vec![
        Layer::FullyConnected(sensing),
        Layer::FullyConnected(reproject),
        Layer::reshape(&[1, plane.height, plane.width]),
    ];
    layers.extend(classifier_layers(plane.height)?);
    for (i, layer) in layers.iter_mut().enumerate().skip(BASELINE_FRONT_END) {
        init_params(layer, seed, i);
    }
    Network::with_kind(&[cfg.n], layers, NetKind::Baseline(cfg))
}

/// `m x n` matrix with i.i.d. N(0, 1/m) entries drawn from layer stream 0.
pub fn gaussian_matrix(m: usize, n: usize, seed: u64) -> Tensor {
    let mut rng = layer_rng(seed, 0);
    let scale = 1.0 / (m as f64).sqrt();
    Tensor::from_fn(&[m, n], |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        (z * scale) as Scalar
    })
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    Tensor::from_fn(&[c, r], |i| a.data()[(i % r) * c + i / r])
}

/// `z = Phi^T y`: lifts measurements back to signal dimension.
pub fn reproject(phi: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (m, n) = (phi.shape()[0], phi.shape()[1]);
    if y.shape() != [m] {
        return Err(Error::shape(format!("reproject: measurements {:?} do not match Phi {:?}", y.shape(), phi.shape())));
    }
    let mut z = vec![0.0; n];
    crate::tensor::gemm(1, m, n, y.data(), false, phi.data(), false, &mut z, 0.0);
    Ok(Tensor::vector(z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SensingKind {
    Learned,
    RandomGaussian,
}

/// A standalone `M x N` measurement operator.
#[derive(Clone, Debug, PartialEq)]
pub struct SensingMatrix {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub kind: SensingKind,
}

impl SensingMatrix {
    pub fn new(weights: Tensor, bias: Option<Tensor>, kind: SensingKind) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::shape(format!("sensing matrix must be [M, N], got {:?}", weights.shape())));
        }
        if let Some(b) = &bias {
            if b.shape() != [weights.shape()[0]] {
                return Err(Error::shape(format!("sensing bias {:?} does not match {:?}", b.shape(), weights.shape())));
            }
        }
        Ok(SensingMatrix { weights, bias, kind })
    }

    pub fn m(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn bias_or_zeros(&self) -> Tensor {
        self.bias.clone().unwrap_or_else(|| Tensor::zeros(&[self.m()]))
    }

    fn as_layer(&self) -> FullyConnected {
        let mut fc = FullyConnected::new(self.weights.clone(), self.bias.clone()).expect("validated shapes");
        fc.frozen = self.kind == SensingKind::RandomGaussian;
        fc
    }

    /// Applies the sensing stage to `[N]` or `[B, N]` signals: `relu(Phi x + b)`
    /// for a learned matrix, plain `Phi x` for a random one.
    pub fn measure(&self, x: &Tensor) -> Result<Tensor> {
        let single = x.shape() == [self.n()];
        let batch = if single { x.clone().reshape(&[1, self.n()])? } else { x.clone() };
        let mut y = self.as_layer().infer(&batch)?;
        if self.kind == SensingKind::Learned {
            y = relu(&y);
        }
        if single {
            y.reshape(&[self.m()])
        } else {
            Ok(y)
        }
    }

    /// Writes `M` rows of `N + 1` comma-separated values; the last column is the bias.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        let bias = self.bias_or_zeros();
        for (row, b) in self.weights.data().chunks(self.n()).zip(bias.data()) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(b.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout produced by [`SensingMatrix::write_csv`] as a learned matrix.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut weights = Vec::new();
        let mut bias = Vec::new();
        let mut width = None;
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<Scalar>().map_err(|e| Error::Format(format!("bad number '{s}': {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() < 2 || width.is_some_and(|w| w != vals.len()) {
                return Err(Error::Format("ragged sensing-matrix CSV".into()));
            }
            width = Some(vals.len());
            let (b, w) = vals.split_last().expect("len >= 2");
            weights.extend_from_slice(w);
            bias.push(*b);
        }
        let m = bias.len();
        let n = width.ok_or_else(|| Error::Format("empty sensing-matrix CSV".into()))? - 1;
        SensingMatrix::new(Tensor::new(vec![m, n], weights)?, Some(Tensor::vector(bias)), SensingKind::Learned)
    }
}

/// Post-ReLU measurement vector `v` of a proposed network.
pub fn sense(net: &Network, x: &Tensor) -> Result<Tensor> {
    let NetKind::Proposed(cfg) = net.kind() else {
        return Err(Error::Unsupported(format!("sense requires a proposed network, got {}", net.kind().name())));
    };
    let single = x.shape() == [cfg.n];
    let mut v = if single { x.clone().reshape(&[1, cfg.n])? } else { x.clone() };
    for (i, layer) in net.layers()[..SENSING_STAGE].iter().enumerate() {
        v = layer.infer(&v).map_err(|e| e.at_layer(i))?;
    }
    if single {
        v.reshape(&[cfg.m])
    } else {
        Ok(v)
    }
}

/// Sensing matrix of a network: the learned `Phi` of a proposed net or the
/// frozen Gaussian `Phi` of a baseline.
pub fn sensing_matrix(net: &Network) -> Result<SensingMatrix> {
    let kind = match net.kind() {
        NetKind::Proposed(_) => SensingKind::Learned,
        NetKind::Baseline(_) => SensingKind::RandomGaussian,
        other => return Err(Error::Unsupported(format!("{} network has no sensing stage", other.name()))),
    };
    match &net.layers()[0] {
        Layer::FullyConnected(fc) => SensingMatrix::new(fc.weight.clone(), fc.bias.clone(), kind),
        _ => Err(Error::Format("first layer is not fully connected".into())),
    }
}

/// Splits a proposed network into its sensing matrix and the inference
/// network that consumes `M`-dimensional measurement vectors.
pub fn detach_sensing(net: &Network) -> Result<(SensingMatrix, Network)> {
    let NetKind::Proposed(cfg) = net.kind() else {
        return Err(Error::Unsupported(format!("cannot detach sensing from a {} network", net.kind().name())));
    };
    let sm = sensing_matrix(net)?;
    let mut copy = net.clone();
    copy.clear_caches();
    let (_, inference) = copy.split_at(SENSING_STAGE, NetKind::Custom, NetKind::Inference(cfg))?;
    Ok((sm, inference))
}

/// Inverse of [`detach_sensing`]: rebuilds the full proposed network.
pub fn attach_sensing(sm: &SensingMatrix, inference: &Network) -> Result<Network> {
    if sm.kind != SensingKind::Learned {
        return Err(Error::Unsupported("only learned sensing matrices can be attached".into()));
    }
    if inference.input_shape() != [sm.m()] {
        return Err(Error::shape(format!(
            "sensing matrix produces {} measurements, inference network expects {:?}",
            sm.m(),
            inference.input_shape()
        )));
    }
    let cfg = match inference.kind() {
        NetKind::Inference(cfg) if cfg.n == sm.n() => cfg,
        _ => SensingConfig {
            n: sm.n(),
            rate: sm.m() as f64 / sm.n() as f64,
            m: sm.m(),
        },
    };
    let mut layers = vec![Layer::FullyConnected(sm.as_layer()), Layer::relu()];
    let mut rest = inference.clone();
    rest.clear_caches();
    layers.extend(rest.into_layers());
    Network::with_kind(&[sm.n()], layers, NetKind::Proposed(cfg))
}
