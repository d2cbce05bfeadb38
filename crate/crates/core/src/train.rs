//! Plain mini-batch SGD with checkpoint and resume.
//!
//! Each epoch draws a fresh permutation from the state's generator, then for
//! every batch runs forward, loss, backward, `p <- p - lr * grad` on every
//! trainable parameter, and zeroes the gradients. No momentum, weight decay
//! or schedule.
//!
//! With [`Reduction::Sum`] (the default) the gradient driving each step is
//! that of the batch-summed loss, so the learning rate acts per sample and a
//! batch step equals the first-order sum of per-sample SGD steps. Reported
//! losses are always batch means.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, BodyReader, BodyWriter, PayloadKind};
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::{LossFn, Network};
use crate::mnist::{permutation, BatchIterator, Dataset};
use crate::tensor::Scalar;

pub const DEFAULT_LEARNING_RATE: f64 = 0.0025;
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BATCH_SIZE: usize = 64;

/// Stream of the shuffling generator; parameter init uses streams `0..layers`.
const SHUFFLE_STREAM: u64 = u64::MAX;

/// How per-sample loss gradients are combined into one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::InvalidArgument(format!("unknown reduction '{other}' (expected sum|mean)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables checkpointing.
    pub checkpoint_every: usize,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            checkpoint_every: 0,
            reduction: Reduction::Sum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Progress counters plus the shuffling generator, enough to resume bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed SGD steps.
    pub step: u64,
    /// Mean training loss of the last completed epoch.
    pub running_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SHUFFLE_STREAM);
        TrainState {
            epoch: 0,
            step: 0,
            running_loss: f64::NAN,
            epoch_losses: Vec::new(),
            rng,
        }
    }
}

/// Emitted once per completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub seconds: f64,
    pub test_error: Option<f64>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Evaluated after every epoch when present.
    pub test: Option<&'a Dataset>,
    pub checkpoint_path: Option<PathBuf>,
}

/// `p <- p - lr * grad(p)` for every trainable parameter.
pub fn sgd_step(net: &mut Network, lr: f64) {
    let lr = lr as Scalar;
    for (_, p) in net.params_mut() {
        if !p.trainable {
            continue;
        }
        for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *w -= lr * g;
        }
    }
}

/// Trains from scratch with default options.
pub fn train(net: &mut Network, ds: &Dataset, cfg: &TrainConfig, sink: impl FnMut(&EpochReport)) -> Result<TrainState> {
    train_from(net, TrainState::new(cfg.seed), ds, cfg, &TrainOptions::default(), sink)
}

/// Continues training from `state` until `cfg.epochs` epochs are complete.
pub fn train_from(
    net: &mut Network,
    mut state: TrainState,
    ds: &Dataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    mut sink: impl FnMut(&EpochReport),
) -> Result<TrainState> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let loss_fn = LossFn::CrossEntropy;
    net.zero_grads();
    while state.epoch < cfg.epochs {
        let started = Instant::now();
        let epoch = state.epoch + 1;
        let order = permutation(ds.len(), &mut state.rng);
        let mut batches = BatchIterator::with_order(ds, cfg.batch_size, order)?;
        let mut loss_sum = 0.0;
        while let Some(idx) = batches.next_indices() {
            let (x, y) = ds.gather(idx);
            let logits = net.forward(&x)?;
            if !logits.all_finite() {
                return Err(Error::Divergence { epoch, step: state.step + 1, loss: f64::NAN });
            }
            let (loss, mut grad) = loss_fn.loss_and_grad(&logits, &y)?;
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step: state.step + 1, loss });
            }
            if cfg.reduction == Reduction::Sum {
                let b = y.len() as Scalar;
                grad.data_mut().iter_mut().for_each(|g| *g *= b);
            }
            net.backward(&grad)?;
            sgd_step(net, cfg.learning_rate);
            net.zero_grads();
            state.step += 1;
            loss_sum += loss * y.len() as f64;
        }
        state.epoch = epoch;
        state.running_loss = loss_sum / ds.len() as f64;
        state.epoch_losses.push(state.running_loss);
        let test_error = opts.test.map(|t| eval::error_rate(net, t)).transpose()?;
        sink(&EpochReport {
            epoch,
            step: state.step,
            mean_loss: state.running_loss,
            seconds: started.elapsed().as_secs_f64(),
            test_error,
        });
        if let Some(path) = &opts.checkpoint_path {
            if cfg.checkpoint_every > 0 && (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs) {
                save_checkpoint(path, net, &state, cfg)?;
            }
        }
    }
    Ok(state)
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: Network,
    pub state: TrainState,
    pub config: TrainConfig,
}

fn encode_state(w: &mut BodyWriter, state: &TrainState, cfg: &TrainConfig) {
    w.u64(state.epoch as u64);
    w.u64(state.step);
    w.f64(state.running_loss);
    w.bytes(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.u128(state.rng.get_word_pos());
    w.u32(state.epoch_losses.len());
    for &l in &state.epoch_losses {
        w.f64(l);
    }
    w.f64(cfg.learning_rate);
    w.u64(cfg.epochs as u64);
    w.u64(cfg.batch_size as u64);
    w.u64(cfg.seed);
    w.u64(cfg.checkpoint_every as u64);
    w.u8(match cfg.reduction {
        Reduction::Sum => 0,
        Reduction::Mean => 1,
    });
}

fn decode_state(r: &mut BodyReader) -> Result<(TrainState, TrainConfig)> {
    let epoch = r.u64()? as usize;
    let step = r.u64()?;
    let running_loss = r.f64()?;
    let mut rng = ChaCha8Rng::from_seed(r.bytes::<32>()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);
    let n = r.u32()?;
    let epoch_losses = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let config = TrainConfig {
        learning_rate: r.f64()?,
        epochs: r.u64()? as usize,
        batch_size: r.u64()? as usize,
        seed: r.u64()?,
        checkpoint_every: r.u64()? as usize,
        reduction: match r.u8()? {
            0 => Reduction::Sum,
            1 => Reduction::Mean,
            other => return Err(Error::Format(format!("unknown loss reduction {other}"))),
        },
    };
    Ok((
        TrainState {
            epoch,
            step,
            running_loss,
            epoch_losses,
            rng,
        },
        config,
    ))
}

pub fn checkpoint_to_bytes(net: &Network, state: &TrainState, cfg: &TrainConfig) -> Vec<u8> {
    let mut w = BodyWriter::new();
    container::encode_network(&mut w, net);
    encode_state(&mut w, state, cfg);
    container::wrap(PayloadKind::Checkpoint, &w.into_inner())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (kind, body) = container::unwrap(bytes)?;
    if kind != PayloadKind::Checkpoint {
        return Err(Error::Format(format!("expected a checkpoint container, found {kind:?}")));
    }
    let mut r = BodyReader::new(body);
    let net = container::decode_network(&mut r)?;
    let (state, config) = decode_state(&mut r)?;
    r.finish()?;
    Ok(Checkpoint { net, state, config })
}

pub fn save_checkpoint(path: &Path, net: &Network, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    container::write_atomic(path, &checkpoint_to_bytes(net, state, cfg))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint's network and training state.
pub fn resume(path: impl AsRef<Path>) -> Result<(Network, TrainState)> {
    let ck = load_checkpoint(path)?;
    Ok((ck.net, ck.state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{FullyConnected, Layer};
    use crate::tensor::Tensor;

    fn scalar_net(w: Scalar) -> Network {
        let fc = FullyConnected::new(Tensor::new(vec![1, 1], vec![w]).unwrap(), None).unwrap();
        Network::new(&[1], vec![Layer::FullyConnected(fc)]).unwrap()
    }

    fn weight(net: &Network) -> Scalar {
        net.params()[0].1.value.data()[0]
    }

    #[test]
    fn single_scalar_update() {
        let mut net = scalar_net(1.0);
        if let Layer::FullyConnected(fc) = &mut net.layers_mut()[0] {
            fc.weight_grad.data_mut()[0] = 2.0;
        }
        sgd_step(&mut net, 0.0025);
        assert!((weight(&net) - 0.995).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_and_zero_grads_change_nothing() {
        let mut net = scalar_net(0.3);
        net.forward(&Tensor::vector(vec![2.0])).unwrap();
        net.backward(&Tensor::vector(vec![1.0])).unwrap();
        sgd_step(&mut net, 0.0);
        assert_eq!(weight(&net), 0.3);
        net.zero_grads();
        sgd_step(&mut net, 0.5);
        assert_eq!(weight(&net), 0.3);
    }

    #[test]
    fn least_squares_step_descends() {
        // loss(w) = 0.5 * (w * x - t)^2 on a single sample
        let (x, t) = (1.5, 4.0);
        let loss = |w: Scalar| 0.5 * (w * x - t) * (w * x - t);
        let mut net = scalar_net(0.2);
        let before = loss(weight(&net));
        let y = net.forward(&Tensor::vector(vec![x])).unwrap();
        net.backward(&Tensor::vector(vec![y.data()[0] - t])).unwrap();
        sgd_step(&mut net, 0.1);
        assert!(loss(weight(&net)) < before);
    }

    #[test]
    fn frozen_layers_are_skipped() {
        let mut net = scalar_net(1.0);
        if let Layer::FullyConnected(fc) = &mut net.layers_mut()[0] {
            fc.frozen = true;
            fc.weight_grad.data_mut()[0] = 5.0;
        }
        sgd_step(&mut net, 1.0);
        assert_eq!(weight(&net), 1.0);
    }

    #[test]
    fn checkpoint_state_round_trip() {
        use rand::RngCore;
        let net = scalar_net(0.7);
        let mut state = TrainState::new(9);
        state.rng.next_u64();
        state.epoch = 3;
        state.step = 42;
        state.running_loss = 0.25;
        state.epoch_losses = vec![1.0, 0.5, 0.25];
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
        let ck = checkpoint_from_bytes(&checkpoint_to_bytes(&net, &state, &cfg)).unwrap();
        assert_eq!(ck.state, state);
        assert_eq!(ck.config, cfg);
        assert_eq!(weight(&ck.net), 0.7);
    }

    #[test]
    fn checkpoint_rejects_model_container() {
        let bytes = container::network_to_bytes(&scalar_net(1.0));
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Format(_))));
    }
}
