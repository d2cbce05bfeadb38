//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use deepcl::mnist::{self, Dataset, Split};
use deepcl::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture(split: Split) -> Dataset {
    Dataset::load(fixture_dir(), split).expect("fixture loads")
}

/// Full MNIST directory: `DEEPCL_DATA_DIR`, else `data/mnist` at the workspace root.
pub fn full_mnist_dir() -> Option<PathBuf> {
    let dir = match std::env::var_os(mnist::DATA_DIR_ENV) {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(mnist::DEFAULT_DATA_DIR),
    };
    mnist::is_available(&dir).then_some(dir)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.random_range(-1.0..1.0) * scale) as Scalar)
}

pub fn max_abs_diff(a: &[Scalar], b: &[Scalar]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).fold(0.0, f64::max)
}

/// Triple loop over `i, j, k`.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            for t in 0..k {
                c[i * p + j] += a.data()[i * k + t] as f64 * b.data()[t * p + j] as f64;
            }
        }
    }
    c
}

/// Direct valid cross-correlation, one output element at a time.
pub fn direct_conv(input: &Tensor, kernels: &Tensor, bias: &[Scalar]) -> Vec<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, kh, kw) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = Vec::with_capacity(o * oh * ow);
    for f in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bias[f] as f64;
                for ch in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            acc += input.at(&[ch, i + u, j + v]) as f64 * kernels.at(&[f, ch, u, v]) as f64;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Enumerates every 2x2 window; returns maxima and the flat index of the
/// first maximal element in scan order.
pub fn window_max(input: &Tensor) -> (Vec<Scalar>, Vec<usize>) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (mut vals, mut idx) = (Vec::new(), Vec::new());
    for ch in 0..c {
        for i in (0..h).step_by(2) {
            for j in (0..w).step_by(2) {
                let cells = [[ch, i, j], [ch, i, j + 1], [ch, i + 1, j], [ch, i + 1, j + 1]];
                let best = cells.iter().map(|p| input.at(p)).fold(Scalar::NEG_INFINITY, Scalar::max);
                let first = cells.iter().find(|p| input.at(*p) == best).unwrap();
                vals.push(best);
                idx.push(input.offset(first));
            }
        }
    }
    (vals, idx)
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Softmax entry `i` as `1 / sum_j exp(x_j - x_i)`, summed with compensation.
/// Algebraically independent of the max-shift form.
pub fn softmax_oracle(x: &[Scalar]) -> Vec<f64> {
    x.iter()
        .map(|&xi| 1.0 / compensated_sum(x.iter().map(|&xj| (xj as f64 - xi as f64).exp())))
        .collect()
}
