use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, Scalar, Tensor};

/// Training objective applied to the network's logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossFn {
    /// Mean negative log-likelihood of the target under `log_softmax(logits)`.
    #[default]
    CrossEntropy,
}

impl LossFn {
    pub fn loss_and_grad(&self, logits: &Tensor, targets: &[u8]) -> Result<(Scalar, Tensor)> {
        match self {
            LossFn::CrossEntropy => cross_entropy(logits, targets),
        }
    }
}

pub fn loss_and_grad(loss: LossFn, logits: &Tensor, targets: &[u8]) -> Result<(Scalar, Tensor)> {
    loss.loss_and_grad(logits, targets)
}

/// Loss `-(1/B) sum_b log_softmax(logits_b)[t_b]` and its gradient
/// `(softmax(logits) - onehot(t)) / B`, both derived from the log-sum-exp form.
fn cross_entropy(logits: &Tensor, targets: &[u8]) -> Result<(Scalar, Tensor)> {
    let [b, k] = match logits.shape() {
        [b, k] => [*b, *k],
        s => return Err(Error::shape(format!("cross entropy: expected [B, K] logits, got {s:?}"))),
    };
    if targets.len() != b {
        return Err(Error::shape(format!("cross entropy: {} targets for batch of {b}", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= k) {
        return Err(Error::InvalidArgument(format!("target {t} outside 0..{k}")));
    }
    let log_probs = log_softmax_rows(logits)?;
    let scale = 1.0 / b as Scalar;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * k);
    for (row, &t) in log_probs.data().chunks(k).zip(targets) {
        loss -= row[t as usize];
        grad.extend(
            row.iter()
                .enumerate()
                .map(|(j, &lp)| (lp.exp() - if j == t as usize { 1.0 } else { 0.0 }) * scale),
        );
    }
    Ok((loss * scale, Tensor::new(vec![b, k], grad)?))
}
