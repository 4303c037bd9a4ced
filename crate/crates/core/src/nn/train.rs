//! Mini-batch SGD training loop with seeded shuffling.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{DenseGrads, Layer, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Loss applied to the network's final output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy over logits; labels are class indices.
    CrossEntropy,
    /// Binary cross-entropy on a single sigmoid output; labels are 0/1.
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
}

/// Per-epoch mean loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }
}

const BCE_CLAMP: f64 = 1e-12;

/// Loss value and gradient with respect to the network output.
pub fn loss_and_grad<S: Scalar>(
    kind: LossKind,
    output: &Tensor<S>,
    label: f64,
) -> Result<(f64, Tensor<S>)> {
    match kind {
        LossKind::CrossEntropy => {
            let class = label as usize;
            let k = output.len();
            if class >= k {
                return Err(Error::Argument(format!(
                    "label {class} out of range for {k} outputs"
                )));
            }
            // Stable log-softmax: subtract the max before exponentiating.
            let max = output
                .data()
                .iter()
                .cloned()
                .fold(S::neg_infinity(), S::max);
            let exps: Vec<S> = output.data().iter().map(|&z| (z - max).exp()).collect();
            let sum: S = exps.iter().cloned().sum();
            let loss = -((output.data()[class] - max).as_f64() - sum.as_f64().ln());
            let grad = exps
                .iter()
                .enumerate()
                .map(|(i, &e)| {
                    let p = e / sum;
                    if i == class {
                        p - S::one()
                    } else {
                        p
                    }
                })
                .collect();
            Ok((loss, Tensor::from_vec(grad)))
        }
        LossKind::BinaryCrossEntropy => {
            if output.len() != 1 {
                return Err(Error::Argument(format!(
                    "binary cross-entropy needs a single output, got {}",
                    output.len()
                )));
            }
            let p = output.data()[0].as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = label;
            let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            let grad = (p - y) / (p * (1.0 - p));
            Ok((loss, Tensor::from_vec(vec![S::of(grad)])))
        }
    }
}

/// Trains `net` in place with plain mini-batch SGD.
///
/// Deterministic for a fixed seed: the shuffle order is the only source
/// of randomness. Zero epochs leave the parameters untouched.
pub fn fit<S: Scalar>(
    net: &mut Network<S>,
    inputs: &[Tensor<S>],
    labels: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if inputs.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.batch_size > inputs.len() {
        return Err(Error::Argument(format!(
            "batch_size {} invalid for {} samples",
            cfg.batch_size,
            inputs.len()
        )));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Argument("learning_rate must be positive".into()));
    }

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = TrainHistory {
        epoch_loss: Vec::with_capacity(cfg.epochs),
    };

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<DenseGrads<S>>> = vec![None; net.layers().len()];
            for &idx in batch {
                let trace = net.forward(&inputs[idx])?;
                let (loss, out_grad) = loss_and_grad(cfg.loss, trace.output(), labels[idx])?;
                epoch_loss += loss;
                let grads = net.backward(&trace, &out_grad)?;
                for (slot, g) in acc.iter_mut().zip(grads.layers) {
                    match (slot.as_mut(), g) {
                        (None, Some(g)) => *slot = Some(g),
                        (Some(s), Some(g)) => {
                            for (a, b) in s.weights.data_mut().iter_mut().zip(g.weights.data()) {
                                *a += *b;
                            }
                            for (a, b) in s.bias.data_mut().iter_mut().zip(g.bias.data()) {
                                *a += *b;
                            }
                        }
                        _ => {}
                    }
                }
            }

            let step = S::of(cfg.learning_rate / batch.len() as f64);
            for (layer, grad) in net.layers_mut().iter_mut().zip(&acc) {
                if let (Layer::Dense { weights, bias }, Some(g)) = (layer, grad) {
                    for (w, d) in weights.data_mut().iter_mut().zip(g.weights.data()) {
                        *w -= step * *d;
                    }
                    for (b, d) in bias.data_mut().iter_mut().zip(g.bias.data()) {
                        *b -= step * *d;
                    }
                }
            }
        }

        let mean = epoch_loss / inputs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("epoch loss diverged".into()));
        }
        history.epoch_loss.push(mean);
    }

    Ok(history)
}
