//! The attacked classifier: logit scores, softmax, label prediction and
//! the training entry point.
//!
//! Labels come straight from the logits — softmax is monotone, so the
//! class with the highest probability is the class with the highest
//! confidence score.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::io::{decode_network, encode_network};
use crate::nn::train::{fit, LossKind, TrainConfig};
use crate::nn::Network;
use crate::{Error, Real, Result, Tensor, TrainHistory, PIXEL_MAX, PIXEL_MIN};

/// Per-class confidence scores from the last hidden layer (not softmaxed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logit {
    pub scores: Vec<Real>,
}

impl Logit {
    pub fn new(scores: Vec<Real>) -> Self {
        Self { scores }
    }

    pub fn num_classes(&self) -> usize {
        self.scores.len()
    }

    /// Index of the largest score; ties break to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate().skip(1) {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }

    ///

    pub fn margin(&self, target: usize) -> Real {
        let runner_up = self
            .scores
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != target)
            .map(|(_, &s)| s)
            .fold(Real::NEG_INFINITY, Real::max);
        self.scores[target] - runner_up
    }
}

/// The victim model: a dense network plus its class count.
#[derive(Debug, Clone, PartialEq)]
pub struct VictimModel {
    net: Network<Real>,
    num_classes: usize,
    input_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VictimConfig {
    /// Hidden layer widths; each is followed by a ReLU.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            train: TrainConfig {
                learning_rate: 0.1,
                epochs: 15,
                batch_size: 32,
                seed: 1,
                loss: LossKind::CrossEntropy,
            },
        }
    }
}

/// A trained victim with measured accuracies.
#[derive(Debug, Clone)]
pub struct TrainedVictim {
    pub model: VictimModel,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub history: TrainHistory,
}

impl VictimModel {
    pub fn new(net: Network<Real>, num_classes: usize) -> Result<Self> {
        if net.output_dim() != num_classes {
            return Err(Error::Argument(format!(
                "network outputs {} scores for {} classes",
                net.output_dim(),
                num_classes
            )));
        }
        Ok(Self {
            input_dim: net.input_dim(),
            net,
            num_classes,
        })
    }

    pub fn net(&self) -> &Network<Real> {
        &self.net
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn check_domain(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "input has {} pixels, victim expects {}",
                x.len(),
                self.input_dim
            )));
        }
        if let Some(&bad) = x
            .data()
            .iter()
            .find(|&&p| !(PIXEL_MIN..=PIXEL_MAX).contains(&p) || !p.is_finite())
        {
            return Err(Error::Domain(format!(
                "pixel value {bad} outside [{PIXEL_MIN}, {PIXEL_MAX}]"
            )));
        }
        Ok(())
    }

    /// Confidence scores `h(x)`; the input must already be normalized
    /// into the pixel box.
    pub fn logits(&self, x: &Tensor) -> Result<Logit> {
        self.check_domain(x)?;
        let trace = self.net.forward(x)?;
        Ok(Logit::new(trace.output().data().to_vec()))
    }

    /// Predicted label: argmax over logits, ties to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.logits(x)?.argmax())
    }
}

/// Numerically stable softmax; shifts by the max before exponentiating.
pub fn softmax(logit: &Logit) -> Vec<Real> {
    let max = logit.scores.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let exps: Vec<Real> = logit.scores.iter().map(|&y| (y - max).exp()).collect();
    let sum: Real = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Fraction of the dataset the model labels correctly.
pub fn accuracy(model: &VictimModel, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    let mut correct = 0usize;
    for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
        if model.predict(img)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Trains a victim on `train`, reporting accuracy on both sets.
pub fn train_victim(
    train: &Dataset,
    test: &Dataset,
    cfg: &VictimConfig,
) -> Result<TrainedVictim> {
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let k = train.num_classes.max(test.num_classes);
    let mut rng = StdRng::seed_from_u64(cfg.train.seed);
    let mut net = Network::mlp(train.input_dim(), &cfg.hidden, k, &mut rng)?;
    let labels: Vec<f64> = train.labels.iter().map(|&l| l as f64).collect();
    let history = fit(&mut net, &train.images, &labels, &cfg.train)?;
    let model = VictimModel::new(net, k)?;
    Ok(TrainedVictim {
        train_accuracy: accuracy(&model, train)?,
        test_accuracy: accuracy(&model, test)?,
        model,
    history,
    })
}

const VICTIM_MAGIC: &[u8; 8] = b"HVICTIM1";

/// Victim file: metadata block (class count, normalization constants)
/// followed by the network in the shared model format.
pub fn save_victim(model: &VictimModel, seed_provenance: u64, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(VICTIM_MAGIC);
    out.extend_from_slice(&(model.num_classes as u32).to_le_bytes());
    // Normalization applied at ingestion: pixel = raw * scale + offset.
    out.extend_from_slice(&(1.0 / 255.0f64).to_le_bytes());
    out.extend_from_slice(&(-0.5f64).to_le_bytes());
    out.extend_from_slice(&encode_network(&model.net, seed_provenance));
    fs::write(path, out)?;
    Ok(())
}

pub fn load_victim(path: impl AsRef<Path>) -> Result<VictimModel> {
    let bytes = fs::read(path)?;
    if bytes.len() < 28 {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: "victim file too short for its header".into(),
        });
    }
    if &bytes[..8] != VICTIM_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad victim magic".into(),
        });
    }
    let num_classes = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let (net, _seed) = decode_network::<Real>(&bytes[28..], 28)?;
    VictimModel::new(net, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::nn::Layer;
    use rand::Rng;

    fn toy_victim() -> VictimModel {
        // 2 pixels -> 3 classes, fixed weights.
        let w = Tensor::new(vec![2, 3], vec![2.0, -1.0, 0.5, 0.0, 1.0, -0.5]).unwrap();
        let b = Tensor::from_vec(vec![0.1, 0.0, -0.1]);
        let net = Network::new(2, vec![Layer::dense(w, b).unwrap()]).unwrap();
        VictimModel::new(net, 3).unwrap()
    }

    #[test]
    fn logits_match_direct_forward() {
        let model = toy_victim();
        let x = Tensor::from_vec(vec![0.2, -0.3]);
        let direct = model.net().forward(&x).unwrap();
        let logit = model.logits(&x).unwrap();
        assert_eq!(logit.scores, direct.output().data());
    }

    #[test]
    fn zero_weight_final_layer_returns_bias() {
        let w = Tensor::zeros(vec![2, 3]);
        let b = Tensor::from_vec(vec![0.7, -0.2, 0.4]);
        let net = Network::new(2, vec![Layer::dense(w, b).unwrap()]).unwrap();
        let model = VictimModel::new(net, 3).unwrap();
        let logit = model.logits(&Tensor::from_vec(vec![0.5, -0.5])).unwrap();
        assert_eq!(logit.scores, vec![0.7, -0.2, 0.4]);
    }

    #[test]
    fn out_of_range_pixels_are_a_domain_error() {
        let model = toy_victim();
        let err = model.logits(&Tensor::from_vec(vec![0.6, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn softmax_uniform_logits_gives_uniform_probabilities() {
        let p = softmax(&Logit::new(vec![3.3; 5]));
        for v in p {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let y = Logit::new(vec![0.4, -1.0, 2.5]);
        let shifted = Logit::new(y.scores.iter().map(|v| v + 123.456).collect());
        let a = softmax(&y);
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_closed_form() {
        // Direct evaluation of e^{y_i} / sum_j e^{y_j} for [1, 2, 3].
        let p = softmax(&Logit::new(vec![1.0, 2.0, 3.0]));
        let denom = 1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp();
        for (got, want) in p.iter().zip([1.0f64, 2.0, 3.0].map(|v| v.exp() / denom)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_for_large_logits() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..200 {
            let y = Logit::new((0..10).map(|_| rng.gen_range(-1e3..1e3)).collect());
            let sum: f64 = softmax(&y).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn predict_is_argmax_with_low_index_ties() {
        assert_eq!(Logit::new(vec![0.1, 5.0, 0.1]).argmax(), 1);
        assert_eq!(Logit::new(vec![2.0, 2.0, 0.0]).argmax(), 0);
    }

    #[test]
    fn softmax_argmax_agrees_with_logit_argmax() {
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..1000 {
            let y = Logit::new((0..7).map(|_| rng.gen_range(-50.0..50.0)).collect());
            let p = softmax(&y);
            let soft_argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(soft_argmax, y.argmax());
        }
    }

    #[test]
    fn predict_invariant_under_increasing_affine_transforms() {
        let model = toy_victim();
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..100 {
            let x = Tensor::from_vec(vec![
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ]);
            let logit = model.logits(&x).unwrap();
            let a = rng.gen_range(0.1..10.0);
            let b = rng.gen_range(-5.0..5.0);
            let transformed = Logit::new(logit.scores.iter().map(|&s| a * s + b).collect());
            assert_eq!(logit.argmax(), transformed.argmax());
        }
    }

    #[test]
    fn training_on_blobs_is_deterministic_and_accurate() {
        let data = synth_dataset(3, 60, 8, 5).unwrap();
        let parts = data.split(&[0.8, 0.2], 1).unwrap();
        let cfg = VictimConfig {
            hidden: vec![16],
            train: TrainConfig {
                learning_rate: 0.1,
                epochs: 40,
                batch_size: 16,
                seed: 33,
                loss: LossKind::CrossEntropy,
            },
        };
        let a = train_victim(&parts[0], &parts[1], &cfg).unwrap();
        let b = train_victim(&parts[0], &parts[1], &cfg).unwrap();
        assert_eq!(a.test_accuracy, b.test_accuracy);
        assert_eq!(a.model, b.model);
        assert!(a.test_accuracy >= 0.99, "accuracy {}", a.test_accuracy);
    }

    #[test]
    fn victim_file_round_trip() {
        let data = synth_dataset(3, 30, 6, 6).unwrap();
        let parts = data.split(&[0.8, 0.2], 2).unwrap();
        let cfg = VictimConfig {
            hidden: vec![8],
            train: TrainConfig {
                learning_rate: 0.1,
                epochs: 10,
                batch_size: 8,
                seed: 3,
                loss: LossKind::CrossEntropy,
            },
        };
        let trained = train_victim(&parts[0], &parts[1], &cfg).unwrap();
        let dir = std::env::temp_dir().join("holmes_victim_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("victim.model");
        save_victim(&trained.model, 3, &path).unwrap();
        let loaded = load_victim(&path).unwrap();
        assert_eq!(loaded, trained.model);
        fs::remove_file(&path).ok();
    }
}
