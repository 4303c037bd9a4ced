//! Logit-feature binary detectors and their diversified variants:
//! per-class dedicated detectors and top-k detectors.
//!
//! A detector never sees pixels. It reads the victim's confidence scores,
//! optionally transformed (top-k keeps the k largest scores; dedicated
//! units are routed by the victim's predicted class), and outputs a
//! sigmoid score where 1 means adversarial.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::nn::io::{decode_network, encode_network};
use crate::nn::train::{fit, LossKind, TrainConfig};
use crate::nn::{Layer, Network};
use crate::victim::{Logit, VictimModel};
use crate::{Error, Real, Result, Tensor};

/// One labeled training point for a detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorSample {
    pub logit: Logit,
    /// 0 = benign, 1 = adversarial.
    pub label: u8,
    /// The victim's predicted class, used for dedicated routing.
    pub predicted_class: usize,
}

/// Input transform applied to a logit before the detector net sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Full logit vector.
    Full,
    /// The k largest scores, sorted descending.
    TopK(usize),
    /// Full logit vector; the unit only serves one predicted class.
    Dedicated(usize),
}

impl Transform {
    pub fn output_dim(&self, num_classes: usize) -> usize {
        match self {
            Transform::TopK(k) => *k,
            Transform::Full | Transform::Dedicated(_) => num_classes,
        }
    }

    pub fn apply(&self, logit: &Logit) -> Result<Vec<Real>> {
        Ok(self.apply_with_indices(logit)?.0)
    }

    /// Transformed scores plus the source index of each output entry
    /// (needed to route gradients back through a top-k selection).
    pub fn apply_with_indices(&self, logit: &Logit) -> Result<(Vec<Real>, Vec<usize>)> {
        match self {
            Transform::Full | Transform::Dedicated(_) => Ok((
                logit.scores.clone(),
                (0..logit.scores.len()).collect(),
            )),
            Transform::TopK(k) => {
                let (values, indices) = topk_with_indices(logit, *k)?;
                Ok((values, indices))
            }
        }
    }
}

fn topk_with_indices(logit: &Logit, k: usize) -> Result<(Vec<Real>, Vec<usize>)> {
    let n = logit.scores.len();
    if k == 0 || k > n {
        return Err(Error::Argument(format!(
            "top-k of {k} out of range for {n} scores"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        logit.scores[b]
            .total_cmp(&logit.scores[a])
            .then(a.cmp(&b))
    });
    order.truncate(k);
    let values = order.iter().map(|&i| logit.scores[i]).collect();
    Ok((values, order))
}

/// The k largest confidence scores, sorted descending.
pub fn topk_transform(logit: &Logit, k: usize) -> Result<Vec<Real>> {
    Ok(topk_with_indices(logit, k)?.0)
}

/// A trained binary detector: net, input transform and vote threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorUnit {
    pub net: Network<Real>,
    pub transform: Transform,
    pub threshold: Real,
}

/// Keeps scores strictly inside (0, 1) even when the sigmoid saturates.
fn open_unit_interval(score: Real) -> Real {
    score.clamp(1e-15, 1.0 - 1e-15)
}

/// Detector score in (0, 1); the vote is `score >= threshold`.
pub fn detector_score(unit: &DetectorUnit, logit: &Logit) -> Result<Real> {
    let input = unit.transform.apply(logit)?;
    if input.len() != unit.net.input_dim() {
        return Err(Error::Shape(format!(
            "detector expects {} inputs, transform produced {}",
            unit.net.input_dim(),
            input.len()
        )));
    }
    let trace = unit.net.forward(&Tensor::from_vec(input))?;
    Ok(open_unit_interval(trace.output().data()[0]))
}

impl DetectorUnit {
    pub fn vote(&self, logit: &Logit) -> Result<bool> {
        Ok(detector_score(self, logit)? >= self.threshold)
    }

    /// Score and its gradient with respect to the (untransformed) logit.
    pub fn score_gradient(&self, logit: &Logit) -> Result<(Real, Vec<Real>)> {
        let (input, indices) = self.transform.apply_with_indices(logit)?;
        let trace = self.net.forward(&Tensor::from_vec(input))?;
        let score = open_unit_interval(trace.output().data()[0]);
        let grads = self.net.backward(&trace, &Tensor::from_vec(vec![1.0]))?;
        let mut grad_logit = vec![0.0; logit.scores.len()];
        for (j, &src) in indices.iter().enumerate() {
            grad_logit[src] += grads.input.data()[j];
        }
        Ok((score, grad_logit))
    }
}

/// One vote in the roster: a standalone unit, or the dedicated per-class
/// set acting as a single voter (each input consults exactly the unit of
/// its predicted class).
#[derive(Debug, Clone)]
pub enum Voter {
    Single(DetectorUnit),
    Dedicated(Vec<DetectorUnit>),
}

impl Voter {
    pub fn name(&self) -> String {
        match self {
            Voter::Single(u) => match u.transform {
                Transform::Full => "full".to_string(),
                Transform::TopK(k) => format!("top{k}"),
                Transform::Dedicated(c) => format!("dedicated{c}"),
            },
            Voter::Dedicated(_) => "dedicated".to_string(),
        }
    }

    fn routed_unit(&self, logit: &Logit) -> Result<&DetectorUnit> {
        match self {
            Voter::Single(unit) => Ok(unit),
            Voter::Dedicated(units) => {
                let class = logit.argmax();
                units.get(class).ok_or_else(|| {
                    Error::Argument(format!(
                        "no dedicated unit for predicted class {class} ({} units)",
                        units.len()
                    ))
                })
            }
        }
    }

    pub fn score(&self, logit: &Logit) -> Result<Real> {
        detector_score(self.routed_unit(logit)?, logit)
    }

    pub fn vote(&self, logit: &Logit) -> Result<bool> {
        let unit = self.routed_unit(logit)?;
        Ok(detector_score(unit, logit)? >= unit.threshold)
    }

    pub fn score_gradient(&self, logit: &Logit) -> Result<(Real, Vec<Real>)> {
        self.routed_unit(logit)?.score_gradient(logit)
    }
}

/// The detector ensemble consulted by the voting policies.
#[derive(Debug, Clone, Default)]
pub struct DetectorRoster {
    pub voters: Vec<Voter>,
}

impl DetectorRoster {
    pub fn num_voters(&self) -> usize {
        self.voters.len()
    }

    pub fn scores(&self, logit: &Logit) -> Result<Vec<Real>> {
        self.voters.iter().map(|v| v.score(logit)).collect()
    }

    pub fn votes(&self, logit: &Logit) -> Result<Vec<bool>> {
        self.voters.iter().map(|v| v.vote(logit)).collect()
    }
}

/// Builds detector training samples by pushing both example pools
/// through the victim: benign inputs become label 0, adversarial label 1.
pub fn build_training_set(
    model: &VictimModel,
    benign: &[Tensor],
    adversarial: &[Tensor],
) -> Result<Vec<DetectorSample>> {
    if benign.is_empty() && adversarial.is_empty() {
        return Err(Error::Argument(
            "no examples to build a detector training set from".into(),
        ));
    }
    let mut samples = Vec::with_capacity(benign.len() + adversarial.len());
    for (label, pool) in [(0u8, benign), (1u8, adversarial)] {
        for x in pool {
            let logit = model.logits(x)?;
            samples.push(DetectorSample {
                predicted_class: logit.argmax(),
                logit,
                label,
            });
        }
    }
    Ok(samples)
}

/// Splits samples by the victim's predicted class; exhaustive and
/// disjoint by construction.
pub fn partition_by_predicted_label(
    samples: &[DetectorSample],
) -> BTreeMap<usize, Vec<DetectorSample>> {
    let mut parts: BTreeMap<usize, Vec<DetectorSample>> = BTreeMap::new();
    for s in samples {
        parts.entry(s.predicted_class).or_default().push(s.clone());
    }
    parts
}

/// A trained unit plus its held-out ranking quality.
#[derive(Debug, Clone)]
pub struct TrainedDetector {
    pub unit: DetectorUnit,
    pub holdout_auc: f64,
}

fn detector_net(input_dim: usize, rng: &mut StdRng) -> Result<Network<Real>> {
    Network::new(
        input_dim,
        vec![
            Layer::dense_init(input_dim, 16, rng),
            Layer::Relu,
            Layer::dense_init(16, 32, rng),
            Layer::Relu,
            Layer::dense_init(32, 64, rng),
            Layer::Relu,
            Layer::dense_init(64, 1, rng),
            Layer::Sigmoid,
        ],
    )
}

/// Trains one detector unit on the given samples. Requires both labels;
/// records AUC on a stratified 20% holdout.
pub fn train_detector(
    samples: &[DetectorSample],
    transform: Transform,
    cfg: &TrainConfig,
) -> Result<TrainedDetector> {
    let benign: Vec<&DetectorSample> = samples.iter().filter(|s| s.label == 0).collect();
    let adversarial: Vec<&DetectorSample> = samples.iter().filter(|s| s.label == 1).collect();
    if benign.is_empty() || adversarial.is_empty() {
        return Err(Error::Argument(format!(
            "detector training needs both labels ({} benign, {} adversarial)",
            benign.len(),
            adversarial.len()
        )));
    }
    if cfg.loss != LossKind::BinaryCrossEntropy {
        return Err(Error::Argument(
            "detectors train with binary cross-entropy".into(),
        ));
    }

    // Stratified holdout keeps both labels on both sides.
    let mut rng = StdRng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    let mut split = |pool: &[&DetectorSample]| -> (Vec<DetectorSample>, Vec<DetectorSample>) {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let holdout = (pool.len() / 5).max(1).min(pool.len().saturating_sub(1));
        let held: Vec<DetectorSample> = order[..holdout].iter().map(|&i| pool[i].clone()).collect();
        let kept: Vec<DetectorSample> = order[holdout..].iter().map(|&i| pool[i].clone()).collect();
        (kept, held)
    };
    let (ben_train, ben_held) = split(&benign);
    let (adv_train, adv_held) = split(&adversarial);

    let to_inputs = |set: &[DetectorSample]| -> Result<(Vec<Tensor>, Vec<f64>)> {
        let mut xs = Vec::with_capacity(set.len());
        let mut ys = Vec::with_capacity(set.len());
        for s in set {
            xs.push(Tensor::from_vec(transform.apply(&s.logit)?));
            ys.push(s.label as f64);
        }
        Ok((xs, ys))
    };

    let mut train_set: Vec<DetectorSample> = ben_train;
    train_set.extend(adv_train);
    let (mut xs, mut ys) = to_inputs(&train_set)?;
    // Fixed interleave so batch composition is a function of the seed only.
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(&mut rng);
    xs = order.iter().map(|&i| xs[i].clone()).collect();
    ys = order.iter().map(|&i| ys[i]).collect();

    let input_dim = transform.output_dim(samples[0].logit.num_classes());
    let mut net = detector_net(input_dim, &mut StdRng::seed_from_u64(cfg.seed))?;
    let mut fit_cfg = cfg.clone();
    fit_cfg.batch_size = fit_cfg.batch_size.min(xs.len());
    fit(&mut net, &xs, &ys, &fit_cfg)?;

    let unit = DetectorUnit {
        net,
        transform,
        threshold: 0.5,
    };

    let score_set = |set: &[DetectorSample]| -> Result<Vec<f64>> {
        set.iter().map(|s| detector_score(&unit, &s.logit)).collect()
    };
    let holdout_auc = crate::holmes::auc_roc(&score_set(&ben_held)?, &score_set(&adv_held)?)?;

    Ok(TrainedDetector { unit, holdout_auc })
}

// ---------------------------------------------------------------------------
// Roster persistence: a JSON manifest naming unit model files.

#[derive(Serialize, Deserialize)]
struct UnitManifest {
    file: String,
    transform: Transform,
    threshold: Real,
}

#[derive(Serialize, Deserialize)]
enum VoterManifest {
    #[serde(rename = "single")]
    Single(UnitManifest),
    #[serde(rename = "dedicated")]
    Dedicated(Vec<UnitManifest>),
}

#[derive(Serialize, Deserialize)]
struct RosterManifest {
    voters: Vec<VoterManifest>,
}

/// Writes `roster.json` plus one model file per unit into `dir`.
pub fn save_roster(roster: &DetectorRoster, dir: impl AsRef<Path>, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut counter = 0usize;
    let mut write_unit = |unit: &DetectorUnit| -> Result<UnitManifest> {
        let file = format!("unit_{counter:02}.model");
        counter += 1;
        fs::write(dir.join(&file), encode_network(&unit.net, seed))?;
        Ok(UnitManifest {
            file,
            transform: unit.transform,
            threshold: unit.threshold,
        })
    };

    let mut voters = Vec::new();
    for voter in &roster.voters {
        voters.push(match voter {
            Voter::Single(unit) => VoterManifest::Single(write_unit(unit)?),
            Voter::Dedicated(units) => VoterManifest::Dedicated(
                units.iter().map(&mut write_unit).collect::<Result<_>>()?,
            ),
        });
    }
    let manifest = RosterManifest { voters };
    fs::write(
        dir.join("roster.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Loads a roster from a directory written by [`save_roster`].
pub fn load_roster(dir: impl AsRef<Path>) -> Result<DetectorRoster> {
    let dir = dir.as_ref();
    let manifest: RosterManifest =
        serde_json::from_slice(&fs::read(dir.join("roster.json"))?)?;
    let read_unit = |m: &UnitManifest| -> Result<DetectorUnit> {
        let bytes = fs::read(dir.join(&m.file))?;
        let (net, _) = decode_network::<Real>(&bytes, 0)?;
        Ok(DetectorUnit {
            net,
            transform: m.transform,
            threshold: m.threshold,
        })
    };
    let mut voters = Vec::new();
    for vm in &manifest.voters {
        voters.push(match vm {
            VoterManifest::Single(m) => Voter::Single(read_unit(m)?),
            VoterManifest::Dedicated(ms) => {
                Voter::Dedicated(ms.iter().map(read_unit).collect::<Result<_>>()?)
            }
        });
    }
    Ok(DetectorRoster { voters })
}
