//! Adversarial example generation: distance metrics, FGSM, JSMA, the
//! three CW attacks, untargeted wrappers and the detector-aware adaptive
//! attack.
//!
//! Every attack is a pure function of `(model, input, config)`: no shared
//! mutable state, deterministic output, and every returned example lies
//! inside the pixel box with its success flag re-checked against the
//! model after generation.

pub mod adaptive;
pub mod cw;
pub mod cw_l0;
pub mod cw_linf;
pub mod fgsm;
pub mod jsma;

pub use adaptive::{adaptive_cw, AdaptiveResult};
pub use cw::cw_l2;
pub use cw_l0::cw_l0;
pub use cw_linf::{cw_linf, cw_linf_traced, LinfTrace};
pub use fgsm::fgsm;
pub use jsma::jsma;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::victim::VictimModel;
use crate::{Error, Real, Result, Tensor, PIXEL_MAX, PIXEL_MIN};

/// Distance metric between an example and its perturbed version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Count of changed pixels (exact inequality of stored values).
    L0,
    /// Euclidean distance.
    L2,
    /// Largest per-pixel change.
    Linf,
}

/// Distance between same-shape tensors under the chosen metric.
pub fn distance(metric: Metric, x: &Tensor, x_adv: &Tensor) -> Result<Real> {
    if x.shape() != x_adv.shape() {
        return Err(Error::Shape(format!(
            "distance over shapes {:?} and {:?}",
            x.shape(),
            x_adv.shape()
        )));
    }
    let pairs = x.data().iter().zip(x_adv.data());
    Ok(match metric {
        Metric::L0 => pairs.filter(|(a, b)| a != b).count() as Real,
        Metric::L2 => pairs.map(|(a, b)| (a - b) * (a - b)).sum::<Real>().sqrt(),
        Metric::Linf => pairs.map(|(a, b)| (a - b).abs()).fold(0.0, Real::max),
    })
}

/// All three distances from the source example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub l0: Real,
    pub l2: Real,
    pub linf: Real,
}

impl NoiseStats {
    pub fn between(x: &Tensor, x_adv: &Tensor) -> Result<Self> {
        Ok(Self {
            l0: distance(Metric::L0, x, x_adv)?,
            l2: distance(Metric::L2, x, x_adv)?,
            linf: distance(Metric::Linf, x, x_adv)?,
        })
    }

    pub fn get(&self, metric: Metric) -> Real {
        match metric {
            Metric::L0 => self.l0,
            Metric::L2 => self.l2,
            Metric::Linf => self.linf,
        }
    }
}

/// Attack family selector, as used in configs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Jsma,
    CwL0,
    CwL2,
    CwLinf,
    AdaptiveCw,
}

impl AttackFamily {
    /// Metric the attack natively minimizes; used by the untargeted
    /// wrapper to rank per-target results.
    pub fn native_metric(self) -> Metric {
        match self {
            AttackFamily::Fgsm | AttackFamily::CwLinf => Metric::Linf,
            AttackFamily::Jsma | AttackFamily::CwL0 => Metric::L0,
            AttackFamily::CwL2 | AttackFamily::AdaptiveCw => Metric::L2,
        }
    }
}

/// Attack goal: force a specific label or any wrong label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    Targeted(usize),
    Untargeted,
}

/// CW-Linf bound schedule: shrink the accepted bound by a factor or by a
/// fixed decrement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    Multiplicative,
    Subtractive,
}

/// Hyperparameters shared by the attack family implementations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub target: TargetSpec,
    /// FGSM step size.
    pub epsilon: Real,
    /// CW confidence: required logit margin of the adversarial label.
    pub kappa: Real,
    /// First value of the CW constant schedule.
    pub c_init: Real,
    /// Number of outer steps in the CW constant schedule.
    pub c_steps: usize,
    /// Iteration budget of the inner optimizer (per constant step).
    pub max_iters: usize,
    /// Learning rate of the inner adaptive-moment optimizer.
    pub inner_lr: Real,
    /// JSMA: largest fraction of pixels that may be modified.
    pub gamma: Real,
    /// JSMA: per-pixel push toward the upper pixel bound.
    pub theta: Real,
    /// Adaptive attack: initial weight of each detector term
    /// (defaults to `c_init` when absent).
    pub e_init: Option<Real>,
    /// CW-Linf bound schedule.
    pub tau_mode: TauMode,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            family: AttackFamily::CwL2,
            target: TargetSpec::Untargeted,
            epsilon: 0.3,
            kappa: 0.0,
            c_init: 1e-2,
            c_steps: 6,
            max_iters: 1000,
            inner_lr: 1e-2,
            gamma: 0.15,
            theta: 1.0,
            e_init: None,
            tau_mode: TauMode::Multiplicative,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Argument("epsilon must be >= 0".into()));
        }
        if self.kappa < 0.0 {
            return Err(Error::Argument("kappa must be >= 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Argument("gamma must be in (0, 1]".into()));
        }
        if self.c_init <= 0.0 {
            return Err(Error::Argument("c_init must be positive".into()));
        }
        if let Some(e) = self.e_init {
            if e <= 0.0 {
                return Err(Error::Argument("e_init must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn targeted(family: AttackFamily, target: usize) -> Self {
        Self {
            family,
            target: TargetSpec::Targeted(target),
            ..Self::default()
        }
    }
}

/// Outcome of one attack run. The success flag is recomputed from the
/// model after generation, never carried over from the optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub adversarial: Tensor,
    pub success: bool,
    pub achieved_label: usize,
    pub original_label: usize,
    pub iterations_used: usize,
    pub noise: NoiseStats,
}

/// Wire form of a tensor: shape plus base64 little-endian 64-bit reals.
#[derive(Serialize, Deserialize)]
struct TensorWire {
    shape: Vec<usize>,
    data_base64: String,
}

impl Serialize for Tensor {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let mut bytes = Vec::with_capacity(self.len() * 8);
        for &v in self.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorWire {
            shape: self.shape().to_vec(),
            data_base64: BASE64.encode(bytes),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let wire = TensorWire::deserialize(deserializer)?;
        let bytes = BASE64
            .decode(wire.data_base64.as_bytes())
            .map_err(serde::de::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(serde::de::Error::custom(
                "tensor payload not a multiple of 8 bytes",
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(wire.shape, data).map_err(serde::de::Error::custom)
    }
}

/// Clamps into the pixel box in place.
pub(crate) fn clip_box(x: &mut Tensor) {
    x.clamp(PIXEL_MIN, PIXEL_MAX);
}

/// `sign` with `sign(0) = 0`.
pub(crate) fn sign(v: Real) -> Real {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the cross-entropy loss toward `class` with respect to the
/// input pixels.
pub(crate) fn ce_input_gradient(model: &VictimModel, x: &Tensor, class: usize) -> Result<Tensor> {
    let trace = model.net().forward(x)?;
    let logits = trace.output();
    let max = logits
        .data()
        .iter()
        .cloned()
        .fold(Real::NEG_INFINITY, Real::max);
    let exps: Vec<Real> = logits.data().iter().map(|&z| (z - max).exp()).collect();
    let sum: Real = exps.iter().sum();
    let grad: Vec<Real> = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let p = e / sum;
            if i == class {
                p - 1.0
            } else {
                p
            }
        })
        .collect();
    Ok(model.net().backward(&trace, &Tensor::from_vec(grad))?.input)
}

/// Gradient of a single logit with respect to the input pixels.
pub(crate) fn logit_input_gradient(
    model: &VictimModel,
    x: &Tensor,
    class: usize,
) -> Result<Tensor> {
    let trace = model.net().forward(x)?;
    let mut grad = vec![0.0; model.num_classes()];
    grad[class] = 1.0;
    Ok(model.net().backward(&trace, &Tensor::from_vec(grad))?.input)
}

/// Assembles an [`AttackResult`], re-deriving label, success and noise
/// from the final example. `extra_success` carries attack-specific
/// conditions (CW margin, detector bypass) that must also hold.
pub(crate) fn finish(
    model: &VictimModel,
    x: &Tensor,
    x_adv: Tensor,
    target: TargetSpec,
    original_label: usize,
    iterations_used: usize,
    extra_success: bool,
) -> Result<AttackResult> {
    debug_assert!(x_adv
        .data()
        .iter()
        .all(|&p| (PIXEL_MIN..=PIXEL_MAX).contains(&p)));
    x_adv.check_finite("adversarial example")?;
    let achieved_label = model.predict(&x_adv)?;
    let label_flip = match target {
        TargetSpec::Targeted(t) => achieved_label == t,
        TargetSpec::Untargeted => achieved_label != original_label,
    };
    Ok(AttackResult {
        noise: NoiseStats::between(x, &x_adv)?,
        adversarial: x_adv,
        success: label_flip && extra_success,
        achieved_label,
        original_label,
        iterations_used,
    })
}

/// Runs a targeted attack against every label other than the current one
/// and keeps the successful result with the smallest noise under the
/// attack's native metric.
pub fn untargeted_wrap(
    family: AttackFamily,
    model: &VictimModel,
    x: &Tensor,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if family == AttackFamily::AdaptiveCw {
        return Err(Error::UnsupportedMode(
            "the adaptive attack needs detector handles; call it directly".into(),
        ));
    }
    let current = model.predict(x)?;
    let metric = family.native_metric();
    let mut best: Option<AttackResult> = None;
    let mut iterations_total = 0;

    for t in (0..model.num_classes()).filter(|&t| t != current) {
        let mut per_target = cfg.clone();
        per_target.family = family;
        per_target.target = TargetSpec::Targeted(t);
        let result = match family {
            AttackFamily::Fgsm => fgsm(model, x, &per_target)?,
            AttackFamily::Jsma => jsma(model, x, &per_target)?,
            AttackFamily::CwL0 => cw_l0(model, x, &per_target)?,
            AttackFamily::CwL2 => cw_l2(model, x, &per_target)?,
            AttackFamily::CwLinf => cw_linf(model, x, &per_target)?,
            AttackFamily::AdaptiveCw => unreachable!(),
        };
        iterations_total += result.iterations_used;
        let better = match &best {
            None => true,
            Some(b) => match (result.success, b.success) {
                (true, false) => true,
                (false, true) => false,
                _ => result.noise.get(metric) < b.noise.get(metric),
            },
        };
        if better {
            best = Some(result);
        }
    }

    let mut best = best.ok_or_else(|| {
        Error::Argument("untargeted wrapper needs a model with at least 2 classes".into())
    })?;
    best.iterations_used = iterations_total;
    Ok(best)
}

/// One attack outcome as stored in the JSON-lines batch format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRecord {
    pub sample_id: u64,
    pub family: AttackFamily,
    pub target: TargetSpec,
    pub original_label: usize,
    pub achieved_label: usize,
    pub success: bool,
    pub iterations_used: usize,
    pub noise: NoiseStats,
    pub adversarial: Tensor,
}

impl AttackRecord {
    pub fn new(sample_id: u64, family: AttackFamily, target: TargetSpec, r: &AttackResult) -> Self {
        Self {
            sample_id,
            family,
            target,
            original_label: r.original_label,
            achieved_label: r.achieved_label,
            success: r.success,
            iterations_used: r.iterations_used,
            noise: r.noise,
            adversarial: r.adversarial.clone(),
        }
    }
}
