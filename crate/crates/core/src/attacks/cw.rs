//! CW-L2: minimize `||x - x'||^2 + c * F(x')` over a tanh change of
//! variable that keeps every pixel inside the box.
//!
//! `F(x') = max(max{h(x')_i : i != t} - h(x')_t, -kappa)` is non-positive
//! exactly when the target label wins by at least the `kappa` margin.
//! The constant schedule starts small and grows tenfold per outer step;
//! the first constant that produces a success ends the search, and the
//! best (lowest-L2) margin-satisfying iterate seen is returned.

use super::{finish, AttackConfig, AttackResult, TargetSpec};
use crate::victim::{Logit, VictimModel};
use crate::{Error, Real, Result, Tensor};

/// Adaptive-moment optimizer over a flat parameter vector.
pub(crate) struct Adam {
    lr: Real,
    beta1: Real,
    beta2: Real,
    eps: Real,
    t: i32,
    m: Vec<Real>,
    v: Vec<Real>,
}

impl Adam {
    pub(crate) fn new(n: usize, lr: Real) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub(crate) fn step(&mut self, params: &mut [Real], grads: &[Real]) {
        self.t += 1;
        let lr_t = self.lr * (1.0 - self.beta2.powi(self.t)).sqrt()
            / (1.0 - self.beta1.powi(self.t));
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr_t * *m / (v.sqrt() + self.eps);
        }
    }
}

// atanh argument clamp: keeps the reparametrization finite at the box edge.
const ATANH_CLAMP: Real = 1.0 - 1e-12;

/// w-space coordinate for pixel value `x` under `x = tanh(w) / 2`.
pub(crate) fn to_w(x: Real) -> Real {
    let t = (2.0 * x).clamp(-ATANH_CLAMP, ATANH_CLAMP);
    0.5 * ((1.0 + t) / (1.0 - t)).ln()
}

pub(crate) fn from_w(w: Real) -> Real {
    0.5 * w.tanh()
}

/// `F(x')` margin bookkeeping: `margin = h_t - max_{i != t} h_i` and the
/// runner-up index realizing the max.
pub(crate) fn margin_and_runner_up(logits: &Logit, target: usize) -> (Real, usize) {
    let mut runner = usize::MAX;
    let mut best = Real::NEG_INFINITY;
    for (i, &s) in logits.scores.iter().enumerate() {
        if i != target && s > best {
            best = s;
            runner = i;
        }
    }
    (logits.scores[target] - best, runner)
}

pub(crate) struct CwOutcome {
    /// Best margin-satisfying iterate and its squared L2 noise.
    pub best: Option<(Tensor, Real)>,
    /// Final iterate, returned as the best effort on failure.
    pub last: Tensor,
    pub iterations: usize,
}

const CHECK_EVERY: usize = 25;

/// Core CW-L2 loop, shared with the L0 attack: `mask` (when present)
/// marks the pixels the optimizer may move, everything else stays pinned
/// to `x` exactly; `warm` seeds the optimizer from a previous solution.
pub(crate) fn cw_l2_optimize(
    model: &VictimModel,
    x: &Tensor,
    target: usize,
    kappa: Real,
    cfg: &AttackConfig,
    mask: Option<&[bool]>,
    warm: Option<&Tensor>,
) -> Result<CwOutcome> {
    let m = x.len();
    let free: Vec<usize> = match mask {
        Some(mask) => {
            if mask.len() != m {
                return Err(Error::Shape("mask length does not match input".into()));
            }
            (0..m).filter(|&i| mask[i]).collect()
        }
        None => (0..m).collect(),
    };

    let start = warm.unwrap_or(x);
    let mut best: Option<(Tensor, Real)> = None;
    let mut last = x.clone();
    let mut iterations = 0usize;

    for step in 0..cfg.c_steps {
        let c = cfg.c_init * 10f64.powi(step as i32);
        let mut w: Vec<Real> = free.iter().map(|&i| to_w(start.data()[i])).collect();
        let mut adam = Adam::new(w.len(), cfg.inner_lr);
        let mut found_here = false;
        let mut objective_at_check = Real::INFINITY;

        let mut adv = x.clone();
        for iter in 0..cfg.max_iters {
            iterations += 1;
            for (&i, &wi) in free.iter().zip(&w) {
                adv.data_mut()[i] = from_w(wi);
            }

            let trace = model.net().forward(&adv)?;
            let logits = Logit::new(trace.output().data().to_vec());
            let (margin, runner) = margin_and_runner_up(&logits, target);

            let l2_sq: Real = free
                .iter()
                .map(|&i| {
                    let d = adv.data()[i] - x.data()[i];
                    d * d
                })
                .sum();
            let f = (-margin).max(-kappa);
            let objective = l2_sq + c * f;

            if margin >= kappa && logits.argmax() == target {
                found_here = true;
                if best.as_ref().map_or(true, |(_, b)| l2_sq < *b) {
                    best = Some((adv.clone(), l2_sq));
                }
            }

            // d objective / d x' = 2(x' - x) + c * dF, with dF active only
            // while the margin clamp has not engaged.
            let mut out_grad = vec![0.0; model.num_classes()];
            if margin < kappa {
                out_grad[runner] = c;
                out_grad[target] = -c;
            }
            let grads = model.net().backward(&trace, &Tensor::from_vec(out_grad))?;
            let grad_w: Vec<Real> = free
                .iter()
                .zip(&w)
                .map(|(&i, &wi)| {
                    let dx = 2.0 * (adv.data()[i] - x.data()[i]) + grads.input.data()[i];
                    let th = wi.tanh();
                    dx * 0.5 * (1.0 - th * th)
                })
                .collect();
            adam.step(&mut w, &grad_w);

            // Plateau abort: no objective progress over a checkpoint window.
            if (iter + 1) % CHECK_EVERY == 0 {
                if objective > objective_at_check * 0.9999 {
                    break;
                }
                objective_at_check = objective;
            }
        }

        for (&i, &wi) in free.iter().zip(&w) {
            adv.data_mut()[i] = from_w(wi);
        }
        last = adv;
        if found_here {
            // Larger constants only trade distance for margin we already have.
            break;
        }
    }

    Ok(CwOutcome {
        best,
        last,
        iterations,
    })
}

/// Targeted CW-L2 attack. Success requires the target label to win with
/// a logit margin of at least `cfg.kappa` on the returned example.
pub fn cw_l2(model: &VictimModel, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let TargetSpec::Targeted(target) = cfg.target else {
        return Err(Error::UnsupportedMode(
            "cw_l2 is a targeted attack; wrap it for untargeted use".into(),
        ));
    };
    if target >= model.num_classes() {
        return Err(Error::Argument(format!(
            "target {target} out of range for {} classes",
            model.num_classes()
        )));
    }
    let original = model.predict(x)?;
    if target == original {
        return Err(Error::Argument(
            "cw_l2 target must differ from the current label".into(),
        ));
    }

    let outcome = cw_l2_optimize(model, x, target, cfg.kappa, cfg, None, None)?;
    match outcome.best {
        Some((adv, _)) => {
            let logits = model.logits(&adv)?;
            let margin_ok = margin_and_runner_up(&logits, target).0 >= cfg.kappa;
            finish(model, x, adv, cfg.target, original, outcome.iterations, margin_ok)
        }
        None => finish(
            model,
            x,
            outcome.last,
            cfg.target,
            original,
            outcome.iterations,
            false,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackFamily;
    use crate::data::synth_dataset;
    use crate::nn::train::{LossKind, TrainConfig};
    use crate::victim::{train_victim, VictimConfig, VictimModel};

    pub(crate) fn trained_toy_victim() -> (VictimModel, crate::data::Dataset) {
        let data = synth_dataset(4, 40, 10, 11).unwrap();
        let parts = data.split(&[0.8, 0.2], 1).unwrap();
        let cfg = VictimConfig {
            hidden: vec![16],
            train: TrainConfig {
                learning_rate: 0.1,
                epochs: 30,
                batch_size: 16,
                seed: 5,
                loss: LossKind::CrossEntropy,
            },
        };
        let trained = train_victim(&parts[0], &parts[1], &cfg).unwrap();
        assert!(trained.test_accuracy >= 0.99);
        (trained.model, data)
    }

    fn attack_cfg(target: usize, kappa: f64) -> AttackConfig {
        AttackConfig {
            family: AttackFamily::CwL2,
            target: TargetSpec::Targeted(target),
            kappa,
            c_steps: 5,
            max_iters: 300,
            inner_lr: 5e-2,
            ..AttackConfig::default()
        }
    }

    #[test]
    fn success_at_kappa_zero_means_target_argmax() {
        let (model, data) = trained_toy_victim();
        let x = &data.images[0];
        let label = data.labels[0];
        assert_eq!(model.predict(x).unwrap(), label);
        let target = (label + 1) % 4;

        let r = cw_l2(&model, x, &attack_cfg(target, 0.0)).unwrap();
        assert!(r.success, "cw_l2 failed on an easy blob example");
        let logits = model.logits(&r.adversarial).unwrap();
        assert_eq!(logits.argmax(), target);
        assert!(r.noise.l2 > 0.0);
    }

    #[test]
    fn kappa_four_success_carries_the_margin() {
        let (model, data) = trained_toy_victim();
        let x = &data.images[5];
        let label = data.labels[5];
        let target = (label + 2) % 4;

        let r = cw_l2(&model, x, &attack_cfg(target, 4.0)).unwrap();
        assert!(r.success);
        let logits = model.logits(&r.adversarial).unwrap();
        assert!(
            logits.margin(target) >= 4.0 - 1e-6,
            "margin {}",
            logits.margin(target)
        );
    }

    #[test]
    fn returned_example_stays_in_the_box() {
        let (model, data) = trained_toy_victim();
        let x = &data.images[10];
        let target = (data.labels[10] + 1) % 4;
        let r = cw_l2(&model, x, &attack_cfg(target, 0.0)).unwrap();
        assert!(r
            .adversarial
            .data()
            .iter()
            .all(|&p| (-0.5..=0.5).contains(&p)));
    }

    #[test]
    fn same_inputs_give_identical_results() {
        let (model, data) = trained_toy_victim();
        let x = &data.images[3];
        let target = (data.labels[3] + 1) % 4;
        let a = cw_l2(&model, x, &attack_cfg(target, 0.0)).unwrap();
        let b = cw_l2(&model, x, &attack_cfg(target, 0.0)).unwrap();
        assert_eq!(a.adversarial, b.adversarial);
        assert_eq!(a.iterations_used, b.iterations_used);
    }

    #[test]
    fn attacking_the_current_label_is_rejected() {
        let (model, data) = trained_toy_victim();
        let x = &data.images[0];
        let label = data.labels[0];
        let err = cw_l2(&model, x, &attack_cfg(label, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn masked_optimizer_pins_frozen_pixels_exactly() {
        let (model, data) = trained_toy_victim();
        let x = &data.images[7];
        let target = (data.labels[7] + 1) % 4;
        let mut mask = vec![true; x.len()];
        mask[0] = false;
        mask[3] = false;
        let cfg = attack_cfg(target, 0.0);
        let outcome = cw_l2_optimize(&model, x, target, 0.0, &cfg, Some(&mask), None).unwrap();
        let candidate = outcome.best.map(|(t, _)| t).unwrap_or(outcome.last);
        assert_eq!(candidate.data()[0], x.data()[0]);
        assert_eq!(candidate.data()[3], x.data()[3]);
    }
}
