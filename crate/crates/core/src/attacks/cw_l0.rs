//! CW-L0: repeatedly solve the L2 relaxation, then freeze the changed
//! pixel that matters least (smallest `grad F * delta`) until the L2
//! attack can no longer succeed on the remaining free set.

use super::cw::{cw_l2_optimize, margin_and_runner_up};
use super::{finish, AttackConfig, AttackResult, TargetSpec};
use crate::victim::VictimModel;
use crate::{Error, Result, Tensor};

/// Targeted L0 attack. The returned example differs from `x` only on the
/// final free set; every frozen pixel matches `x` bit for bit.
pub fn cw_l0(model: &VictimModel, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let TargetSpec::Targeted(target) = cfg.target else {
        return Err(Error::UnsupportedMode(
            "cw_l0 is a targeted attack; wrap it for untargeted use".into(),
        ));
    };
    let original = model.predict(x)?;
    if target == original {
        return Err(Error::Argument(
            "cw_l0 target must differ from the current label".into(),
        ));
    }

    let m = x.len();
    let mut allowed = vec![true; m];
    let mut iterations = 0usize;

    let unrestricted = cw_l2_optimize(model, x, target, cfg.kappa, cfg, None, None)?;
    iterations += unrestricted.iterations;
    let Some((first, _)) = unrestricted.best else {
        return finish(
            model,
            x,
            unrestricted.last,
            cfg.target,
            original,
            iterations,
            false,
        );
    };

    let l0_of = |adv: &Tensor| -> usize {
        adv.data()
            .iter()
            .zip(x.data())
            .filter(|(a, b)| a != b)
            .count()
    };

    let mut best = first.clone();
    let mut best_l0 = l0_of(&best);
    let mut current = first;

    // Freeze one pixel per round; the free set shrinks until the L2
    // attack fails or nothing differs from the source anymore.
    for _ in 0..m {
        // Importance of each changed pixel: gradient of F at the current
        // solution times the change the pixel carries.
        let trace = model.net().forward(&current)?;
        let logits = crate::victim::Logit::new(trace.output().data().to_vec());
        let (_, runner) = margin_and_runner_up(&logits, target);
        let mut out_grad = vec![0.0; model.num_classes()];
        out_grad[runner] = 1.0;
        out_grad[target] = -1.0;
        let grad_f = model.net().backward(&trace, &Tensor::from_vec(out_grad))?.input;

        let candidate = (0..m)
            .filter(|&i| allowed[i] && current.data()[i] != x.data()[i])
            .min_by(|&a, &b| {
                let ia = (grad_f.data()[a] * (current.data()[a] - x.data()[a])).abs();
                let ib = (grad_f.data()[b] * (current.data()[b] - x.data()[b])).abs();
                ia.total_cmp(&ib)
            });
        let Some(freeze) = candidate else {
            break;
        };
        allowed[freeze] = false;

        let outcome =
            cw_l2_optimize(model, x, target, cfg.kappa, cfg, Some(&allowed), Some(&current))?;
        iterations += outcome.iterations;
        match outcome.best {
            Some((adv, _)) => {
                let l0 = l0_of(&adv);
                if l0 <= best_l0 {
                    best = adv.clone();
                    best_l0 = l0;
                }
                current = adv;
            }
            None => break,
        }
    }

    let logits = model.logits(&best)?;
    let margin_ok = logits.margin(target) >= cfg.kappa;
    finish(model, x, best, cfg.target, original, iterations, margin_ok)
}
