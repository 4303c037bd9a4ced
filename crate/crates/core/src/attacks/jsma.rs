//! Saliency-map attack: greedy single-pixel pushes toward the upper
//! pixel bound, ranked by the gradient of the target logit.

use super::{finish, logit_input_gradient, AttackConfig, AttackResult, TargetSpec};
use crate::victim::VictimModel;
use crate::{Error, Result, Tensor, PIXEL_MAX};

/// Targeted-only greedy attack under an L0 budget of `floor(gamma * m)`
/// pixels. Each iteration picks the admissible pixel with the largest
/// d h(x)_t / d x_i and moves it by `theta` toward the upper bound.
pub fn jsma(model: &VictimModel, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let TargetSpec::Targeted(target) = cfg.target else {
        return Err(Error::UnsupportedMode(
            "jsma is a targeted attack; wrap it for untargeted use".into(),
        ));
    };

    let original = model.predict(x)?;
    let m = x.len();
    let budget = (cfg.gamma * m as f64).floor() as usize;

    let mut adv = x.clone();
    let mut modified = vec![false; m];
    let mut used = 0usize;

    while used < budget {
        if model.predict(&adv)? == target {
            break;
        }
        let saliency = logit_input_gradient(model, &adv, target)?;
        // Admissible: untouched pixels with room to move up.
        let pick = saliency
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, _)| !modified[i] && adv.data()[i] < PIXEL_MAX)
            .max_by(|a, b| a.1.total_cmp(b.1));
        let Some((pixel, &best)) = pick else {
            break;
        };
        if best <= 0.0 {
            // No remaining pixel raises the target score by moving up.
            break;
        }
        let v = &mut adv.data_mut()[pixel];
        *v = (*v + cfg.theta).min(PIXEL_MAX);
        modified[pixel] = true;
        used += 1;
    }

    finish(model, x, adv, cfg.target, original, used, true)
}
