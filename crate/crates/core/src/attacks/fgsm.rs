//! Fast gradient sign method: one signed gradient step of size epsilon.

use super::{ce_input_gradient, clip_box, finish, sign, AttackConfig, AttackResult, TargetSpec};
use crate::victim::VictimModel;
use crate::{Result, Tensor};

/// Targeted: step against the gradient of the loss toward the target.
/// Untargeted: step along the gradient of the loss at the current label.
/// Either way the result is clipped to the pixel box, so the Linf noise
/// never exceeds epsilon.
pub fn fgsm(model: &VictimModel, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let original = model.predict(x)?;

    let (grad_class, step_sign) = match cfg.target {
        TargetSpec::Targeted(t) => (t, -1.0),
        TargetSpec::Untargeted => (original, 1.0),
    };
    let grad = ce_input_gradient(model, x, grad_class)?;

    let mut adv = Tensor::from_vec(
        x.data()
            .iter()
            .zip(grad.data())
            .map(|(&xi, &g)| xi + step_sign * cfg.epsilon * sign(g))
            .collect(),
    );
    clip_box(&mut adv);

    finish(model, x, adv, cfg.target, original, 1, true)
}
