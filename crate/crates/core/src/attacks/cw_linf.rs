//! CW-Linf: minimize `c * F(x + delta) + sum_i max(|delta_i| - tau, 0)`,
//! doubling `c` while the attack fails and shrinking `tau` from 1 after
//! every accepted success, so the per-pixel bound ratchets down.

use super::cw::{from_w, margin_and_runner_up, to_w, Adam};
use super::{finish, AttackConfig, AttackResult, TargetSpec, TauMode};
use crate::victim::{Logit, VictimModel};
use crate::{Error, Real, Result, Tensor};

/// Bound trajectory of one run: the accepted `tau` values in order.
#[derive(Debug, Clone)]
pub struct LinfTrace {
    pub taus: Vec<Real>,
    /// Bound the best solution was accepted at.
    pub final_tau: Real,
}

// Stop shrinking once tau falls below one byte of pixel resolution.
const TAU_FLOOR: Real = 1.0 / 255.0;

/// One inner minimization at fixed `c` and `tau`, Adam over the tanh
/// reparametrization. Returns the best successful iterate (by Linf), the
/// final w vector and the objective at the returned iterate.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linf_minimize_once(
    model: &VictimModel,
    x: &Tensor,
    target: usize,
    kappa: Real,
    c: Real,
    tau: Real,
    iters: usize,
    lr: Real,
    warm: Option<&[Real]>,
) -> Result<(Option<(Tensor, Real)>, Vec<Real>, Real, usize)> {
    let m = x.len();
    let mut w: Vec<Real> = match warm {
        Some(w) => w.to_vec(),
        None => x.data().iter().map(|&v| to_w(v)).collect(),
    };
    let mut adam = Adam::new(m, lr);
    let mut best: Option<(Tensor, Real)> = None;
    let mut adv = x.clone();
    let mut last_objective = Real::INFINITY;
    let mut iterations = 0;

    for _ in 0..iters {
        iterations += 1;
        for (o, &wi) in adv.data_mut().iter_mut().zip(&w) {
            *o = from_w(wi);
        }
        let trace = model.net().forward(&adv)?;
        let logits = Logit::new(trace.output().data().to_vec());
        let (margin, runner) = margin_and_runner_up(&logits, target);
        let f = (-margin).max(-kappa);

        let mut penalty = 0.0;
        let mut linf: Real = 0.0;
        for (&a, &b) in adv.data().iter().zip(x.data()) {
            let d = (a - b).abs();
            linf = linf.max(d);
            if d > tau {
                penalty += d - tau;
            }
        }
        last_objective = c * f + penalty;

        if margin >= kappa && logits.argmax() == target {
            if best.as_ref().map_or(true, |(_, b)| linf < *b) {
                best = Some((adv.clone(), linf));
            }
        }

        let mut out_grad = vec![0.0; model.num_classes()];
        if margin < kappa {
            out_grad[runner] = c;
            out_grad[target] = -c;
        }
        let grads = model.net().backward(&trace, &Tensor::from_vec(out_grad))?;
        let grad_w: Vec<Real> = (0..m)
            .map(|i| {
                let d = adv.data()[i] - x.data()[i];
                let penalty_grad = if d.abs() > tau { super::sign(d) } else { 0.0 };
                let dx = grads.input.data()[i] + penalty_grad;
                let th = w[i].tanh();
                dx * 0.5 * (1.0 - th * th)
            })
            .collect();
        adam.step(&mut w, &grad_w);
    }

    Ok((best, w, last_objective, iterations))
}

/// Targeted Linf attack with the bound trajectory exposed for auditing.
pub fn cw_linf_traced(
    model: &VictimModel,
    x: &Tensor,
    cfg: &AttackConfig,
) -> Result<(AttackResult, LinfTrace)> {
    cfg.validate()?;
    let TargetSpec::Targeted(target) = cfg.target else {
        return Err(Error::UnsupportedMode(
            "cw_linf is a targeted attack; wrap it for untargeted use".into(),
        ));
    };
    let original = model.predict(x)?;
    if target == original {
        return Err(Error::Argument(
            "cw_linf target must differ from the current label".into(),
        ));
    }

    let c_max = cfg.c_init * 2f64.powi(cfg.c_steps as i32);
    let mut c = cfg.c_init;
    let mut tau: Real = 1.0;
    let mut warm: Option<Vec<Real>> = None;
    let mut best: Option<(Tensor, Real)> = None;
    let mut trace = LinfTrace {
        taus: Vec::new(),
        final_tau: 1.0,
    };
    let mut iterations = 0usize;

    loop {
        let (found, w, _objective, used) = linf_minimize_once(
            model,
            x,
            target,
            cfg.kappa,
            c,
            tau,
            cfg.max_iters,
            cfg.inner_lr,
            warm.as_deref(),
        )?;
        iterations += used;

        match found {
            Some((adv, linf)) if linf <= tau + 1e-9 => {
                // Accepted: the solution fits under the current bound.
                if best.as_ref().map_or(true, |(_, b)| linf < *b) {
                    best = Some((adv.clone(), linf));
                    trace.final_tau = linf.max(TAU_FLOOR);
                }
                let accepted = linf.max(TAU_FLOOR);
                trace.taus.push(accepted);
                let next = match cfg.tau_mode {
                    TauMode::Multiplicative => accepted * 0.9,
                    TauMode::Subtractive => accepted - 0.1,
                };
                if next < TAU_FLOOR {
                    break;
                }
                tau = next;
                warm = Some(x.data().iter().map(|&v| to_w(v)).collect());
                let _ = w;
            }
            Some((adv, linf)) => {
                // Succeeded but spilled over the bound; keep it only if it
                // improves the best example, then push harder on c.
                if best.as_ref().map_or(true, |(_, b)| linf < *b) {
                    best = Some((adv, linf));
                }
                c *= 2.0;
                if c > c_max {
                    break;
                }
                warm = Some(w);
            }
            None => {
                c *= 2.0;
                if c > c_max {
                    break;
                }
                warm = Some(w);
            }
        }
    }

    let result = match best {
        Some((adv, _)) => {
            let logits = model.logits(&adv)?;
            let margin_ok = logits.margin(target) >= cfg.kappa;
            finish(model, x, adv, cfg.target, original, iterations, margin_ok)?
        }
        None => finish(model, x, x.clone(), cfg.target, original, iterations, false)?,
    };
    Ok((result, trace))
}

/// Targeted Linf attack.
pub fn cw_linf(model: &VictimModel, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    Ok(cw_linf_traced(model, x, cfg)?.0)
}
