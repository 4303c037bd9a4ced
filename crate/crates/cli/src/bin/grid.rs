// Throwaway experiment: grid victim depth and FGSM epsilon on the digits
// rig; report FAR / AUC / adaptive-ratio per cell. Not part of the
// deliverable surface; delete freely.

use holmes_core::attacks::{
    adaptive_cw, cw_l2, fgsm, AttackConfig, TargetSpec,
};
use holmes_core::data::load_idx;
use holmes_core::detectors::{
    build_training_set, partition_by_predicted_label, train_detector, DetectorRoster, Transform,
    Voter,
};
use holmes_core::holmes::{auc_roc, verdict, Policy};
use holmes_core::nn::train::{LossKind, TrainConfig};
use holmes_core::victim::{train_victim, VictimConfig};

fn main() -> anyhow::Result<()> {
    let data = load_idx("/tmp/digits/images.idx", "/tmp/digits/labels.idx")?;
    let parts = data.split(&[0.64, 0.15, 0.21], 11)?;
    let (train, eval, pool) = (&parts[0], &parts[1], &parts[2]);
    let k = data.num_classes;

    for (arch_name, hidden, epochs, lr) in [
        ("2x [96,48]", vec![96, 48], 300, 0.15),
        ("3x [64,64,32]", vec![64, 64, 32], 300, 0.15),
        ("4x [96,64,48,32]", vec![96, 64, 48, 32], 400, 0.1),
    ] {
        let vcfg = VictimConfig {
            hidden,
            train: TrainConfig {
                learning_rate: lr,
                epochs,
                batch_size: 8,
                seed: 3,
                loss: LossKind::CrossEntropy,
            },
        };
        let victim = train_victim(train, eval, &vcfg)?;
        let model = victim.model;

        let pool_correct: Vec<usize> = (0..pool.len())
            .filter(|&i| model.predict(&pool.images[i]).unwrap() == pool.labels[i])
            .collect();
        let cw_cfg = AttackConfig {
            c_steps: 5,
            max_iters: 500,
            inner_lr: 0.05,
            ..AttackConfig::default()
        };
        let mut benign = Vec::new();
        let mut adversarial = Vec::new();
        for &i in &pool_correct {
            benign.push(pool.images[i].clone());
            let label = pool.labels[i];
            for t in (0..k).filter(|&t| t != label) {
                let mut c = cw_cfg.clone();
                c.target = TargetSpec::Targeted(t);
                let r = cw_l2(&model, &pool.images[i], &c)?;
                if r.success {
                    adversarial.push(r.adversarial);
                }
            }
            let mut f = cw_cfg.clone();
            f.epsilon = 0.10;
            f.target = TargetSpec::Untargeted;
            let r = fgsm(&model, &pool.images[i], &f)?;
            if r.success {
                adversarial.push(r.adversarial);
            }
        }
        let samples = build_training_set(&model, &benign, &adversarial)?;
        let partitions = partition_by_predicted_label(&samples);

        let dcfg = |seed: u64| TrainConfig {
            learning_rate: 0.05,
            epochs: 400,
            batch_size: 16,
            seed,
            loss: LossKind::BinaryCrossEntropy,
        };
        let mut units = Vec::new();
        for class in 0..k {
            let part = partitions.get(&class).cloned().unwrap_or_default();
            let set = if part.iter().any(|s| s.label == 0) && part.iter().any(|s| s.label == 1) {
                part
            } else {
                samples.clone()
            };
            units.push(
                train_detector(&set, Transform::Dedicated(class), &dcfg(100 + class as u64))?.unit,
            );
        }
        let roster = DetectorRoster {
            voters: vec![
                Voter::Dedicated(units),
                Voter::Single(train_detector(&samples, Transform::TopK(9), &dcfg(200))?.unit),
                Voter::Single(train_detector(&samples, Transform::TopK(8), &dcfg(300))?.unit),
            ],
        };

        let eval_correct: Vec<usize> = (0..eval.len())
            .filter(|&i| model.predict(&eval.images[i]).unwrap() == eval.labels[i])
            .collect();
        let (benign_eval, attack_sources) = eval_correct.split_at(120);
        let benign_logits: Vec<_> = benign_eval
            .iter()
            .map(|&i| model.logits(&eval.images[i]).unwrap())
            .collect();
        let far_major = benign_logits
            .iter()
            .filter(|l| verdict(Policy::Major, &roster.votes(l).unwrap()).unwrap())
            .count() as f64
            / benign_logits.len() as f64;
        let mean_score = |l: &holmes_core::victim::Logit| -> f64 {
            let s = roster.scores(l).unwrap();
            s.iter().sum::<f64>() / s.len() as f64
        };
        let bs: Vec<f64> = benign_logits.iter().map(&mean_score).collect();

        print!(
            "{arch_name}: acc {:.4} FAR {far_major:.3} | fgsm AUC:",
            victim.test_accuracy
        );
        for eps in [0.06, 0.08, 0.10] {
            let mut fgsm_logits = Vec::new();
            for &i in attack_sources.iter().take(120) {
                let mut f = cw_cfg.clone();
                f.epsilon = eps;
                f.target = TargetSpec::Untargeted;
                let r = fgsm(&model, &eval.images[i], &f)?;
                if r.success {
                    fgsm_logits.push(model.logits(&r.adversarial)?);
                }
            }
            let fs: Vec<f64> = fgsm_logits.iter().map(&mean_score).collect();
            print!(
                " e{eps}={:.4}(n={})",
                auc_roc(&bs, &fs).unwrap_or(f64::NAN),
                fs.len()
            );
        }

        let mut base_noise = Vec::new();
        let mut ada_noise = Vec::new();
        let mut remaining_catch = 0usize;
        let mut fool_both = 0usize;
        for (j, &i) in attack_sources.iter().skip(120).take(25).enumerate() {
            let label = eval.labels[i];
            let target = (label + 1 + (j % (k - 1))) % k;
            let mut c = cw_cfg.clone();
            c.target = TargetSpec::Targeted(target);
            let b = cw_l2(&model, &eval.images[i], &c)?;
            let mut ac = c.clone();
            ac.c_steps = 7;
            ac.e_init = Some(0.25);
            let a = adaptive_cw(&model, &[&roster.voters[1]], &eval.images[i], &ac)?;
            if b.success {
                base_noise.push(b.noise.l2);
            }
            if a.attack.success {
                fool_both += 1;
                ada_noise.push(a.attack.noise.l2);
                let logit = model.logits(&a.attack.adversarial)?;
                let votes = roster.votes(&logit)?;
                if votes[0] || votes[2] {
                    remaining_catch += 1;
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        println!(
            " | fool {fool_both}/25 ratio {:.2} remaining {:.2}",
            mean(&ada_noise) / mean(&base_noise),
            remaining_catch as f64 / fool_both.max(1) as f64,
        );
    }
    Ok(())
}
