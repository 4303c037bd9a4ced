//! Acceptance suite: runs the full experiment end to end at desk scale
//! and checks every release gate, printing one pass/fail line per
//! criterion (run with `--nocapture` to see them on success).
//!
//! Dataset resolution: an MNIST IDX pair under `$HOLMES_MNIST_DIR` or
//! `data/mnist/` is preferred; otherwise the bundled handwritten-digits
//! set under `data/digits/` is used; the synthetic blob fallback covers
//! the no-data case.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::Command;

use holmes_core::attacks::{AttackRecord, TargetSpec};
use holmes_core::holmes::auc_roc;
use holmes_core::nn::{Layer, Network};
use holmes_core::victim::load_victim;
use holmes_core::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

struct Gate {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

struct Suite {
    gates: Vec<Gate>,
}

impl Suite {
    fn record(&mut self, id: usize, name: &'static str, pass: bool, detail: String) {
        self.gates.push(Gate {
            id,
            name,
            pass,
            detail,
        });
    }
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf()
}

enum DataSource {
    Mnist { images: PathBuf, labels: PathBuf },
    Digits { images: PathBuf, labels: PathBuf },
    Synth,
}

fn resolve_dataset() -> DataSource {
    let mnist_dir = std::env::var("HOLMES_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| workspace_root().join("data/mnist"));
    let mnist = (
        mnist_dir.join("train-images-idx3-ubyte"),
        mnist_dir.join("train-labels-idx1-ubyte"),
    );
    if mnist.0.exists() && mnist.1.exists() {
        return DataSource::Mnist {
            images: mnist.0,
            labels: mnist.1,
        };
    }
    let digits = (
        workspace_root().join("data/digits/images.idx"),
        workspace_root().join("data/digits/labels.idx"),
    );
    if digits.0.exists() && digits.1.exists() {
        return DataSource::Digits {
            images: digits.0,
            labels: digits.1,
        };
    }
    DataSource::Synth
}

/// The desk-scale experiment profile driving criteria 2-8.
fn acceptance_config(source: &DataSource) -> serde_json::Value {
    let dataset = match source {
        DataSource::Mnist { images, labels } => serde_json::json!({
            "idx": {"images": images, "labels": labels, "limit": 10000}
        }),
        DataSource::Digits { images, labels } => serde_json::json!({
            "idx": {"images": images, "labels": labels}
        }),
        DataSource::Synth => serde_json::json!({
            "synth": {"classes": 10, "per_class": 1000, "dims": 64, "seed": 3, "blob_std": 0.25}
        }),
    };
    serde_json::json!({
        "dataset": dataset,
        "split": {"fractions": [0.7, 0.15, 0.15], "seed": 11},
        "victim": {"hidden": [64, 32], "learning_rate": 0.2, "epochs": 200, "batch_size": 16, "seed": 1},
        "train_attacks": [
            {"name": "cw_l2", "family": "cw_l2", "mode": "all_targets", "count": 250,
             "c_steps": 5, "max_iters": 500, "inner_lr": 0.05},
            {"name": "fgsm", "family": "fgsm", "mode": "untargeted", "count": 250, "epsilon": 0.12}
        ],
        "eval_attacks": [
            {"name": "cw_l2", "family": "cw_l2", "mode": "all_targets", "count": 25,
             "c_steps": 5, "max_iters": 500, "inner_lr": 0.05},
            {"name": "fgsm", "family": "fgsm", "mode": "untargeted", "count": 120, "epsilon": 0.12},
            {"name": "jsma", "family": "jsma", "mode": "all_targets", "count": 25, "gamma": 0.15},
            {"name": "cw_l0", "family": "cw_l0", "mode": "rotate_target", "count": 15,
             "c_steps": 5, "max_iters": 250, "inner_lr": 0.05},
            {"name": "cw_linf", "family": "cw_linf", "mode": "rotate_target", "count": 40,
             "c_init": 0.1, "c_steps": 8, "max_iters": 300, "inner_lr": 0.01}
        ],
        "detectors": {"voters": ["dedicated", {"top_k": 9}, {"top_k": 8}],
                      "train_attack_names": ["cw_l2", "fgsm"],
                      "learning_rate": 0.02, "epochs": 600, "batch_size": 16, "seed": 7},
        "evaluation": {"policies": ["any", "major", "all"], "benign_count": 120},
        "adaptive": {"enabled": true, "voter_index": 1, "count": 100, "c_init": 0.01,
                     "c_steps": 7, "max_iters": 500, "inner_lr": 0.05, "e_init": 0.25, "seed": 17},
        "kappa_sweep": {"enabled": true, "kappas": [0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
                        "count": 80, "retrain_kappa": 12.0,
                        "c_init": 0.01, "c_steps": 6, "max_iters": 500, "inner_lr": 0.05, "seed": 23},
        "workers": 1
    })
}

/// Miniature but complete profile for the determinism rerun.
fn determinism_config() -> serde_json::Value {
    serde_json::json!({
        "dataset": {"synth": {"classes": 4, "per_class": 120, "dims": 16, "seed": 3, "blob_std": 0.15}},
        "split": {"fractions": [0.6, 0.2, 0.2], "seed": 11},
        "victim": {"hidden": [24], "learning_rate": 0.1, "epochs": 25, "batch_size": 16, "seed": 1},
        "train_attacks": [
            {"name": "cw_l2", "family": "cw_l2", "mode": "all_targets", "count": 25,
             "c_steps": 4, "max_iters": 250, "inner_lr": 0.05},
            {"name": "fgsm", "family": "fgsm", "mode": "untargeted", "count": 60, "epsilon": 0.3}
        ],
        "eval_attacks": [
            {"name": "cw_l2", "family": "cw_l2", "mode": "all_targets", "count": 8,
             "c_steps": 4, "max_iters": 250, "inner_lr": 0.05},
            {"name": "fgsm", "family": "fgsm", "mode": "untargeted", "count": 30, "epsilon": 0.3}
        ],
        "detectors": {"voters": ["dedicated", {"top_k": 3}, {"top_k": 2}],
                      "train_attack_names": ["cw_l2", "fgsm"],
                      "learning_rate": 0.02, "epochs": 60, "batch_size": 16, "seed": 7},
        "evaluation": {"policies": ["any", "major", "all"], "benign_count": 40},
        "adaptive": {"enabled": true, "voter_index": 1, "count": 10, "c_init": 0.01,
                     "c_steps": 5, "max_iters": 250, "inner_lr": 0.05, "seed": 17},
        "kappa_sweep": {"enabled": true, "kappas": [0.0, 2.0], "count": 8, "retrain_kappa": 2.0,
                        "c_init": 0.01, "c_steps": 4, "max_iters": 200, "inner_lr": 0.05, "seed": 23},
        "workers": 1
    })
}

fn run_pipeline(cfg: &serde_json::Value, tag: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(tag);
    fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    let out_dir = dir.join("out");
    let out = Command::new(env!("CARGO_BIN_EXE_holmes"))
        .args([
            "pipeline",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "pipeline run '{tag}' failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out_dir
}

fn read_json(path: &std::path::Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
        .unwrap()
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient oracle

fn random_net(rng: &mut StdRng) -> Network<f64> {
    let input_dim = rng.gen_range(2..=5);
    let depth = rng.gen_range(1..=3);
    let mut layers = Vec::new();
    let mut dim = input_dim;
    for _ in 0..depth {
        let next = rng.gen_range(2..=6);
        layers.push(Layer::dense_init(dim, next, rng));
        match rng.gen_range(0..3) {
            0 => layers.push(Layer::Relu),
            1 => layers.push(Layer::Sigmoid),
            _ => {}
        }
        dim = next;
    }
    Network::new(input_dim, layers).unwrap()
}

fn criterion_1(suite: &mut Suite) {
    const H: f64 = 1e-5;
    let mut rng = StdRng::seed_from_u64(42);
    let mut worst = 0.0f64;
    let mut checked = 0usize;

    'nets: for _ in 0..22 {
        let mut net = random_net(&mut rng);
        // Keep ReLU pre-activations away from the kink.
        let x = 'input: loop {
            let cand = Tensor::from_vec(
                (0..net.input_dim())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            );
            let trace = net.forward(&cand).unwrap();
            for (i, layer) in net.layers().iter().enumerate() {
                if matches!(layer, Layer::Relu)
                    && trace.values()[i].data().iter().any(|v| v.abs() < 1e-3)
                {
                    continue 'input;
                }
            }
            break 'input cand;
        };
        let direction: Vec<f64> = (0..net.output_dim())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let loss = |net: &Network<f64>, x: &Tensor| -> f64 {
            net.forward(x)
                .unwrap()
                .output()
                .data()
                .iter()
                .zip(&direction)
                .map(|(a, b)| a * b)
                .sum()
        };

        let trace = net.forward(&x).unwrap();
        let grads = net
            .backward(&trace, &Tensor::from_vec(direction.clone()))
            .unwrap();

        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += H;
            let mut xm = x.clone();
            xm.data_mut()[i] -= H;
            let numeric = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * H);
            let analytic = grads.input.data()[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
            if err >= 1e-4 {
                suite.record(
                    1,
                    "gradient oracle",
                    false,
                    format!("input grad rel err {err:.2e} >= 1e-4"),
                );
                break 'nets;
            }
        }
        for li in 0..net.layers().len() {
            let Some(dg) = grads.layers[li].clone() else {
                continue;
            };
            let nw = dg.weights.len();
            for p in 0..nw + dg.bias.len() {
                let analytic = if p < nw {
                    dg.weights.data()[p]
                } else {
                    dg.bias.data()[p - nw]
                };
                let bump = |net: &mut Network<f64>, d: f64| {
                    let Layer::Dense { weights, bias } = &mut net.layers_mut()[li] else {
                        unreachable!()
                    };
                    if p < nw {
                        weights.data_mut()[p] += d;
                    } else {
                        bias.data_mut()[p - nw] += d;
                    }
                };
                bump(&mut net, H);
                let plus = loss(&net, &x);
                bump(&mut net, -2.0 * H);
                let minus = loss(&net, &x);
                bump(&mut net, H);
                let numeric = (plus - minus) / (2.0 * H);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
                checked += 1;
                if err >= 1e-4 {
                    suite.record(
                        1,
                        "gradient oracle",
                        false,
                        format!("param grad rel err {err:.2e} >= 1e-4"),
                    );
                    break 'nets;
                }
            }
        }
    }

    if !suite.gates.iter().any(|g| g.id == 1) {
        suite.record(
            1,
            "gradient oracle",
            true,
            format!("max rel err {worst:.2e} over {checked} gradients, 22 random nets"),
        );
    }
}

// ---------------------------------------------------------------------------
// Criterion 9: metric oracles + policy monotonicity

fn criterion_9(suite: &mut Suite, metrics: &serde_json::Value) {
    let mut rng = StdRng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let nb = rng.gen_range(1..40);
        let na = rng.gen_range(1..40);
        let ben: Vec<f64> = (0..nb).map(|_| rng.gen_range(0..15) as f64 / 15.0).collect();
        let adv: Vec<f64> = (0..na).map(|_| rng.gen_range(3..18) as f64 / 15.0).collect();
        let mut wins = 0u64;
        let mut ties = 0u64;
        for &a in &adv {
            for &b in &ben {
                if a > b {
                    wins += 1;
                } else if a == b {
                    ties += 1;
                }
            }
        }
        let oracle = (wins as f64 + 0.5 * ties as f64) / (nb as f64 * na as f64);
        let ours = auc_roc(&ben, &adv).unwrap();
        worst = worst.max((ours - oracle).abs());
    }
    let auc_ok = worst <= 1e-12;

    // Policy monotonicity on the actual evaluation run: flag sets are
    // nested, so Any >= Major >= All for both rates.
    let far = &metrics["false_adversarial_rate"];
    let order_ok = |m: &serde_json::Value| {
        m["any"].as_f64().unwrap() >= m["major"].as_f64().unwrap()
            && m["major"].as_f64().unwrap() >= m["all"].as_f64().unwrap()
    };
    let mut mono_ok = order_ok(far);
    for (_, rates) in metrics["true_adversarial_rate"].as_object().unwrap() {
        mono_ok &= order_ok(rates);
    }

    suite.record(
        9,
        "metric oracles",
        auc_ok && mono_ok,
        format!("auc vs pairwise oracle max diff {worst:.2e}; policy ordering held: {mono_ok}"),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let mut suite = Suite { gates: Vec::new() };

    criterion_1(&mut suite);

    let source = resolve_dataset();
    let (source_name, victim_gate) = match &source {
        DataSource::Mnist { .. } => ("mnist-10k", 0.97),
        DataSource::Digits { .. } => ("digits", 0.97),
        DataSource::Synth => ("synthetic blobs", 0.99),
    };
    let out = run_pipeline(&acceptance_config(&source), "acceptance_main");
    let report = read_json(&out.join("report.json"));
    let metrics = &report["metrics"];

    // Criterion 2: victim quality.
    let test_acc = report["victim_test_accuracy"].as_f64().unwrap();
    suite.record(
        2,
        "victim quality",
        test_acc >= victim_gate,
        format!("test accuracy {test_acc:.4} on {source_name} (gate {victim_gate})"),
    );

    // Criterion 3: CW-L2 success rate and exact margin post-condition.
    {
        let summary = report["attacks"]["eval"]
            .as_array()
            .unwrap()
            .iter()
            .find(|s| s["name"] == "cw_l2")
            .expect("eval cw_l2 summary");
        let runs = summary["runs"].as_u64().unwrap();
        let rate = summary["success_rate"].as_f64().unwrap();

        let victim = load_victim(out.join("victim.model")).unwrap();
        let text = fs::read_to_string(out.join("attacks/eval_cw_l2.jsonl")).unwrap();
        let mut margin_violations = 0usize;
        let mut successes = 0usize;
        for line in text.lines() {
            let record: AttackRecord = serde_json::from_str(line).unwrap();
            if !record.success {
                continue;
            }
            successes += 1;
            let TargetSpec::Targeted(target) = record.target else {
                panic!("eval cw_l2 must be targeted")
            };
            let logits = victim.logits(&record.adversarial).unwrap();
            if logits.argmax() != target || logits.margin(target) < -1e-6 {
                margin_violations += 1;
            }
        }
        suite.record(
            3,
            "attack success",
            runs >= 200 && rate >= 0.95 && margin_violations == 0,
            format!(
                "cw_l2 {:.1}% of {runs} pairs, {margin_violations} margin violations in {successes} successes",
                rate * 100.0
            ),
        );
    }

    // Criterion 4: detection of the seen attacks.
    {
        let auc_cw = metrics["auc_roc"]["cw_l2"].as_f64().unwrap();
        let auc_fgsm = metrics["auc_roc"]["fgsm"].as_f64().unwrap();
        let far_major = metrics["false_adversarial_rate"]["major"].as_f64().unwrap();
        suite.record(
            4,
            "detection, seen attacks",
            auc_cw >= 0.95 && auc_fgsm >= 0.95 && far_major <= 0.10,
            format!("AUC cw_l2 {auc_cw:.4}, fgsm {auc_fgsm:.4}; FAR(major) {far_major:.4}"),
        );
    }

    // Criterion 5: detection of attacks never used in training.
    {
        let jsma = metrics["true_adversarial_rate"]["jsma"]["major"]
            .as_f64()
            .unwrap();
        let linf = metrics["true_adversarial_rate"]["cw_linf"]["major"]
            .as_f64()
            .unwrap();
        suite.record(
            5,
            "detection, unseen attacks",
            jsma >= 0.90 && linf >= 0.90,
            format!("TAR(major) jsma {jsma:.4}, cw_linf {linf:.4}"),
        );
    }

    // Criterion 6: the logit-feature premise.
    {
        let stats = metrics["logit_stats"].as_object().unwrap();
        let benign = &stats["benign"];
        let bmax = benign["mean_max"].as_f64().unwrap();
        let bvar = benign["mean_variance"].as_f64().unwrap();
        let mut ok = true;
        let mut detail = format!("benign max {bmax:.2}/var {bvar:.2};");
        for (name, s) in stats {
            if name == "benign" {
                continue;
            }
            let amax = s["mean_max"].as_f64().unwrap();
            let avar = s["mean_variance"].as_f64().unwrap();
            ok &= amax < bmax && avar < bvar;
            write!(detail, " {name} {amax:.2}/{avar:.2}").unwrap();
        }
        suite.record(6, "logit-feature premise", ok, detail);
    }

    // Criterion 7: the adaptive attack.
    {
        let a = &report["adaptive"];
        let baseline = a["baseline_success_rate"].as_f64().unwrap();
        let fool_both = a["fool_both_rate"].as_f64().unwrap();
        let base_l2 = a["baseline_mean_l2"].as_f64().unwrap_or(f64::NAN);
        let adaptive_l2 = a["adaptive_mean_l2"].as_f64().unwrap_or(f64::NAN);
        let remaining_any = a["remaining_tar"]["any"].as_f64().unwrap_or(0.0);
        let ratio = adaptive_l2 / base_l2;
        suite.record(
            7,
            "adaptive attack",
            fool_both < baseline && ratio >= 3.0 && remaining_any >= 0.90,
            format!(
                "success {fool_both:.3} vs baseline {baseline:.3}; noise {adaptive_l2:.3} vs {base_l2:.3} ({ratio:.2}x, need 3x); remaining TAR(any) {remaining_any:.3}"
            ),
        );
    }

    // Criterion 8: confidence sweep and the retraining countermeasure.
    {
        let rows = report["kappa_sweep"]["rows"].as_array().unwrap();
        let base: Vec<f64> = rows
            .iter()
            .map(|r| r["base_tar"]["major"].as_f64().unwrap())
            .collect();
        let monotone = base.windows(2).all(|w| w[1] <= w[0]);
        let retrained: Vec<f64> = rows
            .iter()
            .map(|r| r["retrained_tar"]["major"].as_f64().unwrap())
            .collect();
        let restored = retrained.iter().all(|&t| t >= 0.95);
        suite.record(
            8,
            "kappa sweep + countermeasure",
            monotone && restored,
            format!(
                "base TAR(major) {:?} monotone: {monotone}; retrained {:?} all >= 0.95: {restored}",
                base.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                retrained.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
            ),
        );
    }

    criterion_9(&mut suite, metrics);

    // Criterion 10: full-pipeline determinism.
    {
        let cfg = determinism_config();
        let out_a = run_pipeline(&cfg, "acceptance_det_a");
        let out_b = run_pipeline(&cfg, "acceptance_det_b");
        let a = fs::read(out_a.join("metrics.json")).unwrap();
        let b = fs::read(out_b.join("metrics.json")).unwrap();
        suite.record(
            10,
            "determinism",
            a == b,
            format!("metrics.json byte-identical across reruns ({} bytes)", a.len()),
        );
    }

    let mut failures = Vec::new();
    for gate in &suite.gates {
        let status = if gate.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} [{status}] {}: {}", gate.id, gate.name, gate.detail);
        if !gate.pass {
            failures.push(format!("criterion {} ({}): {}", gate.id, gate.name, gate.detail));
        }
    }
    assert!(
        failures.is_empty(),
        "{} acceptance criteria failed:\n{}",
        failures.len(),
        failures.join("\n")
    );
}
