//! Experiment harness CLI: runs the train / attack / detect / evaluate
//! pipeline, or any single stage against prior outputs.

mod config;
mod pipeline;
mod workers;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use pipeline::Paths;

#[derive(Parser)]
#[command(
    name = "holmes",
    about = "Adversarial-example lab: victim training, gradient attacks and multi-detector voting",
    version
)]
struct Cli {
    /// Experiment config (JSON); built-in desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override every stage seed, derived from this one value.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for attack generation and detector training.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory for artifacts and reports.
    #[arg(long, global = true, default_value = "holmes-out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage in order and write the full report.
    Pipeline,
    /// Train the victim classifier and save it.
    TrainVictim,
    /// Generate the configured attack batches from the victim.
    GenAttacks,
    /// Train the detector roster from the training attack batches.
    TrainDetectors,
    /// Score the roster on benign and adversarial evaluation sets.
    Evaluate,
    /// Run the detector-aware adaptive attack against one voter.
    Adaptive,
    /// Sweep the attack confidence parameter and apply the retraining
    /// countermeasure.
    KappaSweep,
    /// Emit logit statistics (maxima, variances, histogram bins).
    Stats,
    /// Print the active config (defaults merged) as JSON.
    PrintConfig,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();

    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers.max(1);
    }
    let paths = Paths::new(&cli.out);

    match cli.command {
        Command::Pipeline => {
            let report = pipeline::run_pipeline(&cfg, &paths)?;
            println!(
                "pipeline complete: victim test accuracy {:.4}, report at {}",
                report.victim_test_accuracy,
                paths.report_json().display()
            );
        }
        Command::TrainVictim => {
            let v = pipeline::stage_train_victim(&cfg, &paths)?;
            println!(
                "victim trained: train acc {:.4}, test acc {:.4} -> {}",
                v.train_accuracy,
                v.test_accuracy,
                paths.victim_model().display()
            );
        }
        Command::GenAttacks => {
            let a = pipeline::stage_gen_attacks(&cfg, &paths)?;
            for s in a.train.iter().chain(&a.eval) {
                println!(
                    "{}: {}/{} succeeded ({:.1}%), mean L2 {}",
                    s.name,
                    s.successes,
                    s.runs,
                    100.0 * s.success_rate,
                    s.mean_noise_l2
                        .map_or("n/a".to_string(), |v| format!("{v:.3}"))
                );
            }
        }
        Command::TrainDetectors => {
            let d = pipeline::stage_train_detectors(&cfg, &paths)?;
            for u in &d.units {
                println!("{}: holdout AUC {:.4}", u.unit, u.holdout_auc);
            }
        }
        Command::Evaluate => {
            let m = pipeline::stage_evaluate(&cfg, &paths)?;
            for (policy, far) in &m.false_adversarial_rate {
                println!("FAR[{policy}] = {:.4}", far);
            }
            for (attack, rates) in &m.true_adversarial_rate {
                for (policy, tar) in rates {
                    println!("TAR[{attack}][{policy}] = {:.4}", tar);
                }
                println!("AUC[{attack}] = {:.4}", m.auc_roc[attack]);
            }
        }
        Command::Adaptive => {
            let a = pipeline::stage_adaptive(&cfg, &paths)?;
            println!(
                "adaptive vs {}: fool-network {:.2}%, fool-detector {:.2}%, fool-both {:.2}% \
                 (baseline {:.2}%), mean L2 {} vs baseline {}",
                a.targeted_voter,
                100.0 * a.fool_network_rate,
                100.0 * a.fool_detector_rate,
                100.0 * a.fool_both_rate,
                100.0 * a.baseline_success_rate,
                a.adaptive_mean_l2
                    .map_or("n/a".into(), |v| format!("{v:.3}")),
                a.baseline_mean_l2
                    .map_or("n/a".into(), |v| format!("{v:.3}")),
            );
            for (policy, tar) in &a.remaining_tar {
                println!("remaining voters TAR[{policy}] = {:.4}", tar);
            }
        }
        Command::KappaSweep => {
            let k = pipeline::stage_kappa_sweep(&cfg, &paths)?;
            println!("kappa  success  TAR(major)  retrained TAR(major)");
            for row in &k.rows {
                println!(
                    "{:5}  {:6.1}%  {:9.4}  {}",
                    row.kappa,
                    100.0 * row.attack_success_rate,
                    row.base_tar.get("major").copied().unwrap_or(f64::NAN),
                    row.retrained_tar
                        .as_ref()
                        .and_then(|t| t.get("major"))
                        .map_or("n/a".into(), |v| format!("{v:.4}")),
                );
            }
        }
        Command::Stats => {
            let s = pipeline::stage_stats(&cfg, &paths)?;
            for (name, stats) in &s.sets {
                println!(
                    "{name}: n={}, mean max {:.3}, mean variance {:.3}",
                    stats.count, stats.mean_max, stats.mean_variance
                );
            }
        }
        Command::PrintConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}
