//! Pipeline stages and their on-disk artifacts.
//!
//! Every stage is runnable standalone against the outputs of earlier
//! stages. Each JSON artifact embeds the config hash; consumers refuse
//! artifacts whose hash does not match the active config, which is how
//! stale partial outputs surface.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use holmes_core::attacks::{
    adaptive_cw, cw_l0, cw_l2, cw_linf, fgsm, jsma, untargeted_wrap, AttackConfig, AttackFamily,
    AttackRecord, AttackResult, TargetSpec,
};
use holmes_core::data::{load_idx, synth_dataset_with_spread, Dataset};
use holmes_core::detectors::{
    build_training_set, load_roster, partition_by_predicted_label, save_roster, train_detector,
    DetectorRoster, DetectorSample, Transform, Voter,
};
use holmes_core::holmes::{
    evaluate, logit_stats, verdict, LogitStatsSummary, MetricsReport, Policy,
};
use holmes_core::nn::train::{LossKind, TrainConfig};
use holmes_core::victim::{load_victim, save_victim, train_victim, Logit, VictimConfig, VictimModel};
use holmes_core::Tensor;

use crate::config::{
    AttackMode, AttackSpec, DatasetSpec, ExperimentConfig, VoterSpec,
};
use crate::workers::parallel_map;

// ---------------------------------------------------------------------------
// Artifact layout

#[derive(Clone)]
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }

    pub fn victim_model(&self) -> PathBuf {
        self.out.join("victim.model")
    }
    pub fn victim_json(&self) -> PathBuf {
        self.out.join("victim.json")
    }
    pub fn attacks_dir(&self) -> PathBuf {
        self.out.join("attacks")
    }
    pub fn attack_jsonl(&self, stage: &str, name: &str) -> PathBuf {
        self.attacks_dir().join(format!("{stage}_{name}.jsonl"))
    }
    pub fn attack_summary(&self, stage: &str, name: &str) -> PathBuf {
        self.attacks_dir().join(format!("{stage}_{name}.json"))
    }
    pub fn roster_dir(&self) -> PathBuf {
        self.out.join("detectors")
    }
    pub fn detectors_json(&self) -> PathBuf {
        self.out.join("detectors.json")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.out.join("metrics.json")
    }
    pub fn eval_meta_json(&self) -> PathBuf {
        self.out.join("eval_meta.json")
    }
    pub fn adaptive_json(&self) -> PathBuf {
        self.out.join("adaptive.json")
    }
    pub fn kappa_json(&self) -> PathBuf {
        self.out.join("kappa_sweep.json")
    }
    pub fn stats_json(&self) -> PathBuf {
        self.out.join("stats.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.out.join("report.json")
    }
    pub fn state_json(&self) -> PathBuf {
        self.out.join("run_state.json")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)
        .with_context(|| format!("missing artifact {} (run the earlier stages first)", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn check_hash(artifact: &str, found: u64, cfg: &ExperimentConfig) -> Result<()> {
    let expected = cfg.hash();
    if found != expected {
        bail!(
            "stale artifact: {artifact} was produced under config hash {found:016x}, \
             current config hashes to {expected:016x}; rerun the earlier stages"
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset and splits

pub struct SplitData {
    pub dataset_name: String,
    pub dataset_checksum: u64,
    pub victim_train: Dataset,
    pub evaluation: Dataset,
    pub detector_pool: Dataset,
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<SplitData> {
    let dataset = match &cfg.dataset {
        DatasetSpec::Synth {
            classes,
            per_class,
            dims,
            seed,
            blob_std,
        } => synth_dataset_with_spread(*classes, *per_class, *dims, *seed, *blob_std)?,
        DatasetSpec::Idx {
            images,
            labels,
            limit,
        } => {
            let mut ds = load_idx(images, labels)?;
            if let Some(limit) = limit {
                let n = (*limit).min(ds.len());
                ds.images.truncate(n);
                ds.labels.truncate(n);
                ds.ids.truncate(n);
            }
            ds
        }
    };
    let mut parts = dataset.split(&cfg.split.fractions, cfg.split.seed)?;
    let detector_pool = parts.pop().expect("three parts");
    let evaluation = parts.pop().expect("three parts");
    let victim_train = parts.pop().expect("three parts");
    Ok(SplitData {
        dataset_name: dataset.name.clone(),
        dataset_checksum: dataset.source_checksum,
        victim_train,
        evaluation,
        detector_pool,
    })
}

/// Indices (into `ds`) of examples the model labels correctly.
fn correctly_classified(model: &VictimModel, ds: &Dataset) -> Result<Vec<usize>> {
    let mut keep = Vec::new();
    for (i, (x, &l)) in ds.images.iter().zip(&ds.labels).enumerate() {
        if model.predict(x)? == l {
            keep.push(i);
        }
    }
    Ok(keep)
}

// ---------------------------------------------------------------------------
// Stage: train-victim

#[derive(Debug, Serialize, Deserialize)]
pub struct VictimArtifact {
    pub config_hash: u64,
    pub dataset_name: String,
    pub dataset_checksum: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epoch_loss: Vec<f64>,
    pub victim_train_ids: Vec<u64>,
    pub evaluation_ids: Vec<u64>,
    pub detector_pool_ids: Vec<u64>,
    pub seconds: f64,
}

pub fn stage_train_victim(cfg: &ExperimentConfig, paths: &Paths) -> Result<VictimArtifact> {
    let start = Instant::now();
    let splits = load_splits(cfg)?;
    let vcfg = VictimConfig {
        hidden: cfg.victim.hidden.clone(),
        train: TrainConfig {
            learning_rate: cfg.victim.learning_rate,
            epochs: cfg.victim.epochs,
            batch_size: cfg.victim.batch_size,
            seed: cfg.victim.seed,
            loss: LossKind::CrossEntropy,
        },
    };
    let trained = train_victim(&splits.victim_train, &splits.evaluation, &vcfg)?;
    fs::create_dir_all(&paths.out)?;
    save_victim(&trained.model, cfg.victim.seed, paths.victim_model())?;

    let artifact = VictimArtifact {
        config_hash: cfg.hash(),
        dataset_name: splits.dataset_name,
        dataset_checksum: splits.dataset_checksum,
        train_accuracy: trained.train_accuracy,
        test_accuracy: trained.test_accuracy,
        epoch_loss: trained.history.epoch_loss.clone(),
        victim_train_ids: splits.victim_train.ids.clone(),
        evaluation_ids: splits.evaluation.ids.clone(),
        detector_pool_ids: splits.detector_pool.ids.clone(),
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&paths.victim_json(), &artifact)?;
    Ok(artifact)
}

fn load_victim_checked(cfg: &ExperimentConfig, paths: &Paths) -> Result<VictimModel> {
    let artifact: VictimArtifact = read_json(&paths.victim_json())?;
    check_hash("victim.json", artifact.config_hash, cfg)?;
    Ok(load_victim(paths.victim_model())?)
}

// ---------------------------------------------------------------------------
// Stage: gen-attacks

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSummary {
    pub config_hash: u64,
    pub name: String,
    pub family: AttackFamily,
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_noise_l0: Option<f64>,
    pub mean_noise_l2: Option<f64>,
    pub mean_noise_linf: Option<f64>,
    pub source_ids: Vec<u64>,
    pub seconds: f64,
}

/// (source index, target) pairs a spec expands to over its sources.
fn attack_jobs(
    spec: &AttackSpec,
    sources: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Vec<(usize, TargetSpec)> {
    let take = sources.len().min(spec.count);
    let mut jobs = Vec::new();
    for (i, &src) in sources[..take].iter().enumerate() {
        let label = labels[src];
        match spec.mode {
            AttackMode::AllTargets => {
                for t in (0..num_classes).filter(|&t| t != label) {
                    jobs.push((src, TargetSpec::Targeted(t)));
                }
            }
            AttackMode::RotateTarget => {
                let offset = 1 + (i % (num_classes - 1));
                jobs.push((src, TargetSpec::Targeted((label + offset) % num_classes)));
            }
            AttackMode::Untargeted | AttackMode::WrapMin => {
                jobs.push((src, TargetSpec::Untargeted));
            }
        }
    }
    jobs
}

fn run_attack(
    model: &VictimModel,
    spec: &AttackSpec,
    x: &Tensor,
    target: TargetSpec,
) -> Result<AttackResult> {
    let acfg: AttackConfig = spec.to_attack_config(target);
    let result = match (spec.family, spec.mode) {
        (_, AttackMode::WrapMin) => untargeted_wrap(spec.family, model, x, &acfg)?,
        (AttackFamily::Fgsm, _) => fgsm(model, x, &acfg)?,
        (AttackFamily::Jsma, _) => jsma(model, x, &acfg)?,
        (AttackFamily::CwL0, _) => cw_l0(model, x, &acfg)?,
        (AttackFamily::CwL2, _) => cw_l2(model, x, &acfg)?,
        (AttackFamily::CwLinf, _) => cw_linf(model, x, &acfg)?,
        (AttackFamily::AdaptiveCw, _) => {
            bail!("adaptive attacks run in the dedicated adaptive stage")
        }
    };
    Ok(result)
}

fn generate_attack_set(
    cfg: &ExperimentConfig,
    model: &VictimModel,
    ds: &Dataset,
    sources: &[usize],
    spec: &AttackSpec,
    stage: &str,
    paths: &Paths,
) -> Result<AttackSummary> {
    let start = Instant::now();
    let jobs = attack_jobs(spec, sources, &ds.labels, ds.num_classes);
    let records = parallel_map(&jobs, cfg.workers, |_, &(src, target)| {
        let result = run_attack(model, spec, &ds.images[src], target)
            .with_context(|| format!("{} attack on sample {}", spec.name, ds.ids[src]))?;
        Ok(AttackRecord::new(ds.ids[src], spec.family, target, &result))
    })?;

    fs::create_dir_all(paths.attacks_dir())?;
    let mut file = fs::File::create(paths.attack_jsonl(stage, &spec.name))?;
    for record in &records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }

    let successes: Vec<&AttackRecord> = records.iter().filter(|r| r.success).collect();
    let mean = |f: fn(&&AttackRecord) -> f64| -> Option<f64> {
        if successes.is_empty() {
            None
        } else {
            Some(successes.iter().map(f).sum::<f64>() / successes.len() as f64)
        }
    };
    let take = sources.len().min(spec.count);
    let summary = AttackSummary {
        config_hash: cfg.hash(),
        name: spec.name.clone(),
        family: spec.family,
        runs: records.len(),
        successes: successes.len(),
        success_rate: if records.is_empty() {
            0.0
        } else {
            successes.len() as f64 / records.len() as f64
        },
        mean_noise_l0: mean(|r| r.noise.l0),
        mean_noise_l2: mean(|r| r.noise.l2),
        mean_noise_linf: mean(|r| r.noise.linf),
        source_ids: sources[..take].iter().map(|&i| ds.ids[i]).collect(),
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&paths.attack_summary(stage, &spec.name), &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttacksArtifact {
    pub train: Vec<AttackSummary>,
    pub eval: Vec<AttackSummary>,
}

/// Evaluation-split sample ranges: benign scoring first, attack sources
/// after, so the two roles never share an example.
fn eval_ranges<'a>(
    cfg: &ExperimentConfig,
    correct: &'a [usize],
) -> Result<(&'a [usize], &'a [usize])> {
    if correct.len() <= cfg.evaluation.benign_count {
        bail!(
            "evaluation split has only {} correctly classified examples, \
             benign_count {} leaves none for attacks",
            correct.len(),
            cfg.evaluation.benign_count
        );
    }
    Ok(correct.split_at(cfg.evaluation.benign_count))
}

pub fn stage_gen_attacks(cfg: &ExperimentConfig, paths: &Paths) -> Result<AttacksArtifact> {
    let model = load_victim_checked(cfg, paths)?;
    let splits = load_splits(cfg)?;

    let pool_correct = correctly_classified(&model, &splits.detector_pool)?;
    let mut train = Vec::new();
    for spec in &cfg.train_attacks {
        train.push(generate_attack_set(
            cfg,
            &model,
            &splits.detector_pool,
            &pool_correct,
            spec,
            "train",
            paths,
        )?);
    }

    let eval_correct = correctly_classified(&model, &splits.evaluation)?;
    let (_, attack_sources) = eval_ranges(cfg, &eval_correct)?;
    let mut eval = Vec::new();
    for spec in &cfg.eval_attacks {
        eval.push(generate_attack_set(
            cfg,
            &model,
            &splits.evaluation,
            attack_sources,
            spec,
            "eval",
            paths,
        )?);
    }

    Ok(AttacksArtifact { train, eval })
}

fn read_attack_records(
    cfg: &ExperimentConfig,
    paths: &Paths,
    stage: &str,
    name: &str,
) -> Result<Vec<AttackRecord>> {
    let summary: AttackSummary = read_json(&paths.attack_summary(stage, name))?;
    check_hash(&format!("attacks/{stage}_{name}.json"), summary.config_hash, cfg)?;
    let text = fs::read_to_string(paths.attack_jsonl(stage, name))?;
    text.lines()
        .map(|line| Ok(serde_json::from_str(line)?))
        .collect()
}

// ---------------------------------------------------------------------------
// Stage: train-detectors

#[derive(Debug, Serialize, Deserialize)]
pub struct UnitReport {
    pub voter: String,
    pub unit: String,
    pub holdout_auc: f64,
    pub training_samples: usize,
    /// Set when a dedicated class partition lacked a label and the unit
    /// fell back to the full sample set.
    pub fallback_to_full: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectorsArtifact {
    pub config_hash: u64,
    pub benign_samples: usize,
    pub adversarial_samples: usize,
    pub benign_source_ids: Vec<u64>,
    pub units: Vec<UnitReport>,
    pub seconds: f64,
}

/// Collects detector training material from the train-attack artifacts:
/// benign tensors are the distinct attack sources, adversarial tensors
/// the successful attack outputs.
fn detector_material(
    cfg: &ExperimentConfig,
    paths: &Paths,
    pool: &Dataset,
    attack_names: &[String],
    kappa_override: Option<(&VictimModel, f64, u64)>,
) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<u64>)> {
    let id_to_index: BTreeMap<u64, usize> =
        pool.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut benign_ids = BTreeSet::new();
    let mut adversarial = Vec::new();
    for name in attack_names {
        // The countermeasure regenerates confidence-bearing attacks at a
        // higher kappa instead of reading the stock artifacts.
        let regenerate = kappa_override.and_then(|(model, kappa, seed)| {
            let spec = cfg.train_attacks.iter().find(|s| s.name == *name)?;
            if spec.family == AttackFamily::CwL2 {
                Some((model, kappa, seed, spec.clone()))
            } else {
                None
            }
        });
        match regenerate {
            Some((model, kappa, seed, mut spec)) => {
                spec.kappa = kappa;
                spec.seed = seed;
                let correct = correctly_classified(model, pool)?;
                let jobs = attack_jobs(&spec, &correct, &pool.labels, pool.num_classes);
                let results = parallel_map(&jobs, cfg.workers, |_, &(src, target)| {
                    run_attack(model, &spec, &pool.images[src], target)
                })?;
                let take = correct.len().min(spec.count);
                for &src in &correct[..take] {
                    benign_ids.insert(pool.ids[src]);
                }
                adversarial.extend(
                    results
                        .into_iter()
                        .filter(|r| r.success)
                        .map(|r| r.adversarial),
                );
            }
            None => {
                let records = read_attack_records(cfg, paths, "train", name)?;
                for r in &records {
                    benign_ids.insert(r.sample_id);
                    if r.success {
                        adversarial.push(r.adversarial.clone());
                    }
                }
            }
        }
    }

    let mut benign = Vec::with_capacity(benign_ids.len());
    for &id in &benign_ids {
        let &idx = id_to_index
            .get(&id)
            .with_context(|| format!("attack source id {id} is not in the detector pool"))?;
        benign.push(pool.images[idx].clone());
    }
    Ok((benign, adversarial, benign_ids.into_iter().collect()))
}

fn train_roster(
    cfg: &ExperimentConfig,
    samples: &[DetectorSample],
    num_classes: usize,
) -> Result<(DetectorRoster, Vec<UnitReport>)> {
    let base_cfg = |seed: u64| TrainConfig {
        learning_rate: cfg.detectors.learning_rate,
        epochs: cfg.detectors.epochs,
        batch_size: cfg.detectors.batch_size,
        seed,
        loss: LossKind::BinaryCrossEntropy,
    };

    // Expand voter specs into independent unit training jobs.
    struct Job {
        voter_index: usize,
        voter_name: String,
        unit_name: String,
        transform: Transform,
        class: Option<usize>,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for (vi, voter) in cfg.detectors.voters.iter().enumerate() {
        match voter {
            VoterSpec::Dedicated => {
                for class in 0..num_classes {
                    jobs.push(Job {
                        voter_index: vi,
                        voter_name: "dedicated".into(),
                        unit_name: format!("dedicated_{class}"),
                        transform: Transform::Dedicated(class),
                        class: Some(class),
                        seed: cfg.detectors.seed.wrapping_add((vi * 100 + class) as u64),
                    });
                }
            }
            VoterSpec::TopK(k) => jobs.push(Job {
                voter_index: vi,
                voter_name: format!("top{k}"),
                unit_name: format!("top{k}"),
                transform: Transform::TopK(*k),
                class: None,
                seed: cfg.detectors.seed.wrapping_add((vi * 100) as u64),
            }),
            VoterSpec::Full => jobs.push(Job {
                voter_index: vi,
                voter_name: "full".into(),
                unit_name: "full".into(),
                transform: Transform::Full,
                class: None,
                seed: cfg.detectors.seed.wrapping_add((vi * 100) as u64),
            }),
        }
    }

    let partitions = partition_by_predicted_label(samples);
    let trained = parallel_map(&jobs, cfg.workers, |_, job| {
        let (set, fallback): (Vec<DetectorSample>, bool) = match job.class {
            Some(class) => {
                let part = partitions.get(&class).cloned().unwrap_or_default();
                let has_both = part.iter().any(|s| s.label == 0)
                    && part.iter().any(|s| s.label == 1);
                if has_both {
                    (part, false)
                } else {
                    (samples.to_vec(), true)
                }
            }
            None => (samples.to_vec(), false),
        };
        let t = train_detector(&set, job.transform, &base_cfg(job.seed))
            .with_context(|| format!("training unit {}", job.unit_name))?;
        Ok((t, set.len(), fallback))
    })?;

    let mut reports = Vec::new();
    let mut voters: Vec<Option<Voter>> = vec![None; cfg.detectors.voters.len()];
    for (job, (t, n_samples, fallback)) in jobs.iter().zip(trained) {
        reports.push(UnitReport {
            voter: job.voter_name.clone(),
            unit: job.unit_name.clone(),
            holdout_auc: t.holdout_auc,
            training_samples: n_samples,
            fallback_to_full: fallback,
        });
        match &mut voters[job.voter_index] {
            slot @ None => {
                *slot = Some(match job.class {
                    Some(_) => Voter::Dedicated(vec![t.unit]),
                    None => Voter::Single(t.unit),
                });
            }
            Some(Voter::Dedicated(units)) => units.push(t.unit),
            Some(Voter::Single(_)) => bail!("voter {} received two units", job.voter_index),
        }
    }
    let voters: Vec<Voter> = voters
        .into_iter()
        .map(|v| v.context("voter spec produced no units"))
        .collect::<Result<_>>()?;
    Ok((DetectorRoster { voters }, reports))
}

pub fn stage_train_detectors(cfg: &ExperimentConfig, paths: &Paths) -> Result<DetectorsArtifact> {
    let start = Instant::now();
    let model = load_victim_checked(cfg, paths)?;
    let splits = load_splits(cfg)?;

    let (benign, adversarial, benign_ids) = detector_material(
        cfg,
        paths,
        &splits.detector_pool,
        &cfg.detectors.train_attack_names,
        None,
    )?;
    if adversarial.is_empty() {
        bail!("no successful training attacks found; run gen-attacks first");
    }
    let samples = build_training_set(&model, &benign, &adversarial)?;
    let (roster, units) = train_roster(cfg, &samples, model.num_classes())?;
    save_roster(&roster, paths.roster_dir(), cfg.detectors.seed)?;

    let artifact = DetectorsArtifact {
        config_hash: cfg.hash(),
        benign_samples: benign.len(),
        adversarial_samples: adversarial.len(),
        benign_source_ids: benign_ids,
        units,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&paths.detectors_json(), &artifact)?;
    Ok(artifact)
}

fn load_roster_checked(cfg: &ExperimentConfig, paths: &Paths) -> Result<DetectorRoster> {
    let artifact: DetectorsArtifact = read_json(&paths.detectors_json())?;
    check_hash("detectors.json", artifact.config_hash, cfg)?;
    Ok(load_roster(paths.roster_dir())?)
}

// ---------------------------------------------------------------------------
// Stage: evaluate

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalMeta {
    pub config_hash: u64,
    pub benign_count: usize,
    pub benign_ids: Vec<u64>,
    pub adversarial_counts: BTreeMap<String, usize>,
    pub seconds: f64,
}

fn benign_eval_logits(
    cfg: &ExperimentConfig,
    model: &VictimModel,
    evaluation: &Dataset,
) -> Result<(Vec<Logit>, Vec<u64>)> {
    let correct = correctly_classified(model, evaluation)?;
    let (benign_range, _) = eval_ranges(cfg, &correct)?;
    let mut logits = Vec::with_capacity(benign_range.len());
    let mut ids = Vec::with_capacity(benign_range.len());
    for &i in benign_range {
        logits.push(model.logits(&evaluation.images[i])?);
        ids.push(evaluation.ids[i]);
    }
    Ok((logits, ids))
}

/// Logits of the successful adversarial examples of each eval attack.
fn eval_adversarial_logits(
    cfg: &ExperimentConfig,
    paths: &Paths,
    model: &VictimModel,
) -> Result<Vec<(String, Vec<Logit>)>> {
    let mut sets = Vec::new();
    for spec in &cfg.eval_attacks {
        let records = read_attack_records(cfg, paths, "eval", &spec.name)?;
        let mut logits = Vec::new();
        for r in records.iter().filter(|r| r.success) {
            logits.push(model.logits(&r.adversarial)?);
        }
        sets.push((spec.name.clone(), logits));
    }
    Ok(sets)
}

pub fn stage_evaluate(cfg: &ExperimentConfig, paths: &Paths) -> Result<MetricsReport> {
    let start = Instant::now();
    let model = load_victim_checked(cfg, paths)?;
    let roster = load_roster_checked(cfg, paths)?;
    let splits = load_splits(cfg)?;

    let (benign, benign_ids) = benign_eval_logits(cfg, &model, &splits.evaluation)?;
    let adversarial = eval_adversarial_logits(cfg, paths, &model)?;
    let usable: Vec<(String, Vec<Logit>)> = adversarial
        .into_iter()
        .filter(|(_, set)| !set.is_empty())
        .collect();

    let metrics = evaluate(&roster, &cfg.evaluation.policies, &benign, &usable)?;
    write_json(&paths.metrics_json(), &metrics)?;

    let meta = EvalMeta {
        config_hash: cfg.hash(),
        benign_count: benign.len(),
        benign_ids,
        adversarial_counts: usable
            .iter()
            .map(|(n, s)| (n.clone(), s.len()))
            .collect(),
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&paths.eval_meta_json(), &meta)?;
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Stage: adaptive

#[derive(Debug, Serialize, Deserialize)]
pub struct AdaptiveArtifact {
    pub config_hash: u64,
    pub targeted_voter: String,
    pub pairs: usize,
    /// Plain CW-L2 on the same (example, target) pairs.
    pub baseline_success_rate: f64,
    pub baseline_mean_l2: Option<f64>,
    /// Label flip achieved, detectors ignored.
    pub fool_network_rate: f64,
    /// Targeted detector below 0.5, label ignored.
    pub fool_detector_rate: f64,
    /// Both constraints satisfied.
    pub fool_both_rate: f64,
    pub adaptive_mean_l2: Option<f64>,
    /// Detection of successful adaptive examples by the voters the
    /// attacker did not know about.
    pub remaining_tar: BTreeMap<String, f64>,
    /// Detection by the full roster (the known voter included).
    pub full_roster_tar: BTreeMap<String, f64>,
    /// Per-example view of the successful adaptive attacks.
    pub cases: Vec<AdaptiveCase>,
    pub seconds: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdaptiveCase {
    pub sample_id: u64,
    pub target: usize,
    pub success: bool,
    pub l2: f64,
    pub targeted_score: f64,
    pub remaining_scores: Vec<f64>,
}

pub fn stage_adaptive(cfg: &ExperimentConfig, paths: &Paths) -> Result<AdaptiveArtifact> {
    let start = Instant::now();
    if !cfg.adaptive.enabled {
        bail!("adaptive stage is disabled in this config");
    }
    let model = load_victim_checked(cfg, paths)?;
    let roster = load_roster_checked(cfg, paths)?;
    let spec = &cfg.adaptive;
    if spec.voter_index >= roster.num_voters() {
        bail!(
            "adaptive voter_index {} out of range ({} voters)",
            spec.voter_index,
            roster.num_voters()
        );
    }
    let splits = load_splits(cfg)?;
    let correct = correctly_classified(&model, &splits.evaluation)?;
    let (_, attack_sources) = eval_ranges(cfg, &correct)?;
    let k = splits.evaluation.num_classes;

    let take = attack_sources.len().min(spec.count);
    let jobs: Vec<(usize, usize)> = attack_sources[..take]
        .iter()
        .enumerate()
        .map(|(i, &src)| {
            let label = splits.evaluation.labels[src];
            (src, (label + 1 + (i % (k - 1))) % k)
        })
        .collect();

    let base_attack = AttackConfig {
        family: AttackFamily::CwL2,
        target: TargetSpec::Untargeted, // replaced per job
        kappa: 0.0,
        c_init: spec.c_init,
        c_steps: spec.c_steps,
        max_iters: spec.max_iters,
        inner_lr: spec.inner_lr,
        e_init: spec.e_init,
        seed: spec.seed,
        ..AttackConfig::default()
    };

    let voter = &roster.voters[spec.voter_index];
    let outcomes = parallel_map(&jobs, cfg.workers, |_, &(src, target)| {
        let x = &splits.evaluation.images[src];
        let mut acfg = base_attack.clone();
        acfg.target = TargetSpec::Targeted(target);
        let baseline = cw_l2(&model, x, &acfg)?;
        let mut adaptive_cfg = acfg.clone();
        adaptive_cfg.family = AttackFamily::AdaptiveCw;
        let adaptive = adaptive_cw(&model, &[voter], x, &adaptive_cfg)?;
        Ok((baseline, adaptive, target))
    })?;

    let n = outcomes.len();
    let baseline_successes: Vec<f64> = outcomes
        .iter()
        .filter(|(b, _, _)| b.success)
        .map(|(b, _, _)| b.noise.l2)
        .collect();
    let fool_network = outcomes
        .iter()
        .filter(|(_, a, t)| a.attack.achieved_label == *t)
        .count();
    let fool_detector = outcomes
        .iter()
        .filter(|(_, a, _)| a.bypassed.iter().all(|&b| b))
        .count();
    let both: Vec<&(AttackResult, holmes_core::attacks::AdaptiveResult, usize)> = outcomes
        .iter()
        .filter(|(_, a, _)| a.attack.success)
        .collect();
    let adaptive_l2: Vec<f64> = both.iter().map(|(_, a, _)| a.attack.noise.l2).collect();

    // How the rest of the roster sees the successful adaptive examples.
    let mut remaining_tar = BTreeMap::new();
    let mut full_roster_tar = BTreeMap::new();
    let mut cases = Vec::new();
    for (job, (_, a, target)) in jobs.iter().zip(&outcomes) {
        let logit = model.logits(&a.attack.adversarial)?;
        let scores = roster.scores(&logit)?;
        cases.push(AdaptiveCase {
            sample_id: splits.evaluation.ids[job.0],
            target: *target,
            success: a.attack.success,
            l2: a.attack.noise.l2,
            targeted_score: scores[spec.voter_index],
            remaining_scores: scores
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != spec.voter_index)
                .map(|(_, &s)| s)
                .collect(),
        });
    }
    if !both.is_empty() {
        let mut remaining_flags: BTreeMap<Policy, usize> = BTreeMap::new();
        let mut full_flags: BTreeMap<Policy, usize> = BTreeMap::new();
        for (_, a, _) in &both {
            let logit = model.logits(&a.attack.adversarial)?;
            let full_votes = roster.votes(&logit)?;
            let remaining_votes: Vec<bool> = full_votes
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != spec.voter_index)
                .map(|(_, &v)| v)
                .collect();
            for &policy in &cfg.evaluation.policies {
                if !remaining_votes.is_empty() && verdict(policy, &remaining_votes)? {
                    *remaining_flags.entry(policy).or_insert(0) += 1;
                }
                if verdict(policy, &full_votes)? {
                    *full_flags.entry(policy).or_insert(0) += 1;
                }
            }
        }
        for &policy in &cfg.evaluation.policies {
            remaining_tar.insert(
                policy.name().to_string(),
                *remaining_flags.get(&policy).unwrap_or(&0) as f64 / both.len() as f64,
            );
            full_roster_tar.insert(
                policy.name().to_string(),
                *full_flags.get(&policy).unwrap_or(&0) as f64 / both.len() as f64,
            );
        }
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let artifact = AdaptiveArtifact {
        config_hash: cfg.hash(),
        targeted_voter: voter.name(),
        pairs: n,
        baseline_success_rate: baseline_successes.len() as f64 / n as f64,
        baseline_mean_l2: mean(&baseline_successes),
        fool_network_rate: fool_network as f64 / n as f64,
        fool_detector_rate: fool_detector as f64 / n as f64,
        fool_both_rate: both.len() as f64 / n as f64,
        adaptive_mean_l2: mean(&adaptive_l2),
        remaining_tar,
        full_roster_tar,
        cases,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&paths.adaptive_json(), &artifact)?;
    Ok(artifact)
}

// ---------------------------------------------------------------------------
// Stage: kappa-sweep

#[derive(Debug, Serialize, Deserialize)]
pub struct KappaRow {
    pub kappa: f64,
    pub attack_success_rate: f64,
    pub mean_l2: Option<f64>,
    /// Detection by the roster trained at confidence 0.
    pub base_tar: BTreeMap<String, f64>,
    /// Detection by the roster retrained at `retrain_kappa`.
    pub retrained_tar: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KappaArtifact {
    pub config_hash: u64,
    pub rows: Vec<KappaRow>,
    pub base_far: BTreeMap<String, f64>,
    pub retrained_far: Option<BTreeMap<String, f64>>,
    pub retrain_kappa: Option<f64>,
    pub retrained_units: Option<Vec<UnitReport>>,
    pub seconds: f64,
}

fn tar_under_roster(
    roster: &DetectorRoster,
    policies: &[Policy],
    logits: &[Logit],
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for &policy in policies {
        let mut flagged = 0usize;
        for l in logits {
            if verdict(policy, &roster.votes(l)?)? {
                flagged += 1;
            }
        }
        out.insert(
            policy.name().to_string(),
            if logits.is_empty() {
                0.0
            } else {
                flagged as f64 / logits.len() as f64
            },
        );
    }
    Ok(out)
}

pub fn stage_kappa_sweep(cfg: &ExperimentConfig, paths: &Paths) -> Result<KappaArtifact> {
    let start = Instant::now();
    if !cfg.kappa_sweep.enabled {
        bail!("kappa-sweep stage is disabled in this config");
    }
    let model = load_victim_checked(cfg, paths)?;
    let base_roster = load_roster_checked(cfg, paths)?;
    let spec = &cfg.kappa_sweep;
    let splits = load_splits(cfg)?;
    let correct = correctly_classified(&model, &splits.evaluation)?;
    let (_, attack_sources) = eval_ranges(cfg, &correct)?;
    let k = splits.evaluation.num_classes;

    let take = attack_sources.len().min(spec.count);
    let jobs: Vec<(usize, usize)> = attack_sources[..take]
        .iter()
        .enumerate()
        .map(|(i, &src)| {
            let label = splits.evaluation.labels[src];
            (src, (label + 1 + (i % (k - 1))) % k)
        })
        .collect();

    // Generate per-kappa example pools once; both rosters score them.
    let mut per_kappa: Vec<(f64, Vec<Logit>, f64, Option<f64>)> = Vec::new();
    for &kappa in &spec.kappas {
        let results = parallel_map(&jobs, cfg.workers, |_, &(src, target)| {
            let acfg = AttackConfig {
                family: AttackFamily::CwL2,
                target: TargetSpec::Targeted(target),
                kappa,
                c_init: spec.c_init,
                c_steps: spec.c_steps,
                max_iters: spec.max_iters,
                inner_lr: spec.inner_lr,
                seed: spec.seed,
                ..AttackConfig::default()
            };
            cw_l2(&model, &splits.evaluation.images[src], &acfg).map_err(Into::into)
        })?;
        let successes: Vec<&AttackResult> = results.iter().filter(|r| r.success).collect();
        let mut logits = Vec::with_capacity(successes.len());
        for r in &successes {
            logits.push(model.logits(&r.adversarial)?);
        }
        let mean_l2 = if successes.is_empty() {
            None
        } else {
            Some(successes.iter().map(|r| r.noise.l2).sum::<f64>() / successes.len() as f64)
        };
        per_kappa.push((
            kappa,
            logits,
            successes.len() as f64 / results.len() as f64,
            mean_l2,
        ));
    }

    // Optional countermeasure: retrain the roster on high-confidence
    // training examples and score the same pools again.
    let mut retrained_units = None;
    let retrained = match spec.retrain_kappa {
        Some(kappa) => {
            let (benign, adversarial, _) = detector_material(
                cfg,
                paths,
                &splits.detector_pool,
                &cfg.detectors.train_attack_names,
                Some((&model, kappa, spec.seed)),
            )?;
            if adversarial.is_empty() {
                bail!("retraining at kappa {kappa} produced no successful attacks");
            }
            let samples = build_training_set(&model, &benign, &adversarial)?;
            let (roster, units) = train_roster(cfg, &samples, model.num_classes())?;
            retrained_units = Some(units);
            Some(roster)
        }
        None => None,
    };

    let (benign_logits, _) = benign_eval_logits(cfg, &model, &splits.evaluation)?;
    let base_far = far_under_roster(&base_roster, &cfg.evaluation.policies, &benign_logits)?;
    let retrained_far = retrained
        .as_ref()
        .map(|r| far_under_roster(r, &cfg.evaluation.policies, &benign_logits))
        .transpose()?;

    let mut rows = Vec::new();
    for (kappa, logits, success_rate, mean_l2) in &per_kappa {
        rows.push(KappaRow {
            kappa: *kappa,
            attack_success_rate: *success_rate,
            mean_l2: *mean_l2,
            base_tar: tar_under_roster(&base_roster, &cfg.evaluation.policies, logits)?,
            retrained_tar: retrained
                .as_ref()
                .map(|r| tar_under_roster(r, &cfg.evaluation.policies, logits))
                .transpose()?,
        });
    }

    let artifact = KappaArtifact {
        config_hash: cfg.hash(),
        rows,
        base_far,
        retrained_far,
        retrain_kappa: spec.retrain_kappa,
        retrained_units,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&paths.kappa_json(), &artifact)?;
    Ok(artifact)
}

fn far_under_roster(
    roster: &DetectorRoster,
    policies: &[Policy],
    benign: &[Logit],
) -> Result<BTreeMap<String, f64>> {
    tar_under_roster(roster, policies, benign)
}

// ---------------------------------------------------------------------------
// Stage: stats

#[derive(Debug, Serialize, Deserialize)]
pub struct StatsArtifact {
    pub config_hash: u64,
    pub sets: BTreeMap<String, LogitStatsSummary>,
    pub seconds: f64,
}

pub fn stage_stats(cfg: &ExperimentConfig, paths: &Paths) -> Result<StatsArtifact> {
    let start = Instant::now();
    let model = load_victim_checked(cfg, paths)?;
    let splits = load_splits(cfg)?;
    let (benign, _) = benign_eval_logits(cfg, &model, &splits.evaluation)?;

    let mut sets = BTreeMap::new();
    sets.insert(
        "benign".to_string(),
        LogitStatsSummary::from(&logit_stats(&benign)?),
    );
    for (name, logits) in eval_adversarial_logits(cfg, paths, &model)? {
        if !logits.is_empty() {
            sets.insert(name, LogitStatsSummary::from(&logit_stats(&logits)?));
        }
    }

    let artifact = StatsArtifact {
        config_hash: cfg.hash(),
        sets,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&paths.stats_json(), &artifact)?;
    Ok(artifact)
}

// ---------------------------------------------------------------------------
// Full pipeline

#[derive(Debug, Serialize, Deserialize)]
pub struct RunState {
    pub status: String,
    pub config_hash: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: u64,
    pub dataset_name: String,
    pub dataset_checksum: u64,
    pub seeds: BTreeMap<String, u64>,
    pub stage_seconds: BTreeMap<String, f64>,
    pub sample_ids: SampleIdAudit,
    pub victim_train_accuracy: f64,
    pub victim_test_accuracy: f64,
    pub attacks: AttacksReportSection,
    pub detector_units: Vec<UnitReportBrief>,
    pub metrics: MetricsReport,
    pub adaptive: Option<AdaptiveArtifact>,
    pub kappa_sweep: Option<KappaArtifact>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleIdAudit {
    pub victim_train: Vec<u64>,
    pub evaluation: Vec<u64>,
    pub detector_pool: Vec<u64>,
    pub detector_benign_sources: Vec<u64>,
    pub benign_eval: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttacksReportSection {
    pub train: Vec<AttackSummary>,
    pub eval: Vec<AttackSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UnitReportBrief {
    pub unit: String,
    pub holdout_auc: f64,
}

/// Runs every stage in order and assembles the full report. Any stage
/// failure aborts with the stage name in the error chain.
pub fn run_pipeline(cfg: &ExperimentConfig, paths: &Paths) -> Result<ExperimentReport> {
    fs::create_dir_all(&paths.out)?;
    write_json(
        &paths.state_json(),
        &RunState {
            status: "running".into(),
            config_hash: cfg.hash(),
        },
    )?;

    let mut stage_seconds = BTreeMap::new();

    let victim = stage_train_victim(cfg, paths).context("stage train-victim")?;
    stage_seconds.insert("train-victim".to_string(), victim.seconds);

    let attacks = stage_gen_attacks(cfg, paths).context("stage gen-attacks")?;
    let attack_secs: f64 = attacks
        .train
        .iter()
        .chain(&attacks.eval)
        .map(|s| s.seconds)
        .sum();
    stage_seconds.insert("gen-attacks".to_string(), attack_secs);

    let detectors = stage_train_detectors(cfg, paths).context("stage train-detectors")?;
    stage_seconds.insert("train-detectors".to_string(), detectors.seconds);

    let metrics = stage_evaluate(cfg, paths).context("stage evaluate")?;
    let eval_meta: EvalMeta = read_json(&paths.eval_meta_json())?;
    stage_seconds.insert("evaluate".to_string(), eval_meta.seconds);

    let stats = stage_stats(cfg, paths).context("stage stats")?;
    stage_seconds.insert("stats".to_string(), stats.seconds);

    let adaptive = if cfg.adaptive.enabled {
        let a = stage_adaptive(cfg, paths).context("stage adaptive")?;
        stage_seconds.insert("adaptive".to_string(), a.seconds);
        Some(a)
    } else {
        None
    };

    let kappa_sweep = if cfg.kappa_sweep.enabled {
        let k = stage_kappa_sweep(cfg, paths).context("stage kappa-sweep")?;
        stage_seconds.insert("kappa-sweep".to_string(), k.seconds);
        Some(k)
    } else {
        None
    };

    let report = ExperimentReport {
        config_hash: cfg.hash(),
        dataset_name: victim.dataset_name.clone(),
        dataset_checksum: victim.dataset_checksum,
        seeds: cfg.seeds(),
        stage_seconds,
        sample_ids: SampleIdAudit {
            victim_train: victim.victim_train_ids,
            evaluation: victim.evaluation_ids,
            detector_pool: victim.detector_pool_ids,
            detector_benign_sources: detectors.benign_source_ids,
            benign_eval: eval_meta.benign_ids,
        },
        victim_train_accuracy: victim.train_accuracy,
        victim_test_accuracy: victim.test_accuracy,
        attacks: AttacksReportSection {
            train: attacks.train,
            eval: attacks.eval,
        },
        detector_units: detectors
            .units
            .iter()
            .map(|u| UnitReportBrief {
                unit: u.unit.clone(),
                holdout_auc: u.holdout_auc,
            })
            .collect(),
        metrics,
        adaptive,
        kappa_sweep,
    };
    write_json(&paths.report_json(), &report)?;
    write_json(
        &paths.state_json(),
        &RunState {
            status: "complete".into(),
            config_hash: cfg.hash(),
        },
    )?;
    Ok(report)
}
