//! Experiment configuration: one JSON document drives the whole
//! pipeline. Every stage seed is explicit; nothing falls back to
//! process entropy.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use holmes_core::attacks::{AttackConfig, AttackFamily, TargetSpec, TauMode};
use holmes_core::data::fnv1a;
use holmes_core::holmes::Policy;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub victim: VictimSpec,
    /// Attacks generated from the detector pool; these feed detector
    /// training.
    pub train_attacks: Vec<AttackSpec>,
    /// Attacks generated from the evaluation split; never seen by the
    /// detectors during training.
    pub eval_attacks: Vec<AttackSpec>,
    pub detectors: DetectorsSpec,
    pub evaluation: EvaluationSpec,
    pub adaptive: AdaptiveSpec,
    pub kappa_sweep: KappaSweepSpec,
    /// Worker threads for attack generation and detector training.
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synth {
        classes: usize,
        per_class: usize,
        dims: usize,
        seed: u64,
        /// Class blob standard deviation; wider blobs keep training
        /// gradients alive, growing the victim's logit scale.
        #[serde(default = "default_blob_std")]
        blob_std: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` samples when set.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_blob_std() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fractions for victim training, evaluation, and the detector pool.
    pub fractions: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VictimSpec {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// How an attack spec picks targets for each source example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Every label except the current one (k-1 runs per source).
    AllTargets,
    /// One target per source, rotating through the wrong labels.
    RotateTarget,
    /// The attack's native untargeted form (FGSM).
    Untargeted,
    /// Run all targets and keep the minimum-noise success.
    WrapMin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub name: String,
    pub family: AttackFamily,
    pub mode: AttackMode,
    /// Number of source examples drawn from the stage's sample range.
    pub count: usize,
    pub epsilon: f64,
    pub kappa: f64,
    pub c_init: f64,
    pub c_steps: usize,
    pub max_iters: usize,
    pub inner_lr: f64,
    pub gamma: f64,
    pub theta: f64,
    pub tau_mode: TauMode,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        let base = AttackConfig::default();
        Self {
            name: "cw_l2".into(),
            family: AttackFamily::CwL2,
            mode: AttackMode::AllTargets,
            count: 100,
            epsilon: base.epsilon,
            kappa: base.kappa,
            c_init: base.c_init,
            c_steps: 5,
            max_iters: 500,
            inner_lr: 5e-2,
            gamma: base.gamma,
            theta: base.theta,
            tau_mode: base.tau_mode,
            seed: 0,
        }
    }
}

impl AttackSpec {
    pub fn to_attack_config(&self, target: TargetSpec) -> AttackConfig {
        AttackConfig {
            family: self.family,
            target,
            epsilon: self.epsilon,
            kappa: self.kappa,
            c_init: self.c_init,
            c_steps: self.c_steps,
            max_iters: self.max_iters,
            inner_lr: self.inner_lr,
            gamma: self.gamma,
            theta: self.theta,
            e_init: None,
            tau_mode: self.tau_mode,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoterSpec {
    /// One unit per class, routed by the victim's prediction, counted as
    /// a single voter.
    Dedicated,
    TopK(usize),
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorsSpec {
    pub voters: Vec<VoterSpec>,
    /// Names from `train_attacks` whose successful examples feed
    /// detector training.
    pub train_attack_names: Vec<String>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectorsSpec {
    fn default() -> Self {
        Self {
            voters: vec![VoterSpec::Dedicated, VoterSpec::TopK(9), VoterSpec::TopK(8)],
            train_attack_names: vec!["cw_l2".into(), "fgsm".into()],
            learning_rate: 0.02,
            epochs: 600,
            batch_size: 16,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSpec {
    pub policies: Vec<Policy>,
    /// Benign examples (from the evaluation split) scored for the false
    /// adversarial rate.
    pub benign_count: usize,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            policies: Policy::ALL_POLICIES.to_vec(),
            benign_count: 400,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveSpec {
    pub enabled: bool,
    /// Roster voter the attacker knows about.
    pub voter_index: usize,
    pub count: usize,
    pub c_init: f64,
    pub c_steps: usize,
    pub max_iters: usize,
    pub inner_lr: f64,
    pub e_init: Option<f64>,
    pub seed: u64,
}

impl Default for AdaptiveSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            voter_index: 1,
            count: 120,
            c_init: 1e-2,
            c_steps: 7,
            max_iters: 500,
            inner_lr: 5e-2,
            e_init: Some(0.25),
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KappaSweepSpec {
    pub enabled: bool,
    pub kappas: Vec<f64>,
    /// Source examples per confidence level.
    pub count: usize,
    /// Retrain the roster on examples generated at this confidence and
    /// re-evaluate the sweep with it.
    pub retrain_kappa: Option<f64>,
    pub c_init: f64,
    pub c_steps: usize,
    pub max_iters: usize,
    pub inner_lr: f64,
    pub seed: u64,
}

impl Default for KappaSweepSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            kappas: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
            count: 80,
            retrain_kappa: Some(12.0),
            c_init: 1e-2,
            c_steps: 6,
            max_iters: 500,
            inner_lr: 5e-2,
            seed: 23,
        }
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: [0.7, 0.15, 0.15],
            seed: 11,
        }
    }
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults on the synthetic dataset: the cross-attack
    /// protocol (train the detectors on CW-L2 + FGSM, evaluate on JSMA,
    /// CW-L0 and CW-Linf as unseen attacks) at sizes a single CPU core
    /// handles in minutes.
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Synth {
                classes: 10,
                per_class: 1000,
                dims: 64,
                seed: 3,
                blob_std: default_blob_std(),
            },
            split: SplitSpec {
                fractions: [0.7, 0.15, 0.15],
                seed: 11,
            },
            victim: VictimSpec {
                hidden: vec![64, 32],
                learning_rate: 0.25,
                epochs: 150,
                batch_size: 32,
                seed: 1,
            },
            train_attacks: vec![
                AttackSpec {
                    name: "cw_l2".into(),
                    family: AttackFamily::CwL2,
                    mode: AttackMode::AllTargets,
                    count: 700,
                    ..AttackSpec::default()
                },
                AttackSpec {
                    name: "fgsm".into(),
                    family: AttackFamily::Fgsm,
                    mode: AttackMode::Untargeted,
                    count: 700,
                    epsilon: 0.12,
                    ..AttackSpec::default()
                },
            ],
            eval_attacks: vec![
                AttackSpec {
                    name: "cw_l2".into(),
                    family: AttackFamily::CwL2,
                    mode: AttackMode::AllTargets,
                    count: 25,
                    ..AttackSpec::default()
                },
                AttackSpec {
                    name: "fgsm".into(),
                    family: AttackFamily::Fgsm,
                    mode: AttackMode::Untargeted,
                    count: 150,
                    epsilon: 0.12,
                    ..AttackSpec::default()
                },
                AttackSpec {
                    name: "jsma".into(),
                    family: AttackFamily::Jsma,
                    mode: AttackMode::AllTargets,
                    count: 25,
                    gamma: 0.15,
                    ..AttackSpec::default()
                },
                AttackSpec {
                    name: "cw_l0".into(),
                    family: AttackFamily::CwL0,
                    mode: AttackMode::RotateTarget,
                    count: 15,
                    max_iters: 250,
                    ..AttackSpec::default()
                },
                AttackSpec {
                    name: "cw_linf".into(),
                    family: AttackFamily::CwLinf,
                    mode: AttackMode::RotateTarget,
                    count: 40,
                    c_init: 0.1,
                    c_steps: 8,
                    max_iters: 300,
                    inner_lr: 1e-2,
                    ..AttackSpec::default()
                },
            ],
            detectors: DetectorsSpec::default(),
            evaluation: EvaluationSpec::default(),
            adaptive: AdaptiveSpec::default(),
            kappa_sweep: KappaSweepSpec::default(),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &std::path::Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Stable hash of the canonical JSON form; embedded in every stage
    /// artifact so stale outputs are detectable.
    pub fn hash(&self) -> u64 {
        fnv1a(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Replaces every stage seed with one derived from `seed`, keeping
    /// the run reproducible from a single number.
    pub fn override_seed(&mut self, seed: u64) {
        let derive = |tag: &str| -> u64 {
            let mut bytes = seed.to_le_bytes().to_vec();
            bytes.extend_from_slice(tag.as_bytes());
            fnv1a(&bytes)
        };
        if let DatasetSpec::Synth { seed: s, .. } = &mut self.dataset {
            *s = derive("dataset");
        }
        self.split.seed = derive("split");
        self.victim.seed = derive("victim");
        for (i, a) in self.train_attacks.iter_mut().enumerate() {
            a.seed = derive(&format!("train_attack{i}"));
        }
        for (i, a) in self.eval_attacks.iter_mut().enumerate() {
            a.seed = derive(&format!("eval_attack{i}"));
        }
        self.detectors.seed = derive("detectors");
        self.adaptive.seed = derive("adaptive");
        self.kappa_sweep.seed = derive("kappa_sweep");
    }

    /// All stage seeds, for the report.
    pub fn seeds(&self) -> std::collections::BTreeMap<String, u64> {
        let mut seeds = std::collections::BTreeMap::new();
        if let DatasetSpec::Synth { seed, .. } = &self.dataset {
            seeds.insert("dataset".into(), *seed);
        }
        seeds.insert("split".into(), self.split.seed);
        seeds.insert("victim".into(), self.victim.seed);
        for a in &self.train_attacks {
            seeds.insert(format!("train_attack/{}", a.name), a.seed);
        }
        for a in &self.eval_attacks {
            seeds.insert(format!("eval_attack/{}", a.name), a.seed);
        }
        seeds.insert("detectors".into(), self.detectors.seed);
        seeds.insert("adaptive".into(), self.adaptive.seed);
        seeds.insert("kappa_sweep".into(), self.kappa_sweep.seed);
        seeds
    }
}
