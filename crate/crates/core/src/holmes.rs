//! Vote aggregation and evaluation metrics for the detector ensemble.
//!
//! Three consensus policies turn per-voter votes into one verdict:
//! `Any` flags when any voter flags, `Major` needs a strict majority,
//! `All` needs unanimity. The flag sets are nested, so rates are always
//! ordered `Any >= Major >= All` on a fixed evaluation set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detectors::DetectorRoster;
use crate::victim::Logit;
use crate::{Error, Real, Result};

/// Consensus policy over detector votes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Any,
    Major,
    All,
}

impl Policy {
    pub const ALL_POLICIES: [Policy; 3] = [Policy::Any, Policy::Major, Policy::All];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Any => "any",
            Policy::Major => "major",
            Policy::All => "all",
        }
    }
}

/// Applies a policy to the individual votes (`true` = adversarial).
pub fn verdict(policy: Policy, votes: &[bool]) -> Result<bool> {
    if votes.is_empty() {
        return Err(Error::Argument("verdict over zero voters".into()));
    }
    let flags = votes.iter().filter(|&&v| v).count();
    Ok(match policy {
        Policy::Any => flags > 0,
        // Strictly more than half; an even split stays benign.
        Policy::Major => 2 * flags > votes.len(),
        Policy::All => flags == votes.len(),
    })
}

/// Full consensus outcome for one example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub is_adversarial: bool,
    pub votes: Vec<bool>,
    pub scores: Vec<Real>,
}

/// Runs the roster on one logit and aggregates under `policy`.
pub fn roster_verdict(roster: &DetectorRoster, policy: Policy, logit: &Logit) -> Result<Verdict> {
    let scores = roster.scores(logit)?;
    let votes = roster.votes(logit)?;
    Ok(Verdict {
        is_adversarial: verdict(policy, &votes)?,
        votes,
        scores,
    })
}

/// Area under the ROC curve by descending-threshold sweep with
/// trapezoidal integration; tied scores contribute half.
///
/// Counts stay in integers until the final division, so the result is
/// exact up to one rounding.
pub fn auc_roc(scores_benign: &[Real], scores_adversarial: &[Real]) -> Result<Real> {
    if scores_benign.is_empty() || scores_adversarial.is_empty() {
        return Err(Error::Argument("auc_roc needs both score sets".into()));
    }
    if scores_benign
        .iter()
        .chain(scores_adversarial)
        .any(|s| !s.is_finite())
    {
        return Err(Error::NonFinite("auc_roc scores".into()));
    }

    let mut events: Vec<(Real, bool)> = scores_benign
        .iter()
        .map(|&s| (s, false))
        .chain(scores_adversarial.iter().map(|&s| (s, true)))
        .collect();
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut area_twice: u128 = 0; // sum of fp_group * (2 * tp_before + tp_group)
    let mut tp_before: u128 = 0;
    let mut i = 0;
    while i < events.len() {
        let mut j = i;
        let mut tp_group: u128 = 0;
        let mut fp_group: u128 = 0;
        while j < events.len() && events[j].0 == events[i].0 {
            if events[j].1 {
                tp_group += 1;
            } else {
                fp_group += 1;
            }
            j += 1;
        }
        area_twice += fp_group * (2 * tp_before + tp_group);
        tp_before += tp_group;
        i = j;
    }

    let denom = 2 * scores_benign.len() as u128 * scores_adversarial.len() as u128;
    Ok(area_twice as Real / denom as Real)
}

/// Per-logit maxima and population variances with fixed-width histogram
/// bins (width 1 for maxima, width 5 for variances), emitted as
/// `(lower_edge, count)` pairs for external plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitStats {
    pub maxima: Vec<Real>,
    pub variances: Vec<Real>,
    pub mean_max: Real,
    pub mean_variance: Real,
    pub max_histogram: Vec<(Real, usize)>,
    pub variance_histogram: Vec<(Real, usize)>,
}

pub const MAX_BIN_WIDTH: Real = 1.0;
pub const VARIANCE_BIN_WIDTH: Real = 5.0;

fn histogram(values: &[Real], width: Real) -> Vec<(Real, usize)> {
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for &v in values {
        let idx = (v / width).floor() as i64;
        *bins.entry(idx).or_insert(0) += 1;
    }
    bins.into_iter()
        .map(|(idx, count)| (idx as Real * width, count))
        .collect()
}

/// Population variance: divide by the score count, not count - 1.
fn population_variance(scores: &[Real]) -> Real {
    let k = scores.len() as Real;
    let mean = scores.iter().sum::<Real>() / k;
    scores.iter().map(|&s| (s - mean) * (s - mean)).sum::<Real>() / k
}

pub fn logit_stats(logits: &[Logit]) -> Result<LogitStats> {
    if logits.is_empty() {
        return Err(Error::Argument("logit_stats over an empty set".into()));
    }
    let maxima: Vec<Real> = logits
        .iter()
        .map(|l| l.scores.iter().cloned().fold(Real::NEG_INFINITY, Real::max))
        .collect();
    let variances: Vec<Real> = logits
        .iter()
        .map(|l| population_variance(&l.scores))
        .collect();
    Ok(LogitStats {
        mean_max: maxima.iter().sum::<Real>() / maxima.len() as Real,
        mean_variance: variances.iter().sum::<Real>() / variances.len() as Real,
        max_histogram: histogram(&maxima, MAX_BIN_WIDTH),
        variance_histogram: histogram(&variances, VARIANCE_BIN_WIDTH),
        maxima,
        variances,
    })
}

/// Summary form of [`LogitStats`] for serialized reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitStatsSummary {
    pub count: usize,
    pub mean_max: Real,
    pub mean_variance: Real,
    pub max_histogram: Vec<(Real, usize)>,
    pub variance_histogram: Vec<(Real, usize)>,
}

impl From<&LogitStats> for LogitStatsSummary {
    fn from(s: &LogitStats) -> Self {
        Self {
            count: s.maxima.len(),
            mean_max: s.mean_max,
            mean_variance: s.mean_variance,
            max_histogram: s.max_histogram.clone(),
            variance_histogram: s.variance_histogram.clone(),
        }
    }
}

/// Metrics bundle for one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Policy name -> fraction of benign examples flagged adversarial.
    pub false_adversarial_rate: BTreeMap<String, Real>,
    /// Attack name -> policy name -> fraction of adversarial examples
    /// flagged adversarial.
    pub true_adversarial_rate: BTreeMap<String, BTreeMap<String, Real>>,
    /// Attack name -> AUC of the mean voter score against benign.
    pub auc_roc: BTreeMap<String, Real>,
    /// Set name ("benign" or attack name) -> logit statistics.
    pub logit_stats: BTreeMap<String, LogitStatsSummary>,
}

fn mean_score(scores: &[Real]) -> Real {
    scores.iter().sum::<Real>() / scores.len() as Real
}

/// Evaluates the roster on a benign set and per-attack adversarial sets.
///
/// The continuous score behind each AUC is the mean of the voter scores
/// (the dedicated voter contributes its routed unit's score), which
/// respects the roster's equal voter weighting; the policy operating
/// points land on the same ROC.
pub fn evaluate(
    roster: &DetectorRoster,
    policies: &[Policy],
    benign: &[Logit],
    adversarial_sets: &[(String, Vec<Logit>)],
) -> Result<MetricsReport> {
    if roster.num_voters() == 0 {
        return Err(Error::Argument("evaluate with an empty roster".into()));
    }
    if benign.is_empty() {
        return Err(Error::Argument("evaluate with no benign examples".into()));
    }
    if policies.is_empty() {
        return Err(Error::Argument("evaluate with no policies".into()));
    }
    for (name, set) in adversarial_sets {
        if set.is_empty() {
            return Err(Error::Argument(format!(
                "evaluate with an empty adversarial set '{name}'"
            )));
        }
    }

    let benign_votes: Vec<Vec<bool>> = benign
        .iter()
        .map(|l| roster.votes(l))
        .collect::<Result<_>>()?;
    let benign_scores: Vec<Real> = benign
        .iter()
        .map(|l| Ok(mean_score(&roster.scores(l)?)))
        .collect::<Result<_>>()?;

    let mut far = BTreeMap::new();
    for &policy in policies {
        let flagged = benign_votes
            .iter()
            .map(|v| verdict(policy, v))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|&f| f)
            .count();
        far.insert(policy.name().to_string(), flagged as Real / benign.len() as Real);
    }

    let mut tar = BTreeMap::new();
    let mut auc = BTreeMap::new();
    let mut stats = BTreeMap::new();
    stats.insert(
        "benign".to_string(),
        LogitStatsSummary::from(&logit_stats(benign)?),
    );

    for (name, set) in adversarial_sets {
        let votes: Vec<Vec<bool>> = set.iter().map(|l| roster.votes(l)).collect::<Result<_>>()?;
        let mut per_policy = BTreeMap::new();
        for &policy in policies {
            let flagged = votes
                .iter()
                .map(|v| verdict(policy, v))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|&f| f)
                .count();
            per_policy.insert(policy.name().to_string(), flagged as Real / set.len() as Real);
        }
        tar.insert(name.clone(), per_policy);

        let adv_scores: Vec<Real> = set
            .iter()
            .map(|l| Ok(mean_score(&roster.scores(l)?)))
            .collect::<Result<_>>()?;
        auc.insert(name.clone(), auc_roc(&benign_scores, &adv_scores)?);
        stats.insert(name.clone(), LogitStatsSummary::from(&logit_stats(set)?));
    }

    Ok(MetricsReport {
        false_adversarial_rate: far,
        true_adversarial_rate: tar,
        auc_roc: auc,
        logit_stats: stats,
    })
}
