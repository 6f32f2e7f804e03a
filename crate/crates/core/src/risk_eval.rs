//! Benchmark risk: how often a detector boundary missing from the human set
//! is perceived as stronger than a human boundary.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label_model::{PixelId, SetTag, Source};
use crate::strength_inference::StrengthField;
use crate::trial_engine::{Choice, ResponseRecord, TrialRecord};

/// Threshold list used by default when sweeping subsets.
pub const DEFAULT_TAUS: [f64; 4] = [0.2, 0.5, 0.8, 1.0];

#[derive(Debug, Error, PartialEq)]
pub enum RiskError {
    #[error("no valid trials to estimate risk from")]
    NoData,
    #[error("response references unknown trial {0}")]
    UnknownTrial(String),
    #[error("subject {subject} answered trial {trial} more than once")]
    DuplicateResponse { subject: String, trial: String },
    #[error("duplicate trial id {0}")]
    DuplicateTrial(String),
    #[error("thresholds must be sorted ascending")]
    UnsortedTaus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    ModeVote,
    PerSubjectMean,
}

/// Outcome of a majority vote over forced choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Majority<T> {
    Winner(T),
    Tie,
}

/// Most frequent choice; an exact tie for first place is reported as such.
///
/// # Panics
/// On an empty list.
pub fn majority_choice<T: Copy + Eq + std::hash::Hash + Ord>(choices: &[T]) -> Majority<T> {
    assert!(!choices.is_empty(), "majority of an empty panel");
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for &c in choices {
        *counts.entry(c).or_default() += 1;
    }
    let top = *counts.values().max().expect("nonempty");
    let mut leaders = counts.iter().filter(|(_, &n)| n == top);
    let first = *leaders.next().expect("nonempty").0;
    if leaders.next().is_some() {
        Majority::Tie
    } else {
        Majority::Winner(first)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRisk {
    pub risk: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRisk {
    pub risk: f64,
    pub n_trials: usize,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub format_version: u32,
    /// Which human set the trials sampled from (full set, orphans, subset).
    pub human_sets: Vec<SetTag>,
    pub per_subject: BTreeMap<String, SubjectRisk>,
    pub pooled: PooledRisk,
    pub excluded_trials: usize,
}

/// Which side of a trial a response favoured.
fn chosen_source(trial: &TrialRecord, choice: Choice) -> Source {
    match (choice, trial.left) {
        (Choice::LeftStronger, left) => left,
        (Choice::RightStronger, Source::Human) => Source::Algorithm,
        (Choice::RightStronger, Source::Algorithm) => Source::Human,
    }
}

/// Mean taken relative to the first value, exact when all values agree.
fn shifted_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = values.clone();
    let Some(first) = it.next() else { return f64::NAN };
    let n = values.count() as f64;
    first + it.map(|v| v - first).sum::<f64>() / n
}

fn ratio(hits: usize, n: usize) -> f64 {
    hits as f64 / n as f64
}

/// Forced-choice risk estimate.
///
/// Per subject: fraction of their trials where the algorithm segment was
/// picked. Mode vote: fraction of trials whose majority picks the algorithm
/// segment, tied trials excluded. Per-subject mean: unweighted mean of the
/// per-subject risks.
pub fn estimate_risk(
    trials: &[TrialRecord],
    responses: &[ResponseRecord],
    pooling: Pooling,
) -> Result<RiskReport, RiskError> {
    let mut by_id: HashMap<&str, &TrialRecord> = HashMap::with_capacity(trials.len());
    for t in trials {
        if by_id.insert(t.trial_id.as_str(), t).is_some() {
            return Err(RiskError::DuplicateTrial(t.trial_id.clone()));
        }
    }

    let mut seen: HashSet<(&str, &str)> = HashSet::with_capacity(responses.len());
    let mut per_subject: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut per_trial: BTreeMap<&str, Vec<Source>> = BTreeMap::new();
    for r in responses {
        let trial = by_id
            .get(r.trial_id.as_str())
            .ok_or_else(|| RiskError::UnknownTrial(r.trial_id.clone()))?;
        if !seen.insert((r.subject_id.as_str(), r.trial_id.as_str())) {
            return Err(RiskError::DuplicateResponse {
                subject: r.subject_id.clone(),
                trial: r.trial_id.clone(),
            });
        }
        let picked = chosen_source(trial, r.choice);
        let entry = per_subject.entry(r.subject_id.clone()).or_default();
        entry.0 += usize::from(picked == Source::Algorithm);
        entry.1 += 1;
        per_trial.entry(trial.trial_id.as_str()).or_default().push(picked);
    }
    if per_trial.is_empty() {
        return Err(RiskError::NoData);
    }

    let per_subject: BTreeMap<String, SubjectRisk> = per_subject
        .into_iter()
        .map(|(s, (hits, n))| (s, SubjectRisk { risk: ratio(hits, n), n_trials: n }))
        .collect();

    let mut excluded = 0;
    let mut algo_wins = 0;
    let mut decided = 0;
    for votes in per_trial.values() {
        match majority_choice(votes) {
            Majority::Tie => excluded += 1,
            Majority::Winner(s) => {
                decided += 1;
                algo_wins += usize::from(s == Source::Algorithm);
            }
        }
    }

    let pooled = match pooling {
        Pooling::ModeVote => {
            if decided == 0 {
                return Err(RiskError::NoData);
            }
            PooledRisk { risk: ratio(algo_wins, decided), n_trials: decided, pooling }
        }
        Pooling::PerSubjectMean => PooledRisk {
            risk: shifted_mean(per_subject.values().map(|s| s.risk)),
            n_trials: per_subject.values().map(|s| s.n_trials).sum(),
            pooling,
        },
    };

    let answered: BTreeSet<&str> = per_trial.keys().copied().collect();
    let human_sets: BTreeSet<SetTag> = trials
        .iter()
        .filter(|t| answered.contains(t.trial_id.as_str()))
        .map(|t| t.human_set)
        .collect();

    Ok(RiskReport {
        format_version: crate::label_model::FORMAT_VERSION,
        human_sets: human_sets.into_iter().collect(),
        per_subject,
        pooled,
        excluded_trials: excluded,
    })
}

/// `P(x_s < x_a)` over the full cross product, ties counted as one half.
pub fn true_strength_risk(set_s: &[f64], set_a: &[f64]) -> Result<f64, RiskError> {
    if set_s.is_empty() || set_a.is_empty() {
        return Err(RiskError::NoData);
    }
    let mut a = set_a.to_vec();
    a.sort_by(f64::total_cmp);
    // twice the count of (s < a) pairs plus the tied pairs
    let mut doubled: u128 = 0;
    for &s in set_s {
        let below_or_eq = a.partition_point(|&v| v <= s);
        let below = a.partition_point(|&v| v < s);
        let above = a.len() - below_or_eq;
        let ties = below_or_eq - below;
        doubled += 2 * above as u128 + ties as u128;
    }
    let total = 2 * set_s.len() as u128 * set_a.len() as u128;
    Ok(doubled as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSubset {
    pub tau: f64,
    pub pixel_ids: Vec<PixelId>,
    pub utility: usize,
}

/// Pixels whose strength is at least `tau`.
pub fn build_subset(strengths: &StrengthField, tau: f64) -> ThresholdSubset {
    let pixel_ids: Vec<PixelId> = strengths.iter().filter(|&(_, x)| x >= tau).map(|(i, _)| i).collect();
    ThresholdSubset { tau, utility: pixel_ids.len(), pixel_ids }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub tau: f64,
    pub utility: usize,
    /// `None` when the subset is empty.
    pub risk: Option<f64>,
}

/// Utility and strength-ordering risk of each threshold subset.
///
/// Risk here is [`true_strength_risk`] of the members' strengths in
/// `member_strengths` (usually the same field, or ground truth in
/// simulation) against the algorithm-side strengths.
pub fn risk_utility_curve(
    strengths: &StrengthField,
    taus: &[f64],
    a_strengths: &[f64],
) -> Result<Vec<CurveRow>, RiskError> {
    risk_utility_curve_with(strengths, strengths, taus, a_strengths)
}

/// As [`risk_utility_curve`], selecting members by `selection` but scoring
/// them with `member_strengths`.
pub fn risk_utility_curve_with(
    selection: &StrengthField,
    member_strengths: &StrengthField,
    taus: &[f64],
    a_strengths: &[f64],
) -> Result<Vec<CurveRow>, RiskError> {
    if taus.windows(2).any(|w| w[0] > w[1]) {
        return Err(RiskError::UnsortedTaus);
    }
    if a_strengths.is_empty() {
        return Err(RiskError::NoData);
    }
    taus.iter()
        .map(|&tau| {
            let subset = build_subset(selection, tau);
            let members: Vec<f64> = subset
                .pixel_ids
                .iter()
                .filter_map(|&id| member_strengths.get(id))
                .collect();
            let risk = if members.is_empty() {
                None
            } else {
                Some(true_strength_risk(&members, a_strengths)?)
            };
            Ok(CurveRow { tau, utility: subset.utility, risk })
        })
        .collect()
}

/// CSV with header `tau,utility,risk`; empty subsets leave risk blank.
pub fn curve_to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("tau,utility,risk\n");
    for r in rows {
        let risk = r.risk.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.tau, r.utility, risk));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
    enum Ab {
        A,
        B,
    }

    #[test]
    fn majority_examples() {
        use Ab::*;
        assert_eq!(majority_choice(&[A, A, B, A, B]), Majority::Winner(A));
        assert_eq!(majority_choice(&[A]), Majority::Winner(A));
        assert_eq!(majority_choice(&[A, B]), Majority::Tie);
    }

    #[test]
    fn strength_risk_examples() {
        assert_eq!(true_strength_risk(&[0.9, 0.9], &[0.1, 0.1, 0.1]).unwrap(), 0.0);
        let s = [0.1, 0.4, 0.4, 0.9];
        assert_eq!(true_strength_risk(&s, &s).unwrap(), 0.5);
        assert_eq!(true_strength_risk(&[0.2, 0.6], &[0.4]).unwrap(), 0.5);
        assert_eq!(true_strength_risk(&[], &[0.4]), Err(RiskError::NoData));
    }

    #[test]
    fn subset_thresholds() {
        let f = StrengthField([(0, 0.3), (1, 0.8)].into_iter().collect());
        assert_eq!(build_subset(&f, 0.0).utility, 2);
        assert_eq!(build_subset(&f, 1.0 + 1e-9).utility, 0);
        let s = build_subset(&f, 0.5);
        assert_eq!(s.pixel_ids, vec![1]);
        assert_eq!(s.utility, 1);
    }

    #[test]
    fn curve_ends() {
        let f = StrengthField([(0, 0.3), (1, 0.8), (2, 1.0)].into_iter().collect());
        let rows = risk_utility_curve(&f, &[0.0, 1.5], &[0.5]).unwrap();
        assert_eq!(rows[0].utility, 3);
        assert_eq!(rows[1].utility, 0);
        assert_eq!(rows[1].risk, None);
        assert_eq!(
            risk_utility_curve(&f, &[0.5, 0.2], &[0.5]),
            Err(RiskError::UnsortedTaus)
        );
        let csv = curve_to_csv(&rows);
        assert!(csv.starts_with("tau,utility,risk\n0,3,"));
        assert!(csv.ends_with("1.5,0,\n"));
    }
}
