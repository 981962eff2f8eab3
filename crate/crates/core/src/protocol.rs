//! Fold construction, decision thresholds, error rates and score fusion.
//!
//! Error-rate convention (attack = positive class, predicted attack iff
//! `score > τ`):
//!
//! * FAR: fraction of attack samples accepted as real.
//! * FRR: fraction of real samples rejected as attacks.
//! * HTER: `(FAR + FRR) / 2`.
//!
//! All rates in [`EvalReport`] are percentages.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datapipe::Record;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::seed;

pub const DEFAULT_FOLDS: usize = 10;

/// Threshold applied to probability outputs of trained networks.
pub const FIXED_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// Equal-error point on development-set scores.
    #[serde(rename = "dev-eer")]
    DevEer,
    /// Equal-error point on pooled cross-validation scores.
    #[serde(rename = "cv-eer")]
    CvEer,
    #[serde(rename = "fixed-0.5")]
    Fixed,
}

impl ThresholdRule {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdRule::DevEer => "dev-eer",
            ThresholdRule::CvEer => "cv-eer",
            ThresholdRule::Fixed => "fixed-0.5",
        }
    }
}

impl fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThresholdRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev-eer" => Ok(ThresholdRule::DevEer),
            "cv-eer" => Ok(ThresholdRule::CvEer),
            "fixed-0.5" => Ok(ThresholdRule::Fixed),
            other => Err(Error::InvalidArgument(format!(
                "unknown threshold rule {other:?} (expected dev-eer, cv-eer or fixed-0.5)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub sample_id: String,
    pub group_id: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite score for sample {:?}",
                e.sample_id
            )));
        }
        Ok(Self { entries })
    }

    /// Entries whose group is their own sample id.
    pub fn from_scores(scores: impl IntoIterator<Item = (Label, f64)>) -> Result<Self> {
        Self::new(
            scores
                .into_iter()
                .enumerate()
                .map(|(i, (label, score))| ScoreEntry {
                    sample_id: i.to_string(),
                    group_id: i.to_string(),
                    label,
                    score,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: ScoreSet) {
        self.entries.extend(other.entries);
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// CSV with header `sample_id,group_id,label,score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,group_id,label,score\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(&e.sample_id),
                csv_field(&e.group_id),
                e.label,
                e.score
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Metrics at a fixed threshold. Field order is the serialized order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau: f64,
    pub acc: f64,
    pub hter: f64,
    pub far: f64,
    pub frr: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub false_accepts: usize,
    pub false_rejects: usize,
}

/// Predicted attack iff the score is strictly above `tau`.
#[inline]
pub fn predicts_fake(score: f64, tau: f64) -> bool {
    score > tau
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(scores: &ScoreSet, tau: f64) -> EvalReport {
    let mut false_accepts = 0;
    let mut false_rejects = 0;
    let n_fake = scores.count(Label::Fake);
    let n_real = scores.len() - n_fake;
    for e in &scores.entries {
        match (e.label, predicts_fake(e.score, tau)) {
            (Label::Fake, false) => false_accepts += 1,
            (Label::Real, true) => false_rejects += 1,
            _ => {}
        }
    }
    let far = 100.0 * ratio(false_accepts, n_fake);
    let frr = 100.0 * ratio(false_rejects, n_real);
    let correct = scores.len() - false_accepts - false_rejects;
    EvalReport {
        tau,
        acc: 100.0 * ratio(correct, scores.len()),
        hter: (far + frr) / 2.0,
        far,
        frr,
        n_real,
        n_fake,
        false_accepts,
        false_rejects,
    }
}

/// Threshold at the cut between adjacent distinct scores that minimizes
/// `|FAR − FRR|`; ties go to the lower threshold. With a single distinct
/// score value that value is returned.
pub fn eer_threshold(scores: &ScoreSet) -> Result<f64> {
    let n_fake = scores.count(Label::Fake);
    let n_real = scores.len() - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(Error::DegenerateLabels(format!(
            "equal error rate needs both classes ({n_real} real, {n_fake} fake)"
        )));
    }
    let mut sorted: Vec<(f64, Label)> = scores.entries.iter().map(|e| (e.score, e.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Counts of samples with score <= the current distinct value: those are
    // predicted real by any cut just above it.
    let (mut fake_below, mut real_below) = (0u64, 0u64);
    let mut best: Option<(u128, f64)> = None;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            match sorted[i].1 {
                Label::Fake => fake_below += 1,
                Label::Real => real_below += 1,
            }
            i += 1;
        }
        let Some(&(next, _)) = sorted.get(i) else {
            break;
        };
        // |FAR − FRR| scaled by n_fake · n_real stays an exact integer.
        let far = u128::from(fake_below) * n_real as u128;
        let frr = u128::from(n_real as u64 - real_below) * n_fake as u128;
        let diff = far.abs_diff(frr);
        if best.is_none_or(|(d, _)| diff < d) {
            best = Some((diff, midpoint(v, next)));
        }
    }
    Ok(best.map_or(sorted[0].0, |(_, tau)| tau))
}

/// Midpoint that always separates `lo` from `hi`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi {
        lo
    } else {
        mid
    }
}

/// One entry per group carrying the maximum member score; groups appear in
/// order of first occurrence.
pub fn fuse_max(scores: &ScoreSet) -> Result<ScoreSet> {
    let mut order: Vec<&str> = Vec::new();
    let mut fused: HashMap<&str, (Label, f64)> = HashMap::new();
    for e in &scores.entries {
        match fused.get_mut(e.group_id.as_str()) {
            Some((label, best)) => {
                if *label != e.label {
                    return Err(Error::ManifestIntegrity(format!("group {:?} mixes labels", e.group_id)));
                }
                *best = best.max(e.score);
            }
            None => {
                order.push(&e.group_id);
                fused.insert(&e.group_id, (e.label, e.score));
            }
        }
    }
    ScoreSet::new(
        order
            .into_iter()
            .map(|g| {
                let (label, score) = fused[g];
                ScoreEntry {
                    sample_id: g.to_string(),
                    group_id: g.to_string(),
                    label,
                    score,
                }
            })
            .collect(),
    )
}

pub fn select_threshold(
    rule: ThresholdRule,
    dev_scores: Option<&ScoreSet>,
    cv_scores: Option<&ScoreSet>,
) -> Result<f64> {
    match rule {
        ThresholdRule::Fixed => Ok(FIXED_THRESHOLD),
        ThresholdRule::DevEer => eer_threshold(
            dev_scores
                .ok_or_else(|| Error::InvalidArgument("dev-eer threshold needs development-set scores".into()))?,
        ),
        ThresholdRule::CvEer => eer_threshold(
            cv_scores.ok_or_else(|| Error::InvalidArgument("cv-eer threshold needs cross-validation scores".into()))?,
        ),
    }
}

/// Fold index per record, with every individual confined to one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold of record `i`, parallel to the records passed to [`make_folds`].
    pub fold_of: Vec<usize>,
    pub individual_fold: BTreeMap<String, usize>,
    /// Samples per attack type in each fold.
    pub attack_histogram: Vec<BTreeMap<String, usize>>,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Deals whole individuals to `k` folds, balancing every attack type.
///
/// Individuals are shuffled with `seed`, then taken largest first; each goes
/// to the fold where it adds the least normalized load on the attack types it
/// carries (ties: smaller fold, then lower index).
pub fn make_folds(records: &[Record], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut per_individual: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for r in records {
        *per_individual
            .entry(&r.individual_id)
            .or_default()
            .entry(&r.attack_type)
            .or_default() += 1;
    }
    if per_individual.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} individuals cannot fill {k} folds",
            per_individual.len()
        )));
    }
    let types: BTreeSet<&str> = records.iter().map(|r| r.attack_type.as_str()).collect();
    let type_index: BTreeMap<&str, usize> = types.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let mut totals = vec![0usize; types.len()];
    for r in records {
        totals[type_index[r.attack_type.as_str()]] += 1;
    }

    let mut individuals: Vec<&str> = per_individual.keys().copied().collect();
    individuals.shuffle(&mut seed::rng(seed));
    let size_of = |ind: &str| per_individual[ind].values().sum::<usize>();
    individuals.sort_by_key(|&ind| std::cmp::Reverse(size_of(ind)));

    let mut load = vec![vec![0usize; types.len()]; k];
    let mut sizes = vec![0usize; k];
    let mut individual_fold = BTreeMap::new();
    for ind in individuals {
        let counts: Vec<(usize, usize)> = per_individual[ind].iter().map(|(t, &c)| (type_index[t], c)).collect();
        let cost = |f: usize| -> f64 {
            counts
                .iter()
                .map(|&(t, c)| {
                    let total = totals[t] as f64;
                    let before = load[f][t] as f64 / total;
                    let after = (load[f][t] + c) as f64 / total;
                    after * after - before * before
                })
                .sum()
        };
        let fold = (0..k)
            .min_by(|&a, &b| {
                cost(a)
                    .total_cmp(&cost(b))
                    .then(sizes[a].cmp(&sizes[b]))
                    .then(a.cmp(&b))
            })
            .expect("k >= 2");
        for &(t, c) in &counts {
            load[fold][t] += c;
        }
        sizes[fold] += size_of(ind);
        individual_fold.insert(ind.to_string(), fold);
    }

    let fold_of = records
        .iter()
        .map(|r| individual_fold[r.individual_id.as_str()])
        .collect();
    let attack_histogram = load
        .iter()
        .map(|row| {
            types
                .iter()
                .zip(row)
                .filter(|(_, &c)| c > 0)
                .map(|(t, &c)| (t.to_string(), c))
                .collect()
        })
        .collect();
    Ok(FoldAssignment {
        k,
        fold_of,
        individual_fold,
        attack_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::Split;

    fn set(fake: &[f64], real: &[f64]) -> ScoreSet {
        ScoreSet::from_scores(
            fake.iter()
                .map(|&s| (Label::Fake, s))
                .chain(real.iter().map(|&s| (Label::Real, s))),
        )
        .unwrap()
    }

    fn records(individuals: usize, per: usize) -> Vec<Record> {
        let mut out = Vec::new();
        for i in 0..individuals {
            for j in 0..per {
                let label = if j % 2 == 0 { Label::Real } else { Label::Fake };
                out.push(Record {
                    path: format!("{i}/{j}"),
                    label,
                    individual_id: format!("ind{i}"),
                    attack_type: if label == Label::Fake { "print" } else { "none" }.into(),
                    split: Split::Train,
                    group_id: format!("{i}/{j}"),
                });
            }
        }
        out
    }

    #[test]
    fn separable_eer() {
        let s = set(&[0.8, 0.9], &[0.1, 0.2]);
        let tau = eer_threshold(&s).unwrap();
        assert!((tau - 0.5).abs() < 1e-12);
        let r = compute_metrics(&s, tau);
        assert_eq!((r.far, r.frr), (0.0, 0.0));
    }

    #[test]
    fn interleaved_eer() {
        let s = set(&[2.0, 4.0, 6.0, 8.0], &[1.0, 3.0, 5.0, 7.0]);
        let r = compute_metrics(&s, eer_threshold(&s).unwrap());
        assert_eq!((r.far, r.frr), (50.0, 50.0));
    }

    #[test]
    fn eer_single_class_is_error() {
        assert!(matches!(
            eer_threshold(&set(&[0.1, 0.2], &[])),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn eer_constant_scores() {
        let s = set(&[0.3, 0.3], &[0.3]);
        assert_eq!(eer_threshold(&s).unwrap(), 0.3);
    }

    #[test]
    fn metrics_arithmetic() {
        // 10 fake (1 accepted), 10 real (2 rejected).
        let mut fake = vec![1.0; 9];
        fake.push(-1.0);
        let mut real = vec![-1.0; 8];
        real.extend([1.0, 1.0]);
        let r = compute_metrics(&set(&fake, &real), 0.0);
        assert_eq!(r.far, 10.0);
        assert_eq!(r.frr, 20.0);
        assert_eq!(r.hter, 15.0);
        assert_eq!(r.acc, 85.0);
    }

    #[test]
    fn accuracy_nine_of_ten() {
        let mut fake = vec![1.0; 4];
        fake.push(-1.0);
        let r = compute_metrics(&set(&fake, &[-1.0; 5]), 0.0);
        assert_eq!(r.acc, 90.0);
    }

    #[test]
    fn all_below_threshold() {
        let r = compute_metrics(&set(&[0.1, 0.2], &[0.3]), 1.0);
        assert_eq!(r.far, 100.0);
        assert_eq!(r.frr, 0.0);
    }

    #[test]
    fn fusion() {
        let s = ScoreSet::new(
            [0.2, 0.7, 0.5]
                .iter()
                .enumerate()
                .map(|(i, &score)| ScoreEntry {
                    sample_id: format!("v1/{i}"),
                    group_id: "v1".into(),
                    label: Label::Fake,
                    score,
                })
                .collect(),
        )
        .unwrap();
        let fused = fuse_max(&s).unwrap();
        assert_eq!(fused.len(), 1);
        assert_eq!(fused.entries[0].score, 0.7);

        let singles = set(&[0.4], &[0.1]);
        let fused = fuse_max(&singles).unwrap();
        assert_eq!(
            fused.entries.iter().map(|e| e.score).collect::<Vec<_>>(),
            vec![0.4, 0.1]
        );

        let mut mixed = s.clone();
        mixed.entries[1].label = Label::Real;
        assert!(matches!(fuse_max(&mixed), Err(Error::ManifestIntegrity(_))));
    }

    #[test]
    fn threshold_rules() {
        let dev = set(&[0.8, 0.9], &[0.1, 0.2]);
        assert_eq!(select_threshold(ThresholdRule::Fixed, None, None).unwrap(), 0.5);
        assert_eq!(
            select_threshold(ThresholdRule::DevEer, Some(&dev), None).unwrap(),
            eer_threshold(&dev).unwrap()
        );
        let tau = select_threshold(ThresholdRule::CvEer, None, Some(&dev)).unwrap();
        assert!(tau > 0.2 && tau < 0.8);
        assert!(matches!(
            select_threshold(ThresholdRule::CvEer, Some(&dev), None),
            Err(Error::InvalidArgument(_))
        ));
        assert_eq!("fixed-0.5".parse::<ThresholdRule>().unwrap(), ThresholdRule::Fixed);
        assert_eq!(serde_json::to_string(&ThresholdRule::CvEer).unwrap(), "\"cv-eer\"");
    }

    #[test]
    fn one_individual_per_fold() {
        let recs = records(10, 4);
        let folds = make_folds(&recs, 10, 3).unwrap();
        let mut used: Vec<usize> = folds.individual_fold.values().copied().collect();
        used.sort();
        assert_eq!(used, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn two_individuals_per_fold() {
        let recs = records(20, 6);
        let folds = make_folds(&recs, 10, 11).unwrap();
        assert!(folds.fold_sizes().iter().all(|&s| s == 12));
    }

    #[test]
    fn too_few_individuals() {
        assert!(matches!(
            make_folds(&records(9, 2), 10, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(make_folds(&records(9, 2), 1, 0).is_err());
    }

    #[test]
    fn folds_deterministic() {
        let recs = records(25, 4);
        assert_eq!(make_folds(&recs, 10, 5).unwrap(), make_folds(&recs, 10, 5).unwrap());
    }

    #[test]
    fn csv_export() {
        let s = set(&[0.5], &[]);
        assert_eq!(s.to_csv(), "sample_id,group_id,label,score\n0,0,fake,0.5\n");
    }
}
