//! Ranking metrics and multi-seed aggregation.
//!
//! The positive class is DSAT throughout: scores are DSAT probabilities and
//! `true` labels mark DSAT sessions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Label, Session};
use crate::error::{Error, Result};
use crate::model::{HeadId, Model};
use crate::params::ParamSet;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    Ok(())
}

/// Area under the ROC curve via the rank-sum statistic, ties credited 0.5.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC-ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (1-based, tie-averaged) ranks of the positives, kept doubled so
    // it stays an integer.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        // Average rank of the group is (i+1 + j+1) / 2.
        rank_sum_x2 += pos_in_group * (i as u128 + j as u128 + 2);
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // U = rank_sum - p(p+1)/2, doubled.
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * p * n) as f64)
}

/// Area under the precision-recall step curve. Thresholds sweep from the
/// highest score down; tied scores form a single threshold.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUC-PR needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    InDomain,
    OutOfDomain,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::InDomain => "in_domain",
            Split::OutOfDomain => "out_of_domain",
            Split::Validation => "validation",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_domain" => Ok(Split::InDomain),
            "out_of_domain" => Ok(Split::OutOfDomain),
            "validation" => Ok(Split::Validation),
            o => Err(Error::Format(format!("unknown split `{o}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub n_labeled: usize,
    pub seed: u64,
    pub split: Split,
    pub auc_roc: f64,
    pub auc_pr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub method: String,
    pub n_labeled: usize,
    pub split: Split,
    pub auc_roc_mean: f64,
    pub auc_roc_std: f64,
    pub auc_pr_mean: f64,
    pub auc_pr_std: f64,
    pub seeds: usize,
}

/// DSAT labels of labeled sessions.
pub fn dsat_labels(sessions: &[Session]) -> Result<Vec<bool>> {
    sessions
        .iter()
        .map(|s| match s.label {
            Some(l) => Ok(l == Label::Dsat),
            None => Err(Error::Contract("evaluation needs labeled sessions".into())),
        })
        .collect()
}

/// DSAT probabilities for `sessions` from `head`.
pub fn score(
    model: &Model,
    params: &ParamSet,
    sessions: &[Session],
    head: HeadId,
) -> Result<Vec<f64>> {
    Ok(model
        .predict(params, sessions, head)?
        .into_iter()
        .map(|x| 1.0 / (1.0 + (-x).exp()))
        .collect())
}

/// Identifies the run an evaluation belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunKey {
    pub method: String,
    pub n_labeled: usize,
    pub seed: u64,
}

/// Scores every split with `head` and emits one record per split.
pub fn evaluate(
    model: &Model,
    params: &ParamSet,
    splits: &[(Split, &[Session])],
    head: HeadId,
    run: &RunKey,
) -> Result<Vec<EvalRecord>> {
    splits
        .iter()
        .map(|(split, sessions)| {
            let labels = dsat_labels(sessions)?;
            let scores = score(model, params, sessions, head)?;
            Ok(EvalRecord {
                method: run.method.clone(),
                n_labeled: run.n_labeled,
                seed: run.seed,
                split: *split,
                auc_roc: auc_roc(&scores, &labels)?,
                auc_pr: auc_pr(&scores, &labels)?,
            })
        })
        .collect()
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups by `(method, n_labeled, split)`, sorted by that key.
pub fn aggregate(records: &[EvalRecord]) -> Vec<AggregateRecord> {
    let mut groups: BTreeMap<(String, usize, Split), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method.clone(), r.n_labeled, r.split))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, n_labeled, split), rs)| {
            let roc: Vec<f64> = rs.iter().map(|r| r.auc_roc).collect();
            let pr: Vec<f64> = rs.iter().map(|r| r.auc_pr).collect();
            let (auc_roc_mean, auc_roc_std) = mean_std(&roc);
            let (auc_pr_mean, auc_pr_std) = mean_std(&pr);
            AggregateRecord {
                method,
                n_labeled,
                split,
                auc_roc_mean,
                auc_roc_std,
                auc_pr_mean,
                auc_pr_std,
                seeds: rs.len(),
            }
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod oracle {
    /// Pairwise AUC-ROC, O(n²).
    pub fn pairwise_auc_roc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
        credit / pairs
    }

    /// Precision-recall area by evaluating every distinct threshold from scratch.
    pub fn threshold_auc_pr(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for t in thresholds {
            let mut tp = 0.0;
            let mut predicted = 0.0;
            for (s, &l) in scores.iter().zip(labels) {
                if *s >= t {
                    predicted += 1.0;
                    if l {
                        tp += 1.0;
                    }
                }
            }
            let recall = tp / pos;
            area += (recall - prev_recall) * (tp / predicted);
            prev_recall = recall;
        }
        area
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
        // Coarse scores so ties are common.
        let scores = (0..n)
            .map(|_| f64::from(rng.gen_range(0..12)) / 4.0)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        (scores, labels)
    }

    #[test]
    fn roc_hand_cases() {
        assert_eq!(auc_roc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc_roc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(
            auc_roc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pr_hand_cases() {
        assert_eq!(auc_pr(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let labels: Vec<bool> = (0..10).map(|i| i < 3).collect();
        assert!((auc_pr(&[0.4; 10], &labels).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(
            auc_pr(&[0.1, 0.2], &[false, false]),
            Err(Error::UndefinedMetric(_))
        ));
        // Ranked pos, neg, pos: 1·½ + ⅔·½.
        let v = auc_pr(&[0.9, 0.5, 0.2], &[true, false, true]).unwrap();
        assert!((v - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn fifty_point_instances_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..50 {
            let (s, l) = random_instance(&mut rng, 50);
            assert!((auc_roc(&s, &l).unwrap() - pairwise_auc_roc(&s, &l)).abs() < 1e-12);
            assert!((auc_pr(&s, &l).unwrap() - threshold_auc_pr(&s, &l)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_scorer_gives_prevalence_and_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [2usize, 7, 40] {
            let (_, l) = random_instance(&mut rng, n);
            let s = vec![0.25; n];
            let prev = l.iter().filter(|&&x| x).count() as f64 / n as f64;
            assert_eq!(auc_pr(&s, &l).unwrap(), prev);
            assert_eq!(auc_roc(&s, &l).unwrap(), 0.5);
        }
    }

    #[test]
    fn aggregate_hand_cases() {
        let rec = |seed, split, v| EvalRecord {
            method: "m".into(),
            n_labeled: 64,
            seed,
            split,
            auc_roc: v,
            auc_pr: v,
        };
        let four: Vec<_> = (0..4).map(|s| rec(s, Split::InDomain, 0.6)).collect();
        let a = aggregate(&four);
        assert_eq!(a.len(), 1);
        assert!((a[0].auc_pr_mean - 0.6).abs() < 1e-15);
        assert!(a[0].auc_pr_std.abs() < 1e-15);
        assert_eq!(a[0].seeds, 4);

        let two = vec![
            rec(0, Split::InDomain, 0.5),
            rec(1, Split::InDomain, 0.7),
            rec(0, Split::OutOfDomain, 0.9),
        ];
        let a = aggregate(&two);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].split, Split::InDomain);
        assert!((a[0].auc_roc_mean - 0.6).abs() < 1e-12);
        assert!((a[0].auc_roc_std - 0.1).abs() < 1e-12);
        assert_eq!(a[1].split, Split::OutOfDomain);
        assert_eq!(a[1].seeds, 1);
    }

    proptest! {
        #[test]
        fn roc_invariant_under_monotone_transform(seed in 0u64..1000, n in 2usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, l) = random_instance(&mut rng, n);
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
            prop_assert_eq!(auc_roc(&s, &l).unwrap(), auc_roc(&t, &l).unwrap());
        }

        #[test]
        fn label_flip_complements_roc(seed in 0u64..1000, n in 2usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, l) = random_instance(&mut rng, n);
            let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
            let a = auc_roc(&s, &l).unwrap();
            let b = auc_roc(&s, &flipped).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn metrics_match_oracles(seed in 0u64..10_000, n in 2usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, l) = random_instance(&mut rng, n);
            prop_assert!((auc_roc(&s, &l).unwrap() - pairwise_auc_roc(&s, &l)).abs() < 1e-12);
            prop_assert!((auc_pr(&s, &l).unwrap() - threshold_auc_pr(&s, &l)).abs() < 1e-12);
        }
    }
}
