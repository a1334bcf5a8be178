use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::session::Session;
use crate::error::{Error, Result};

/// Labeled evaluation partitions plus the unlabeled pool.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<Session>,
    pub validation: Vec<Session>,
    pub test_in_domain: Vec<Session>,
    pub test_out_of_domain: Vec<Session>,
    pub unsup_train: Vec<Session>,
    pub unsup_validation: Vec<Session>,
}

fn skills(sessions: &[Session]) -> BTreeSet<&str> {
    sessions.iter().map(|s| s.skill.as_str()).collect()
}

impl DatasetSplits {
    /// Checks skill disjointness, in-domain coverage and that no unlabeled
    /// session duplicates a labeled evaluation session.
    pub fn validate(&self) -> Result<()> {
        let train = skills(&self.train);
        if let Some(s) = skills(&self.test_out_of_domain)
            .iter()
            .find(|s| train.contains(*s))
        {
            return Err(Error::Contract(format!(
                "out-of-domain skill `{s}` also appears in train"
            )));
        }
        if let Some(s) = skills(&self.test_in_domain)
            .iter()
            .find(|s| !train.contains(*s))
        {
            return Err(Error::Contract(format!(
                "in-domain skill `{s}` missing from train"
            )));
        }
        let eval: HashSet<_> = self
            .validation
            .iter()
            .chain(&self.test_in_domain)
            .chain(&self.test_out_of_domain)
            .map(Session::identity)
            .collect();
        if self
            .unsup_train
            .iter()
            .chain(&self.unsup_validation)
            .any(|s| eval.contains(&s.identity()))
        {
            return Err(Error::Contract(
                "unlabeled pool overlaps a labeled evaluation split".into(),
            ));
        }
        Ok(())
    }

    pub fn out_of_domain_skills(&self) -> BTreeSet<&str> {
        skills(&self.test_out_of_domain)
    }
}

/// Index-level description of a split; what `gen-data` writes to disk.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test_in_domain: Vec<usize>,
    pub test_out_of_domain: Vec<usize>,
    pub out_of_domain_skills: Vec<String>,
    pub unsup_train: Vec<usize>,
    pub unsup_validation: Vec<usize>,
}

impl SplitManifest {
    /// Splits `labeled` by skill and `unlabeled` 80/20, dropping unlabeled
    /// sessions identical to a labeled evaluation session.
    pub fn build(
        labeled: &[Session],
        unlabeled: &[Session],
        fractions: (f64, f64),
        out_of_domain_skill_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut m = split_indices(labeled, fractions, out_of_domain_skill_fraction, seed)?;
        if !unlabeled.is_empty() {
            let eval: HashSet<_> = m
                .validation
                .iter()
                .chain(&m.test_in_domain)
                .chain(&m.test_out_of_domain)
                .map(|&i| labeled[i].identity())
                .collect();
            let pool: Vec<usize> = (0..unlabeled.len())
                .filter(|&i| !eval.contains(&unlabeled[i].identity()))
                .collect();
            let (tr, va) = split_unsup_indices(pool, seed)?;
            m.unsup_train = tr;
            m.unsup_validation = va;
        }
        Ok(m)
    }

    pub fn materialize(&self, labeled: &[Session], unlabeled: &[Session]) -> Result<DatasetSplits> {
        let pick = |idx: &[usize], from: &[Session]| -> Result<Vec<Session>> {
            idx.iter()
                .map(|&i| {
                    from.get(i)
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("split index {i} out of range")))
                })
                .collect()
        };
        let splits = DatasetSplits {
            train: pick(&self.train, labeled)?,
            validation: pick(&self.validation, labeled)?,
            test_in_domain: pick(&self.test_in_domain, labeled)?,
            test_out_of_domain: pick(&self.test_out_of_domain, labeled)?,
            unsup_train: pick(&self.unsup_train, unlabeled)?,
            unsup_validation: pick(&self.unsup_validation, unlabeled)?,
        };
        splits.validate()?;
        Ok(splits)
    }
}

fn split_indices(
    labeled: &[Session],
    (train_frac, val_frac): (f64, f64),
    ood_frac: f64,
    seed: u64,
) -> Result<SplitManifest> {
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::Config(format!(
            "split fractions ({train_frac}, {val_frac}) must be positive and sum below 1"
        )));
    }
    if !(0.0..1.0).contains(&ood_frac) {
        return Err(Error::Config(format!(
            "out-of-domain fraction {ood_frac} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_skill: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in labeled.iter().enumerate() {
        by_skill.entry(s.skill.as_str()).or_default().push(i);
    }
    let n_skills = by_skill.len();
    let reserve = (ood_frac * n_skills as f64).round() as usize;
    if reserve == 0 || reserve >= n_skills {
        return Err(Error::Config(format!(
            "cannot reserve {reserve} of {n_skills} skills for the out-of-domain test"
        )));
    }

    // Candidates: the less frequent half of the skills (at least `reserve`).
    let mut by_freq: Vec<(&str, usize)> = by_skill.iter().map(|(k, v)| (*k, v.len())).collect();
    by_freq.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
    let pool_size = n_skills.div_ceil(2).max(reserve);
    let mut pool: Vec<&str> = by_freq[..pool_size].iter().map(|(k, _)| *k).collect();
    pool.shuffle(&mut rng);
    let ood: BTreeSet<&str> = pool.into_iter().take(reserve).collect();

    let mut test_out_of_domain = Vec::new();
    let mut first_of_skill = Vec::new();
    let mut rest = Vec::new();
    for (skill, idx) in &by_skill {
        if ood.contains(skill) {
            test_out_of_domain.extend(idx);
        } else {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            first_of_skill.push(idx[0]);
            rest.extend_from_slice(&idx[1..]);
        }
    }
    let n_in = first_of_skill.len() + rest.len();
    let n_train = ((train_frac * n_in as f64).round() as usize).max(first_of_skill.len());
    let n_val = (val_frac * n_in as f64).round() as usize;
    if n_train + n_val > n_in {
        return Err(Error::Config(
            "too few in-domain sessions for the requested split".into(),
        ));
    }
    rest.shuffle(&mut rng);
    // Every in-domain skill keeps at least one training session.
    let mut train = first_of_skill;
    let fill = n_train - train.len();
    train.extend_from_slice(&rest[..fill]);
    let validation = rest[fill..fill + n_val].to_vec();
    let test_in_domain = rest[fill + n_val..].to_vec();

    let mut m = SplitManifest {
        train,
        validation,
        test_in_domain,
        test_out_of_domain,
        out_of_domain_skills: ood.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    // Test sets of unseen in-domain skills are impossible by construction,
    // but keep the check local to the index form too.
    let train_skills: HashSet<&str> = m.train.iter().map(|&i| labeled[i].skill.as_str()).collect();
    debug_assert!(m
        .test_in_domain
        .iter()
        .all(|&i| train_skills.contains(labeled[i].skill.as_str())));
    m.train.sort_unstable();
    m.validation.sort_unstable();
    m.test_in_domain.sort_unstable();
    m.test_out_of_domain.sort_unstable();
    Ok(m)
}

/// Reserves whole low-frequency skills for the out-of-domain test and
/// splits the remaining sessions into train / validation / in-domain test.
pub fn split_by_skill(
    labeled: &[Session],
    fractions: (f64, f64),
    out_of_domain_skill_fraction: f64,
    seed: u64,
) -> Result<DatasetSplits> {
    let m = split_indices(labeled, fractions, out_of_domain_skill_fraction, seed)?;
    m.materialize(labeled, &[])
}

fn split_unsup_indices(mut idx: Vec<usize>, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if idx.is_empty() {
        return Err(Error::Config("no unlabeled sessions to split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    idx.shuffle(&mut rng);
    let n_val = idx.len() / 5;
    let val = idx.split_off(idx.len() - n_val);
    Ok((idx, val))
}

/// 80/20 random split regardless of skill; the validation share is rounded down.
pub fn split_unsup(unlabeled: &[Session], seed: u64) -> Result<(Vec<Session>, Vec<Session>)> {
    let (tr, va) = split_unsup_indices((0..unlabeled.len()).collect(), seed)?;
    Ok((
        tr.into_iter().map(|i| unlabeled[i].clone()).collect(),
        va.into_iter().map(|i| unlabeled[i].clone()).collect(),
    ))
}
