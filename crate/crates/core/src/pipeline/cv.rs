//! Stratified k-fold planning with a per-fold validation hold-out.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_VAL_FRACTION: f64 = 1.0 / 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub subject: String,
    pub folds: usize,
    /// Fold of each trial, indexed like the subject's trials.
    pub fold_assignments: Vec<usize>,
    pub val_fraction: f64,
    pub seed: u64,
}

/// Trial indices of one fold. The three sets are disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
}

fn by_class(labels: &[u8], idx: impl IntoIterator<Item = usize>) -> BTreeMap<u8, Vec<usize>> {
    let mut m: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for i in idx {
        m.entry(labels[i]).or_default().push(i);
    }
    m
}

/// Assigns each trial to one of `folds` folds, class by class, so every fold
/// gets an equal share of each class (±1 trial).
pub fn plan_cv(subject: &str, labels: &[u8], folds: usize, val_fraction: f64, seed: u64) -> Result<CvPlan> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let classes = by_class(labels, 0..labels.len());
    if let Some((c, v)) = classes.iter().find(|(_, v)| v.len() < folds) {
        return Err(Error::invalid(format!(
            "class {c} has {} trials, fewer than {folds} folds",
            v.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    // Rotating the starting fold per class spreads the remainders evenly.
    let mut start = 0;
    for idx in classes.values() {
        let mut idx = idx.clone();
        shuffle(&mut idx, &mut rng);
        for (k, &i) in idx.iter().enumerate() {
            assignment[i] = (start + k) % folds;
        }
        start = (start + idx.len()) % folds;
    }
    Ok(CvPlan {
        subject: subject.to_string(),
        folds,
        fold_assignments: assignment,
        val_fraction,
        seed,
    })
}

impl CvPlan {
    /// Train/val/test indices of `fold`. The validation subset is drawn per
    /// fold, stratified by class, from the training folds.
    pub fn split(&self, fold: usize, labels: &[u8]) -> Result<FoldSplit> {
        if fold >= self.folds {
            return Err(Error::invalid(format!("fold {fold} out of range for {} folds", self.folds)));
        }
        if labels.len() != self.fold_assignments.len() {
            return Err(Error::invalid("labels do not match the plan"));
        }
        let test: Vec<usize> = (0..labels.len()).filter(|&i| self.fold_assignments[i] == fold).collect();
        if test.is_empty() {
            return Err(Error::invalid(format!("fold {fold} is empty")));
        }
        let pool = (0..labels.len()).filter(|&i| self.fold_assignments[i] != fold);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + fold as u64);
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut carry = 0.0;
        for idx in by_class(labels, pool).into_values() {
            let mut idx = idx;
            shuffle(&mut idx, &mut rng);
            // Fractional remainders carry over between classes so the total
            // matches round(n * val_fraction).
            let exact = idx.len() as f64 * self.val_fraction + carry;
            let take = (exact.round() as usize).min(idx.len().saturating_sub(1));
            carry = exact - take as f64;
            val.extend_from_slice(&idx[..take]);
            train.extend_from_slice(&idx[take..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        let split = FoldSplit { fold, train, val, test };
        split.assert_disjoint()?;
        Ok(split)
    }
}

impl FoldSplit {
    /// Fails if any trial id appears in both train∪val and test, or in both
    /// train and val.
    pub fn assert_disjoint(&self) -> Result<()> {
        let test: HashSet<usize> = self.test.iter().copied().collect();
        let train: HashSet<usize> = self.train.iter().copied().collect();
        if let Some(i) = self.train.iter().chain(&self.val).find(|i| test.contains(i)) {
            return Err(Error::invalid(format!("fold {}: trial {i} leaks into the test set", self.fold)));
        }
        if let Some(i) = self.val.iter().find(|i| train.contains(i)) {
            return Err(Error::invalid(format!("fold {}: trial {i} is in train and val", self.fold)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn balanced(classes: u8, per: usize) -> Vec<u8> {
        (0..classes).flat_map(|c| std::iter::repeat(c).take(per)).collect()
    }

    #[test]
    fn full_scale_folds_hold_20_per_class() {
        let labels = balanced(26, 100);
        let plan = plan_cv("s", &labels, 5, DEFAULT_VAL_FRACTION, 0).unwrap();
        for f in 0..5 {
            let split = plan.split(f, &labels).unwrap();
            assert_eq!(split.test.len(), 520);
            let counts = by_class(&labels, split.test.iter().copied());
            assert!(counts.values().all(|v| v.len() == 20));
            assert_eq!(split.val.len(), 260);
            assert_eq!(split.train.len() + split.val.len(), 2080);
        }
    }

    #[test]
    fn too_few_trials_per_class_is_rejected() {
        let labels = balanced(3, 4);
        assert!(plan_cv("s", &labels, 5, 0.125, 0).is_err());
    }

    #[test]
    fn same_seed_same_plan() {
        let labels = balanced(4, 9);
        let a = plan_cv("s", &labels, 5, 0.125, 3).unwrap();
        let b = plan_cv("s", &labels, 5, 0.125, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.split(2, &labels).unwrap(), b.split(2, &labels).unwrap());
    }

    #[test]
    fn leakage_is_detected() {
        let bad = FoldSplit {
            fold: 0,
            train: vec![1, 2],
            val: vec![3],
            test: vec![2, 4],
        };
        assert!(bad.assert_disjoint().is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_and_stay_stratified(
            classes in 2u8..8,
            per in 5usize..23,
            folds in 2usize..6,
            seed in any::<u64>(),
        ) {
            let labels = balanced(classes, per);
            let plan = plan_cv("s", &labels, folds, 0.125, seed).unwrap();
            let mut seen = vec![0; labels.len()];
            for f in 0..folds {
                let split = plan.split(f, &labels).unwrap();
                for &i in &split.test {
                    seen[i] += 1;
                }
                prop_assert_eq!(split.train.len() + split.val.len() + split.test.len(), labels.len());
                let uniform = split.test.len() as f64 / classes as f64;
                for v in by_class(&labels, split.test.iter().copied()).values() {
                    prop_assert!((v.len() as f64 - uniform).abs() <= 2.0);
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
