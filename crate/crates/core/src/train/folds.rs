use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::hex;
use crate::error::{Error, Result};
use crate::graphdata::{Cohort, Label};
use crate::rng;

/// Fold index of every subject, in cohort order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub ids: Vec<String>,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    /// SHA-256 over `(id, fold)` pairs; equal hashes mean identical splits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        for (id, f) in self.ids.iter().zip(&self.fold_of) {
            h.update(id.as_bytes());
            h.update([0]);
            h.update((*f as u64).to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Checks that the test folds are disjoint and together cover `cohort`.
    pub fn verify_partition(&self, cohort: &Cohort) -> Result<()> {
        if self.ids.len() != cohort.len() || self.ids.iter().zip(cohort.ids()).any(|(a, b)| a != b) {
            return Err(Error::contract("fold assignment does not match the cohort"));
        }
        let mut seen = HashSet::new();
        for f in 0..self.k {
            for i in self.test_indices(f) {
                if !seen.insert(self.ids[i].as_str()) {
                    return Err(Error::contract(format!("{} is in more than one test fold", self.ids[i])));
                }
            }
        }
        if seen.len() != cohort.len() || self.fold_of.iter().any(|&f| f >= self.k) {
            return Err(Error::contract("test folds do not cover the cohort"));
        }
        Ok(())
    }
}

/// Shuffles each class with its own stream and deals it round-robin over
/// the folds.
pub fn stratified_kfold(cohort: &Cohort, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut fold_of = vec![0; cohort.len()];
    for label in [Label::Hc, Label::Ad] {
        let mut members: Vec<usize> = (0..cohort.len()).filter(|&i| cohort.subjects[i].label == label).collect();
        if members.len() < k {
            return Err(Error::contract(format!(
                "class {} has {} subjects, fewer than {k} folds",
                label.index(),
                members.len()
            )));
        }
        members.shuffle(&mut rng::stream(seed, "folds", label.index() as u64));
        for (pos, &i) in members.iter().enumerate() {
            fold_of[i] = pos % k;
        }
    }
    Ok(FoldAssignment {
        k,
        ids: cohort.ids().into_iter().map(String::from).collect(),
        fold_of,
    })
}

/// Indices into a training cohort split for early stopping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Holds out `round(fraction · n_c)` subjects of each class for validation.
pub fn stratified_split(labels: &[Label], fraction: f64, seed: u64) -> Result<InnerSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let mut split = InnerSplit {
        train: Vec::new(),
        validation: Vec::new(),
    };
    for label in [Label::Hc, Label::Ad] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        members.shuffle(&mut rng::stream(seed, "inner-split", label.index() as u64));
        let n_val = ((members.len() as f64 * fraction).round() as usize).min(members.len());
        split.validation.extend_from_slice(&members[..n_val]);
        split.train.extend_from_slice(&members[n_val..]);
    }
    if split.validation.is_empty() {
        return Err(Error::contract("validation split is empty"));
    }
    if split.train.is_empty() {
        return Err(Error::contract("inner training split is empty"));
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    Ok(split)
}
