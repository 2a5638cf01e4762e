//! Stratified k-fold splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    /// Sample indices per fold, ascending.
    pub folds: Vec<Vec<usize>>,
    /// Stratum of every sample, as passed in.
    pub strata: Vec<usize>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// `(train, validation)` indices with fold `i` held out.
    pub fn split(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        train.sort_unstable();
        (train, self.folds[i].clone())
    }
}

/// Splits samples into `k` folds so that every (label, stratum) group is
/// spread as evenly as possible: each fold receives `floor` or `ceil` of
/// its share of every group.
///
/// Groups are shuffled with `seed` and dealt round-robin; the dealing
/// position carries over from one group to the next, which also keeps the
/// fold sizes within one of each other.
pub fn stratified_kfold(labels: &[u8], strata: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if labels.len() != strata.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: strata.len(),
        });
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let per_class = [0u8, 1].map(|c| labels.iter().filter(|l| **l == c).count());
    let smallest = per_class.iter().copied().filter(|n| *n > 0).min().unwrap_or(0);
    if k > smallest {
        return Err(Error::invalid(format!("k = {k} exceeds the smallest class size {smallest}")));
    }

    let mut groups: Vec<((u8, usize), Vec<usize>)> = Vec::new();
    for (i, key) in labels.iter().copied().zip(strata.iter().copied()).enumerate() {
        match groups.iter_mut().find(|(g, _)| *g == key) {
            Some((_, members)) => members.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    groups.sort_by_key(|(key, _)| *key);

    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (n, (_, mut members)) in groups.into_iter().enumerate() {
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, &[n as u64])));
        for m in members {
            folds[next].push(m);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan {
        folds,
        strata: strata.to_vec(),
    })
}
