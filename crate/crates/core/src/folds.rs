//! Seeded fold assignment.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::exec::rng_from;

/// Fold label per unit. Units are shuffled with a seeded stream and dealt
/// into contiguous blocks, so fold sizes differ by at most one.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    assert!(folds >= 1, "need at least one fold");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed, &[0xF01D]));
    let mut labels = vec![0; n];
    let base = n / folds;
    let extra = n % folds;
    let mut pos = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        for &unit in &order[pos..pos + size] {
            labels[unit] = f;
        }
        pos += size;
    }
    labels
}

/// `(training, validation)` index sets for each fold label.
pub fn split(labels: &[usize], folds: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..folds)
        .map(|f| {
            let (valid, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i] == f);
            (train, valid)
        })
        .collect()
}

/// `K` independent partitions of the units into `M` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    /// `labels[k][i]` is the fold of unit `i` in repetition `k`.
    pub labels: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn new(n_units: usize, n_folds: usize, repetitions: usize, seed: u64) -> Self {
        let labels = (0..repetitions)
            .map(|k| assign_folds(n_units, n_folds, crate::exec::derive_seed(seed, &[k as u64])))
            .collect();
        Self { n_folds, seed, labels }
    }

    pub fn repetitions(&self) -> usize {
        self.labels.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn folds_partition_units(n in 1usize..200, v in 1usize..12, seed in any::<u64>()) {
            let labels = assign_folds(n, v, seed);
            let sizes: Vec<usize> = (0..v).map(|f| labels.iter().filter(|&&l| l == f).count()).collect();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for (train, valid) in split(&labels, v) {
                prop_assert_eq!(train.len() + valid.len(), n);
                prop_assert!(valid.iter().all(|i| !train.contains(i)));
            }
        }
    }

    #[test]
    fn plan_is_seeded() {
        assert_eq!(FoldPlan::new(50, 2, 3, 9), FoldPlan::new(50, 2, 3, 9));
        assert_ne!(FoldPlan::new(50, 2, 3, 9).labels[0], FoldPlan::new(50, 2, 3, 9).labels[1]);
    }
}
