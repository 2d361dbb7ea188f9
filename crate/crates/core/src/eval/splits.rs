use crate::error::{Error, Result};
use crate::seed;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// One train/test partition of the patients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub repetition: usize,
    pub fold: usize,
    pub train_patients: Vec<String>,
    pub test_patients: Vec<String>,
    /// Seeds model initialisation and batch order for this split.
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub reps: usize,
    pub master_seed: u64,
    pub splits: Vec<Split>,
}

/// Repeated patient-wise k-fold: repetition `r` shuffles the (sorted,
/// de-duplicated) ids with a seed derived from `(master_seed, r)` and cuts
/// them into `k` contiguous folds whose sizes differ by at most one.
pub fn make_splits(patient_ids: &[String], k: usize, reps: usize, master_seed: u64) -> Result<SplitPlan> {
    let mut ids: Vec<String> = patient_ids.to_vec();
    ids.sort();
    ids.dedup();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k = {k}; need at least 2 folds")));
    }
    if ids.len() < k {
        return Err(Error::TooFewPatients { patients: ids.len(), folds: k });
    }
    let n = ids.len();
    let mut splits = Vec::with_capacity(k * reps);
    for r in 0..reps {
        let mut order = ids.clone();
        order.shuffle(&mut seed::rng(&[master_seed, r as u64]));
        let mut start = 0;
        for fold in 0..k {
            let size = n / k + usize::from(fold < n % k);
            let test = order[start..start + size].to_vec();
            let train = order[..start].iter().chain(&order[start + size..]).cloned().collect();
            start += size;
            splits.push(Split {
                repetition: r,
                fold,
                train_patients: train,
                test_patients: test,
                init_seed: seed::mix(&[master_seed, r as u64, fold as u64]),
            });
        }
    }
    Ok(SplitPlan { k, reps, master_seed, splits })
}
