use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Assignment of sample ids to `k` cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    #[serde(rename = "folds")]
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Ids in fold `f`, sorted.
    pub fn members(&self, f: usize) -> Vec<&str> {
        self.assignments.iter().filter(|(_, &v)| v == f).map(|(k, _)| k.as_str()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold split serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let split: FoldSplit = serde_json::from_str(text)?;
        ensure!(split.k >= 2, Dataset, "fold split has k = {}", split.k);
        if let Some((id, f)) = split.assignments.iter().find(|(_, &f)| f >= split.k) {
            return Err(Error::Dataset(format!("sample {id} assigned to fold {f}, but k = {}", split.k)));
        }
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Shuffles `ids` with `seed` and deals them round-robin into `k` folds.
pub fn split_folds<S: AsRef<str>>(ids: &[S], k: usize, seed: u64) -> Result<FoldSplit> {
    ensure!(k >= 2, InvalidArgument, "k must be at least 2, got {k}");
    ensure!(k <= ids.len(), InvalidArgument, "cannot split {} samples into {k} folds", ids.len());
    let unique: BTreeSet<&str> = ids.iter().map(AsRef::as_ref).collect();
    ensure!(unique.len() == ids.len(), InvalidArgument, "sample ids must be unique");
    let mut order: Vec<&str> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = order.into_iter().enumerate().map(|(i, id)| (id.to_string(), i % k)).collect();
    Ok(FoldSplit { k, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn one_per_fold() {
        let s = split_folds(&ids(10), 10, 0).unwrap();
        assert!(s.sizes().iter().all(|&n| n == 1));
    }

    #[test]
    fn twenty_three_into_ten() {
        let mut sizes = split_folds(&ids(23), 10, 4).unwrap().sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, [3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        assert_eq!(split_folds(&ids(30), 5, 7).unwrap(), split_folds(&ids(30), 5, 7).unwrap());
        assert_ne!(split_folds(&ids(30), 5, 7).unwrap(), split_folds(&ids(30), 5, 8).unwrap());
    }

    #[test]
    fn errors() {
        assert!(split_folds(&ids(3), 4, 0).is_err());
        assert!(split_folds(&ids(3), 1, 0).is_err());
        assert!(split_folds(&["a", "a", "b"], 2, 0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = split_folds(&ids(7), 3, 1).unwrap();
        let text = s.to_json();
        assert!(text.contains("\"folds\""));
        assert_eq!(FoldSplit::from_json(&text).unwrap(), s);
        assert!(FoldSplit::from_json(r#"{"k": 2, "folds": {"a": 2}}"#).is_err());
    }

    proptest! {
        #[test]
        fn partitions_balanced(n in 2usize..60, k in 2usize..12, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let names = ids(n);
            let s = split_folds(&names, k, seed).unwrap();
            prop_assert_eq!(s.assignments.len(), n);
            for id in &names {
                prop_assert!(s.fold_of(id).unwrap() < k);
            }
            let sizes = s.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
