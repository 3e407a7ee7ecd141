use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cross-validation fold membership for every training image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Ids outside `fold`, i.e. the training split when `fold` validates.
    pub fn complement(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f != fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for f in self.assignment.values() {
            sizes[*f] += 1;
        }
        sizes
    }
}

/// Deterministic partition of `image_ids` into `n_folds` folds whose sizes
/// differ by at most one.
///
/// Ids are sorted before shuffling, so the result depends only on the id set
/// and `seed`, not on input order.
pub fn split_folds<S: AsRef<str>>(
    image_ids: &[S],
    n_folds: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_folds must be >= 2, got {n_folds}"
        )));
    }
    if image_ids.is_empty() {
        return Err(Error::Empty("image ids"));
    }
    if image_ids.len() < n_folds {
        return Err(Error::InvalidArgument(format!(
            "{} images cannot fill {n_folds} folds",
            image_ids.len()
        )));
    }
    let mut seen = HashSet::with_capacity(image_ids.len());
    for id in image_ids {
        if !seen.insert(id.as_ref()) {
            return Err(Error::DuplicateId(id.as_ref().to_string()));
        }
    }
    let mut ids: Vec<&str> = image_ids.iter().map(AsRef::as_ref).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % n_folds))
        .collect();
    Ok(FoldAssignment {
        n_folds,
        seed,
        assignment,
    })
}
