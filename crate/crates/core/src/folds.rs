use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Balanced random partition of `0..n` into `L` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldPlan {
    assignment: Vec<usize>,
    folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Shuffles the indices with `seed` and deals them round-robin, so fold
    /// sizes differ by at most one.
    pub fn new(n: usize, num_folds: usize, seed: u64) -> Result<Self> {
        if num_folds < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 folds, got {num_folds}"
            )));
        }
        if num_folds > n {
            return Err(Error::InvalidArgument(format!(
                "{num_folds} folds requested for {n} observations"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(seed, 0));
        let mut assignment = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            assignment[i] = pos % num_folds;
        }
        Self::from_assignment(assignment, num_folds)
    }

    pub fn from_assignment(assignment: Vec<usize>, num_folds: usize) -> Result<Self> {
        let mut folds = vec![Vec::new(); num_folds];
        for (i, &f) in assignment.iter().enumerate() {
            if f >= num_folds {
                return Err(Error::InvalidArgument(format!(
                    "observation {i} assigned to fold {f} of {num_folds}"
                )));
            }
            folds[f].push(i);
        }
        if folds.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("empty fold".into()));
        }
        Ok(Self { assignment, folds })
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Held-out indices of fold `l`, ascending.
    pub fn fold(&self, l: usize) -> &[usize] {
        &self.folds[l]
    }

    /// Indices outside fold `l`, ascending.
    pub fn complement(&self, l: usize) -> Vec<usize> {
        self.excluding(&[l])
    }

    /// Indices outside every listed fold, ascending.
    pub fn excluding(&self, folds: &[usize]) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| !folds.contains(&self.assignment[i]))
            .collect()
    }

    /// Unordered fold pairs `(l, l')` with `l < l'`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let l = self.num_folds();
        (0..l)
            .flat_map(|a| (a + 1..l).map(move |b| (a, b)))
            .collect()
    }
}
