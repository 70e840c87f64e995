//! Kuhn-Munkres assignment on dense square cost matrices.

use crate::error::{Error, Result};

/// A bijection from ground-truth index `i` to prediction index `perm[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    perm: Vec<usize>,
}

impl Assignment {
    /// Wraps a permutation, checking bijectivity.
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Domain(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Assignment { perm })
    }

    pub fn identity(n: usize) -> Self {
        Assignment {
            perm: (0..n).collect(),
        }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Prediction index matched to ground-truth `gt`.
    pub fn prediction_for(&self, gt: usize) -> usize {
        self.perm[gt]
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
    }
}

/// Minimum-cost perfect matching of rows to columns in O(n^3).
///
/// `cost[i][j]` is the cost of assigning row (ground truth) `i` to column
/// (prediction) `j`.
pub fn hungarian_solve(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Shape(format!(
                "cost matrix row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFiniteCost { row: i, col: j });
        }
    }
    if n == 0 {
        return Ok(Assignment { perm: Vec::new() });
    }

    // Potentials and augmenting paths over 1-based indices; column 0 is a
    // virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    Ok(Assignment { perm })
}
