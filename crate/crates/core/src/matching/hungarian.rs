//! Exact minimum-cost one-to-one assignment (shortest augmenting paths with potentials).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A one-to-one matching between rows (predictions) and columns (ground truths).
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    /// `(prediction, ground_truth)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of matched costs, accumulated in ascending prediction order.
    pub total_cost: f64,
    pub unmatched_predictions: Vec<usize>,
}

/// Minimum-cost assignment of `min(m, n)` pairs for an `m×n` cost matrix.
pub fn hungarian_match(cost: &Tensor) -> Result<AssignmentResult> {
    let (m, n) = cost.dims2()?;
    if !cost.all_finite() {
        return Err(Error::NonFinite("hungarian_match"));
    }
    let row_of_col = if m <= n {
        solve(m, n, |i, j| cost.at2(i, j))
            .into_iter()
            .enumerate()
            .filter_map(|(j, r)| r.map(|r| (r, j)))
            .collect::<Vec<_>>()
    } else {
        // Work on the transpose so the smaller side is the one being assigned.
        solve(n, m, |i, j| cost.at2(j, i))
            .into_iter()
            .enumerate()
            .filter_map(|(j, r)| r.map(|r| (j, r)))
            .collect()
    };
    let mut pairs = row_of_col;
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| cost.at2(r, c)).sum();
    let matched: Vec<bool> = {
        let mut v = vec![false; m];
        pairs.iter().for_each(|&(r, _)| v[r] = true);
        v
    };
    let unmatched_predictions = (0..m).filter(|&r| !matched[r]).collect();
    Ok(AssignmentResult {
        pairs,
        total_cost,
        unmatched_predictions,
    })
}

/// Assigns every one of `rows ≤ cols` rows. Returns, per column, the matched row.
fn solve(rows: usize, cols: usize, c: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    // 1-based potentials; column 0 is a virtual root.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let reduced = c(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    owner[1..]
        .iter()
        .map(|&r| if r == 0 { None } else { Some(r - 1) })
        .collect()
}
