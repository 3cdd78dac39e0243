use super::{DetectionError, Result};
use crate::tensor::Tensor;

/// Ground truth `g` is assigned to query `query_of_gt[g]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub query_of_gt: Vec<usize>,
    /// Sum of matched costs, accumulated in ground-truth order.
    pub cost: f64,
}

/// Minimum-cost injective assignment of rows (ground truths) to columns
/// (queries) for a `[G, M]` cost matrix with `G ≤ M`.
///
/// Shortest augmenting paths with row/column potentials, O(G²·M).
pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    let (rows, cols) = cost.dims2("hungarian_match")?;
    if rows > cols {
        return Err(DetectionError::TooManyTargets {
            gts: rows,
            queries: cols,
        });
    }
    if !cost.is_finite() {
        return Err(DetectionError::NonFiniteCost);
    }
    if rows == 0 {
        return Ok(Assignment {
            query_of_gt: Vec::new(),
            cost: 0.0,
        });
    }
    let a = |i: usize, j: usize| cost.at2(i - 1, j - 1);
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // owner[j]: 1-based row currently holding column j (0 = free).
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
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
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
    let mut query_of_gt = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            query_of_gt[owner[j] - 1] = j - 1;
        }
    }
    let total = assignment_cost(cost, &query_of_gt);
    Ok(Assignment {
        query_of_gt,
        cost: total,
    })
}

pub fn assignment_cost(cost: &Tensor, query_of_gt: &[usize]) -> f64 {
    query_of_gt.iter().enumerate().map(|(g, &q)| cost.at2(g, q)).sum()
}
