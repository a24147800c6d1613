//! Minimum-cost rectangular assignment (Kuhn-Munkres with potentials,
//! O(n²m)).

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{NcdlError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(row, column)` pairs sorted by row; `min(n, m)` of them.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the assigned entries, accumulated in row order.
    pub total_cost: f64,
}

/// Optimal one-to-one assignment of `min(n, m)` pairs minimizing total cost.
/// Ties resolve deterministically toward lower indices.
pub fn hungarian(cost: ArrayView2<'_, f64>) -> Result<Assignment> {
    if let Some(v) = cost.iter().find(|v| !v.is_finite()) {
        return Err(NcdlError::NonFinite(format!("cost entry {v}")));
    }
    let (n, m) = cost.dim();
    let mut pairs = if n <= m {
        solve(n, m, |i, j| cost[[i, j]])
    } else {
        solve(m, n, |i, j| cost[[j, i]])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[[i, j]]).sum();
    Ok(Assignment { pairs, total_cost })
}

/// `rows <= cols`. Returns one pair per row.
fn solve(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    if rows == 0 {
        return Vec::new();
    }
    // 1-based with a sentinel column 0
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    let mut minv = vec![0.0; cols + 1];
    let mut used = vec![false; cols + 1];

    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
    (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect()
}
