//! Minimum-cost rectangular assignment (Hungarian algorithm, shortest
//! augmenting path with dual potentials, O(n²m)).

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Optimal assignment of size `min(rows, cols)`.
///
/// Costs must be finite. The result is deterministic for a given matrix:
/// the augmenting-path search always prefers the lowest column index among
/// equal reduced costs.
pub fn hungarian(cost: &DMatrix<f64>) -> Assignment {
    assert!(cost.iter().all(|c| c.is_finite()), "assignment costs must be finite");
    let (rows, cols) = cost.shape();
    if rows == 0 || cols == 0 {
        return Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        };
    }
    let mut pairs = if rows <= cols {
        solve(rows, cols, |i, j| cost[(i, j)])
    } else {
        solve(cols, rows, |i, j| cost[(j, i)])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
    Assignment { pairs, cost: total }
}

/// Assignment that maximizes the number of pairs with cost `<= max_cost`
/// and, among those, minimizes their total cost. Pairs above the gate are
/// never returned.
pub fn hungarian_gated(cost: &DMatrix<f64>, max_cost: f64) -> Vec<(usize, usize)> {
    let feasible = |c: f64| c.is_finite() && c <= max_cost;
    let (rows, cols) = cost.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Vec::new();
    }
    let worst = cost
        .iter()
        .copied()
        .filter(|&c| feasible(c))
        .fold(0.0f64, |m, c| m.max(c.abs()));
    // Any single infeasible pair must outweigh every feasible assignment.
    let big = (worst + 1.0) * (k as f64 + 1.0) * 2.0;
    let padded = DMatrix::from_fn(rows, cols, |i, j| {
        let c = cost[(i, j)];
        if feasible(c) {
            c
        } else {
            big
        }
    });
    hungarian(&padded)
        .pairs
        .into_iter()
        .filter(|&(i, j)| feasible(cost[(i, j)]))
        .collect()
}

/// Core solver for `n <= m`; returns `(row, col)` pairs.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based potentials; p[j] is the row matched to column j (0 = none).
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}
