//! Block-sparse Cholesky for the normal equations.
//!
//! Every variable is one 3×3 block. Elimination order comes from a greedy
//! minimum-degree pass over the variable adjacency graph; the same pass
//! yields the block structure of the factor, which is then filled by a
//! left-looking numeric factorization.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector3};

/// Elimination order and the fill pattern of `L`, in eliminated order.
#[derive(Debug, Clone)]
pub(crate) struct Symbolic {
    /// `inv[old] = new` position.
    pub inv: Vec<usize>,
    /// `perm[new] = old`.
    pub perm: Vec<usize>,
    /// Rows `> j` of each block column of `L`, sorted.
    pub cols: Vec<Vec<usize>>,
    /// For block row `j`: every column `k < j` with `j` in `cols[k]`, and
    /// the position of `j` inside `cols[k]`.
    pub rows: Vec<Vec<(usize, usize)>>,
}

impl Symbolic {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a != b {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
        let mut perm = Vec::with_capacity(n);
        let mut old_cols: Vec<Vec<usize>> = Vec::with_capacity(n);
        while let Some((_, v)) = queue.pop_first() {
            let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
            for &u in &nbrs {
                queue.remove(&(adj[u].len(), u));
                adj[u].remove(&v);
                for &w in &nbrs {
                    if w != u {
                        adj[u].insert(w);
                    }
                }
                queue.insert((adj[u].len(), u));
            }
            perm.push(v);
            old_cols.push(nbrs);
        }
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let cols: Vec<Vec<usize>> = old_cols
            .into_iter()
            .map(|c| {
                let mut c: Vec<usize> = c.into_iter().map(|o| inv[o]).collect();
                c.sort_unstable();
                c
            })
            .collect();
        let mut rows = vec![Vec::new(); n];
        for (k, col) in cols.iter().enumerate() {
            for (t, &j) in col.iter().enumerate() {
                rows[j].push((k, t));
            }
        }
        Self { inv, perm, cols, rows }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }
}

/// Numeric factor `L` with inverted diagonal blocks.
pub(crate) struct Factor {
    diag_inv: Vec<Matrix3<f64>>,
    cols: Vec<Vec<Matrix3<f64>>>,
}

/// Factors a matrix given in eliminated order: `diag[j]` and, for each block
/// column `j`, the nonzero strictly-lower blocks `(row, A[row][j])`.
/// Returns `None` if the matrix is not positive definite.
pub(crate) fn factorize(sym: &Symbolic, diag: &[Matrix3<f64>], lower: &[Vec<(usize, Matrix3<f64>)>]) -> Option<Factor> {
    let n = sym.len();
    let mut diag_inv = Vec::with_capacity(n);
    let mut cols: Vec<Vec<Matrix3<f64>>> = Vec::with_capacity(n);
    let mut pos = vec![usize::MAX; n];
    for j in 0..n {
        let pattern = &sym.cols[j];
        for (t, &i) in pattern.iter().enumerate() {
            pos[i] = t;
        }
        let mut acc_diag = diag[j];
        let mut acc = vec![Matrix3::zeros(); pattern.len()];
        for &(i, a) in &lower[j] {
            acc[pos[i]] += a;
        }
        for &(k, pj) in &sym.rows[j] {
            let col_k = &cols[k];
            let ljk = col_k[pj];
            let ljk_t = ljk.transpose();
            acc_diag -= ljk * ljk_t;
            for (t, &i) in sym.cols[k].iter().enumerate().skip(pj + 1) {
                acc[pos[i]] -= col_k[t] * ljk_t;
            }
        }
        let l = acc_diag.cholesky()?.l();
        let l_inv = l.try_inverse()?;
        if !l_inv.iter().all(|v| v.is_finite()) {
            return None;
        }
        let l_inv_t = l_inv.transpose();
        for a in acc.iter_mut() {
            *a *= l_inv_t;
        }
        diag_inv.push(l_inv);
        cols.push(acc);
        for &i in pattern {
            pos[i] = usize::MAX;
        }
    }
    Some(Factor { diag_inv, cols })
}

impl Factor {
    /// Solves `L Lᵀ x = b` with `b` given in eliminated order.
    pub fn solve(&self, sym: &Symbolic, b: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let n = sym.len();
        let mut y = b.to_vec();
        for j in 0..n {
            let yj = self.diag_inv[j] * y[j];
            y[j] = yj;
            for (t, &i) in sym.cols[j].iter().enumerate() {
                y[i] -= self.cols[j][t] * yj;
            }
        }
        for j in (0..n).rev() {
            let mut s = y[j];
            for (t, &i) in sym.cols[j].iter().enumerate() {
                s -= self.cols[j][t].transpose() * y[i];
            }
            y[j] = self.diag_inv[j].transpose() * s;
        }
        y
    }
}
