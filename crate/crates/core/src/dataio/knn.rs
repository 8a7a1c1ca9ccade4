use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Spatial neighborhoods: row `i` lists the `k` nearest other spots by
/// Euclidean distance, ascending, equal distances ordered by spot index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    n: usize,
    k: usize,
    neighbors: Vec<usize>,
}

impl NeighborIndex {
    /// Builds an index from explicit rows, checking the structural
    /// invariants (row length, range, no self-reference).
    pub fn from_rows(rows: Vec<Vec<usize>>, k: usize) -> Result<Self> {
        let n = rows.len();
        let mut neighbors = Vec::with_capacity(n * k);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != k {
                return Err(Error::Dimension(format!(
                    "row {i} has {} neighbors, expected {k}",
                    row.len()
                )));
            }
            if row.iter().any(|&j| j >= n || j == i) {
                return Err(Error::Validation(format!(
                    "row {i} has a self or out-of-range neighbor"
                )));
            }
            neighbors.extend(row);
        }
        Ok(Self { n, k, neighbors })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_spots(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

/// Exact k-nearest-neighbor search over 2-D coordinates.
pub fn knn_neighbors(coords: ArrayView2<f64>, k: usize) -> Result<NeighborIndex> {
    let n = coords.nrows();
    if coords.ncols() != 2 {
        return Err(Error::Dimension(format!(
            "coords must have 2 columns, found {}",
            coords.ncols()
        )));
    }
    if k >= n {
        return Err(Error::Argument(format!(
            "k = {k} neighbors requested from {n} spots"
        )));
    }
    let rows = crate::par::map_indexed(n, |i| {
        let (xi, yi) = (coords[[i, 0]], coords[[i, 1]]);
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dx = coords[[j, 0]] - xi;
                let dy = coords[[j, 1]] - yi;
                (dx * dx + dy * dy, j)
            })
            .collect();
        if k < cand.len() {
            cand.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.into_iter().map(|(_, j)| j).collect::<Vec<_>>()
    });
    Ok(NeighborIndex {
        n,
        k,
        neighbors: rows.into_iter().flatten().collect(),
    })
}
