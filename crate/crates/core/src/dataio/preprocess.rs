use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Library-size normalization to `target_sum` per spot followed by `ln(1+x)`.
pub fn normalize_expression(counts: ArrayView2<f64>, target_sum: f64) -> Result<Array2<f64>> {
    if !(target_sum > 0.0) {
        return Err(Error::Argument(format!(
            "target_sum must be positive, got {target_sum}"
        )));
    }
    let mut out = counts.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Validation(format!(
                "row {i} has a negative or non-finite count"
            )));
        }
        let total: f64 = row.sum();
        if total <= 0.0 {
            return Err(Error::Validation(format!("row {i} has zero total count")));
        }
        let scale = target_sum / total;
        row.mapv_inplace(|v| (v * scale).ln_1p());
    }
    Ok(out)
}

/// Per-column unbiased sample variance.
pub fn sample_variance_columns(x: ArrayView2<f64>) -> Array1<f64> {
    let n = x.nrows();
    if n < 2 {
        return Array1::zeros(x.ncols());
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let mut var = Array1::<f64>::zeros(x.ncols());
    for row in x.rows() {
        for ((v, &xi), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            let d = xi - m;
            *v += d * d;
        }
    }
    var / (n - 1) as f64
}

/// Indices of the `n_top` highest-variance genes, in descending variance
/// order; equal variances keep the lower gene index first.
pub fn select_hvg(expr: ArrayView2<f64>, n_top: usize) -> Result<Vec<usize>> {
    let g = expr.ncols();
    if n_top > g {
        return Err(Error::Argument(format!(
            "requested {n_top} highly variable genes but only {g} exist"
        )));
    }
    if expr.nrows() < 2 {
        return Err(Error::Argument(
            "variance ranking needs at least two spots".into(),
        ));
    }
    let var = sample_variance_columns(expr);
    let mut idx: Vec<usize> = (0..g).collect();
    idx.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    idx.truncate(n_top);
    Ok(idx)
}

/// Histology patch side length in pixels: spot diameter over pixel
/// resolution, rounded half-to-even, at least 1.
pub fn compute_patch_size(spot_diameter: f64, pixel_resolution: f64) -> Result<u32> {
    if !(spot_diameter > 0.0) || !(pixel_resolution > 0.0) {
        return Err(Error::Argument(format!(
            "diameter and resolution must be positive (got {spot_diameter}, {pixel_resolution})"
        )));
    }
    let l = (spot_diameter / pixel_resolution).round_ties_even();
    Ok(l.max(1.0) as u32)
}

/// Sums single-cell expression into spots: a cell belongs to every spot whose
/// center lies within `spot_diameter / 2` (closed disk).
pub fn aggregate_cells_to_spots(
    cell_expr: ArrayView2<f64>,
    cell_coords: ArrayView2<f64>,
    spot_centers: ArrayView2<f64>,
    spot_diameter: f64,
) -> Result<Array2<f64>> {
    if cell_expr.nrows() != cell_coords.nrows() {
        return Err(Error::Dimension(format!(
            "{} cell expression rows vs {} cell coordinates",
            cell_expr.nrows(),
            cell_coords.nrows()
        )));
    }
    if cell_coords.ncols() != 2 || spot_centers.ncols() != 2 {
        return Err(Error::Dimension("coordinates must have 2 columns".into()));
    }
    if cell_coords.iter().chain(spot_centers.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite coordinate".into()));
    }
    if !(spot_diameter > 0.0) {
        return Err(Error::Argument("spot_diameter must be positive".into()));
    }
    let r2 = (spot_diameter / 2.0).powi(2);
    let g = cell_expr.ncols();
    let mut out = Array2::<f64>::zeros((spot_centers.nrows(), g));
    let rows = crate::par::map_indexed(spot_centers.nrows(), |i| {
        let (cx, cy) = (spot_centers[[i, 0]], spot_centers[[i, 1]]);
        let mut acc = Array1::<f64>::zeros(g);
        for (k, c) in cell_coords.rows().into_iter().enumerate() {
            let d2 = (c[0] - cx).powi(2) + (c[1] - cy).powi(2);
            if d2 <= r2 {
                acc += &cell_expr.row(k);
            }
        }
        acc
    });
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&src);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn normalize_example_row() {
        let out = normalize_expression(array![[1.0, 1.0, 2.0]].view(), 1e4).unwrap();
        // scaled to [2500, 2500, 5000] then log1p
        assert_abs_diff_eq!(out[[0, 0]], 2501f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out[[0, 2]], 5001f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out[[0, 0]], 7.8240, epsilon = 1e-3);
        assert_abs_diff_eq!(out[[0, 2]], 8.5174, epsilon = 1e-3);
    }

    #[test]
    fn normalize_single_gene_is_identity_scaling() {
        let out = normalize_expression(array![[1e4]].view(), 1e4).unwrap();
        assert_eq!(out[[0, 0]], 10001f64.ln());
    }

    #[test]
    fn normalize_zero_row_names_row() {
        let err = normalize_expression(array![[1.0, 0.0], [0.0, 0.0]].view(), 1e4).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn hvg_tie_break_and_exclusion() {
        // column variances 0, 2, 2 (approx pattern [0.1, 5, 5] scaled)
        let x = array![[1.0, 0.0, 2.0], [1.0, 2.0, 0.0]];
        assert_eq!(select_hvg(x.view(), 2).unwrap(), vec![1, 2]);
        assert_eq!(select_hvg(x.view(), 3).unwrap(), vec![1, 2, 0]);
        assert!(select_hvg(x.view(), 4).is_err());
    }

    #[test]
    fn hvg_ranks_by_variance() {
        let x = array![[0.0, 0.0, 0.0], [0.5, 3.0, 3.0], [0.2, -3.0, -3.0]];
        let v = sample_variance_columns(x.view());
        assert!(v[1] == v[2] && v[0] < v[1]);
        assert_eq!(select_hvg(x.view(), 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn patch_size_examples() {
        assert_eq!(compute_patch_size(55.0, 0.5).unwrap(), 110);
        assert_eq!(compute_patch_size(1.0, 1.0).unwrap(), 1);
        assert_eq!(compute_patch_size(100.0, 3.0).unwrap(), 33);
        assert_eq!(compute_patch_size(5.0, 2.0).unwrap(), 2);
        assert_eq!(compute_patch_size(0.1, 1.0).unwrap(), 1);
        assert!(compute_patch_size(0.0, 1.0).is_err());
        assert!(compute_patch_size(1.0, -1.0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let expr = array![[1.0, 2.0], [3.0, 4.0], [10.0, 10.0]];
        let cells = array![[0.0, 0.0], [0.0, 0.0], [5.0, 0.0]];
        let spots = array![[0.0, 0.0], [100.0, 100.0]];
        let out = aggregate_cells_to_spots(expr.view(), cells.view(), spots.view(), 2.0).unwrap();
        assert_eq!(out, array![[4.0, 6.0], [0.0, 0.0]]);

        // distance exactly equal to the radius is covered
        let out = aggregate_cells_to_spots(
            array![[1.0]].view(),
            array![[3.0, 4.0]].view(),
            array![[0.0, 0.0]].view(),
            10.0,
        )
        .unwrap();
        assert_eq!(out[[0, 0]], 1.0);
    }

    #[test]
    fn overlapping_spots_both_receive_cell() {
        let out = aggregate_cells_to_spots(
            array![[2.0]].view(),
            array![[0.5, 0.0]].view(),
            array![[0.0, 0.0], [1.0, 0.0]].view(),
            2.0,
        )
        .unwrap();
        assert_eq!(out, array![[2.0], [2.0]]);
    }

    proptest! {
        #[test]
        fn normalized_rows_sum_to_target(
            rows in proptest::collection::vec(proptest::collection::vec(0u32..50, 5), 1..6)
        ) {
            let n = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().map(|&v| v as f64 + 0.5).collect();
            let counts = Array2::from_shape_vec((n, 5), flat).unwrap();
            let out = normalize_expression(counts.view(), 1e4).unwrap();
            for row in out.rows() {
                let s: f64 = row.iter().map(|v| v.exp_m1()).sum();
                prop_assert!(((s - 1e4) / 1e4).abs() < 1e-6);
            }
        }

        #[test]
        fn aggregation_conserves_mass_on_disjoint_cover(
            assignments in proptest::collection::vec((0usize..4, 0.0f64..0.9, 0.0f64..std::f64::consts::TAU, 0.0f64..9.0), 1..40)
        ) {
            // four spots 10 apart, diameter 2: disjoint disks; every cell inside one
            let centers = array![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
            let m = assignments.len();
            let mut coords = Array2::zeros((m, 2));
            let mut expr = Array2::zeros((m, 3));
            for (k, &(s, r, t, v)) in assignments.iter().enumerate() {
                coords[[k, 0]] = centers[[s, 0]] + r * t.cos();
                coords[[k, 1]] = centers[[s, 1]] + r * t.sin();
                expr[[k, 0]] = v;
                expr[[k, 1]] = 2.0 * v;
                expr[[k, 2]] = k as f64;
            }
            let out = aggregate_cells_to_spots(expr.view(), coords.view(), centers.view(), 2.0).unwrap();
            let a = out.sum_axis(Axis(0));
            let b = expr.sum_axis(Axis(0));
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
