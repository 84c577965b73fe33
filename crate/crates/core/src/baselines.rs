//! Centralized comparison methods on organizer-aggregated observations.

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{matrix_rows, LocalObservations};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeResult {
    #[serde(with = "matrix_rows")]
    pub completed: Array2<f64>,
    pub iterations: usize,
    /// Largest change on a missing cell in the last round.
    pub final_delta: f64,
}

fn to_dmatrix(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Best rank-`k` approximation via a full SVD with all but the `k` largest
/// singular values zeroed.
pub fn truncated_svd(m: &Array2<f64>, k: usize) -> Array2<f64> {
    let svd = to_dmatrix(m).svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for &i in order.iter().take(k) {
        out += u.column(i) * v_t.row(i) * svd.singular_values[i];
    }
    from_dmatrix(&out)
}

/// Singular values in descending order.
pub fn singular_values(m: &Array2<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = to_dmatrix(m).singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn observed_mean(obs: &LocalObservations) -> Result<f64> {
    obs.observed_mean()
        .ok_or_else(|| Error::param("no observed cells to impute from"))
}

/// Iterative hard-impute with a rank-`k` truncated SVD.
///
/// Missing cells start at their column's observed mean (global observed mean
/// for empty columns). Each round takes the rank-`k` reconstruction of the
/// current matrix and writes the observed cells back over it, stopping when
/// no missing cell moves by more than `tol`. Missing cells are clamped at 0
/// in the output.
pub fn tsvd_impute(
    aggregated: &LocalObservations,
    k: usize,
    max_rounds: usize,
    tol: f64,
) -> Result<ImputeResult> {
    let (rows, cols) = aggregated.dim();
    if k == 0 || k > rows.min(cols) {
        return Err(Error::param(format!("rank k = {k} must lie in 1..={}", rows.min(cols))));
    }
    let global = observed_mean(aggregated)?;
    let values = aggregated.values();
    let mask = aggregated.mask();

    let mut current = values.clone();
    for t in 0..cols {
        let seen = mask.column(t).sum();
        let fill = if seen > 0.0 {
            values.column(t).sum() / seen
        } else {
            global
        };
        for a in 0..rows {
            if mask[[a, t]] == 0.0 {
                current[[a, t]] = fill;
            }
        }
    }

    let mut iterations = 0;
    let mut final_delta = 0.0;
    for _ in 0..max_rounds {
        iterations += 1;
        let low_rank = truncated_svd(&current, k);
        let mut delta = 0.0_f64;
        for ((idx, cur), &m) in current.indexed_iter_mut().zip(mask.iter()) {
            if m == 0.0 {
                delta = delta.max((low_rank[idx] - *cur).abs());
                *cur = low_rank[idx];
            }
        }
        final_delta = delta;
        if delta <= tol {
            break;
        }
    }
    for (c, &m) in current.iter_mut().zip(mask.iter()) {
        if m == 0.0 {
            *c = c.max(0.0);
        }
    }
    Ok(ImputeResult {
        completed: current,
        iterations,
        final_delta,
    })
}

/// Observed cells keep their value; missing cells take the row's observed
/// mean, or the global observed mean for rows with no observations.
pub fn mean_fill(aggregated: &LocalObservations) -> Result<Array2<f64>> {
    let global = observed_mean(aggregated)?;
    let values = aggregated.values();
    let mask = aggregated.mask();
    let mut out = values.clone();
    for (a, mut row) in out.outer_iter_mut().enumerate() {
        let seen = mask.row(a).sum();
        let fill = if seen > 0.0 {
            values.row(a).sum() / seen
        } else {
            global
        };
        for (v, &m) in row.iter_mut().zip(mask.row(a)) {
            if m == 0.0 {
                *v = fill;
            }
        }
    }
    Ok(out)
}
