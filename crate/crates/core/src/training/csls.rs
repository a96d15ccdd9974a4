//! Cross-domain similarity local scaling.
//!
//! For unit vectors, `csls(x, y) = 2⟨x, y⟩ - r_T(x) - r_S(y)`, where `r_T(x)`
//! is the mean similarity of `x` to its `k` nearest targets and `r_S(y)` the
//! mean similarity of `y` to its `k` nearest sources. Hubs, which sit close to
//! many points, get large penalties.

use std::cmp::Ordering;

use ndarray::{s, Array1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};

const DEFAULT_BLOCK: usize = 512;

/// Mean of the `k` largest dot products of each query row with the keys.
///
/// When `same` is true the queries and keys are the same matrix and each
/// row's match with itself is skipped.
pub fn csls_penalties(queries: ArrayView2<'_, f64>, keys: ArrayView2<'_, f64>, k: usize, same: bool) -> Result<Array1<f64>> {
    csls_penalties_blocked(queries, keys, k, same, DEFAULT_BLOCK)
}

pub fn csls_penalties_blocked(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    k: usize,
    same: bool,
    block: usize,
) -> Result<Array1<f64>> {
    let available = keys.nrows() - usize::from(same && keys.nrows() > 0);
    if k == 0 || k > available {
        return Err(Error::Config(format!(
            "csls k = {k} but only {available} keys available"
        )));
    }
    if same && queries.nrows() != keys.nrows() {
        return Err(Error::Shape("self penalties need queries == keys".into()));
    }
    if queries.ncols() != keys.ncols() {
        return Err(Error::Shape(format!(
            "query dim {} vs key dim {}",
            queries.ncols(),
            keys.ncols()
        )));
    }
    let block = block.max(1);
    let n = queries.nrows();
    let starts: Vec<usize> = (0..n).step_by(block).collect();
    let parts: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + block).min(n);
            let sims = queries.slice(s![start..end, ..]).dot(&keys.t());
            let mut buf = Vec::with_capacity(keys.nrows());
            sims.rows()
                .into_iter()
                .enumerate()
                .map(|(r, row)| {
                    buf.clear();
                    buf.extend(
                        row.iter()
                            .enumerate()
                            .filter(|&(j, _)| !(same && j == start + r))
                            .map(|(_, &v)| v),
                    );
                    top_k_mean(&mut buf, k)
                })
                .collect()
        })
        .collect();
    Ok(Array1::from_iter(parts.into_iter().flatten()))
}

/// Mean of the `k` largest values. Reorders `values`.
pub(crate) fn top_k_mean(values: &mut [f64], k: usize) -> f64 {
    let desc = |a: &f64, b: &f64| b.partial_cmp(a).unwrap_or(Ordering::Equal);
    if k < values.len() {
        values.select_nth_unstable_by(k - 1, desc);
    }
    let top = &mut values[..k];
    top.sort_unstable_by(desc);
    top.iter().sum::<f64>() / k as f64
}

/// `2⟨x̂, ŷ⟩ - r_x - r_y`.
#[inline]
pub fn csls_score(x_hat: ndarray::ArrayView1<'_, f64>, y_hat: ndarray::ArrayView1<'_, f64>, r_x: f64, r_y: f64) -> f64 {
    2.0 * x_hat.dot(&y_hat) - r_x - r_y
}
