use ndarray::{ArrayView1, ArrayView2};

use super::csls::csls_score;

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `ln σ(z)`.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Pairwise ranking loss of one positive pair against its negatives:
/// the mean over negatives of `-ln σ(csls(x̂, ŷ) - csls(x̂, ŷ⁻))`.
///
/// `r_x`, `r_y` are the CSLS penalties of the query and the positive;
/// `r_neg[k]` is the penalty of negative row `k`.
pub fn rank_loss(
    x_hat: ArrayView1<'_, f64>,
    y_hat: ArrayView1<'_, f64>,
    negatives: ArrayView2<'_, f64>,
    r_x: f64,
    r_y: f64,
    r_neg: &[f64],
) -> f64 {
    assert_eq!(negatives.nrows(), r_neg.len(), "one penalty per negative");
    assert!(!r_neg.is_empty(), "rank loss needs at least one negative");
    let pos = csls_score(x_hat, y_hat, r_x, r_y);
    let total: f64 = negatives
        .rows()
        .into_iter()
        .zip(r_neg)
        .map(|(neg, &r)| softplus(csls_score(x_hat, neg, r_x, r) - pos))
        .sum();
    total / r_neg.len() as f64
}

/// Euclidean (unsquared) distance between the mapped pair.
pub fn mse_loss(x_hat: ArrayView1<'_, f64>, y_hat: ArrayView1<'_, f64>) -> f64 {
    x_hat
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}
