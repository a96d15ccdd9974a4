//! Closed-form orthogonal baseline: the rotation `W` minimizing
//! `‖W X_D − Y_D‖_F` over seed pairs, from an SVD of the cross-covariance.

use log::warn;
use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::lexicon::SeedLexicon;
use crate::retrieval::{EvalReport, RetrievalIndex};

// Singular values below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesFit {
    /// Maps a source column vector onto the target space.
    pub w: Array2<f64>,
    pub rank: usize,
}

impl ProcrustesFit {
    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.w.nrows()
    }

    /// Source rows mapped by `W`, i.e. `X Wᵀ`.
    pub fn map_rows(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w.t())
    }
}

/// Fit on the rows of `src` and `tgt` named by `pairs`.
pub fn fit(src: ArrayView2<'_, f64>, tgt: ArrayView2<'_, f64>, pairs: &SeedLexicon) -> Result<ProcrustesFit> {
    if pairs.is_empty() {
        return Err(Error::EmptyLexicon("seed lexicon for the orthogonal fit".into()));
    }
    let d = src.ncols();
    if tgt.ncols() != d {
        return Err(Error::Shape(format!("source dim {d} vs target dim {}", tgt.ncols())));
    }
    pairs.check_bounds(src.nrows(), tgt.nrows())?;

    // M = Σ y xᵀ over seed pairs
    let mut m = DMatrix::<f64>::zeros(d, d);
    for &(s, t) in pairs.pairs() {
        let (x, y) = (src.row(s), tgt.row(t));
        for r in 0..d {
            for c in 0..d {
                m[(r, c)] += y[r] * x[c];
            }
        }
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Numeric("SVD of the cross-covariance did not converge".into())),
    };
    let top = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_TOLERANCE * top.max(f64::MIN_POSITIVE))
        .count();
    if rank < d {
        warn!("cross-covariance has rank {rank} < {d}; the orthogonal map is not unique");
    }
    let w = u * v_t;
    Ok(ProcrustesFit {
        w: Array2::from_shape_fn((d, d), |(r, c)| w[(r, c)]),
        rank,
    })
}

/// Fit on `train` and report CSLS precision on `test`.
pub fn evaluate(
    src: ArrayView2<'_, f64>,
    tgt: ArrayView2<'_, f64>,
    train: &SeedLexicon,
    test: &SeedLexicon,
    csls_k: usize,
    ks: &[usize],
) -> Result<(ProcrustesFit, EvalReport)> {
    let fit = fit(src, tgt, train)?;
    let index = RetrievalIndex::from_mapped(fit.map_rows(src), tgt.to_owned(), csls_k)?;
    let report = index.evaluate(test, ks)?;
    Ok((fit, report))
}
