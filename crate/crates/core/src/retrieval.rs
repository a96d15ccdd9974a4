//! CSLS nearest-neighbor retrieval, translation output and Precision@k.
//!
//! Rankings are by descending CSLS score; equal scores go to the lower target
//! index. Precision@k averages over unique source words: a source counts as a
//! hit when any of its gold targets is among its top `k` candidates.

use std::cmp::Ordering;
use std::fmt;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lexicon::SeedLexicon;
use crate::mapping::{AlignmentModel, Side};
use crate::training::csls::csls_penalties_blocked;
use crate::training::{Penalties, Tables};

const DEFAULT_BLOCK: usize = 512;

/// Mapped vocabularies of both languages with their CSLS penalties.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    mapped_src: Array2<f64>,
    mapped_tgt: Array2<f64>,
    r_src: Array1<f64>,
    r_tgt: Array1<f64>,
    k: usize,
}

/// Map both full vocabularies and precompute penalties with neighborhood `k`.
pub fn build_index(model: &AlignmentModel, tables: &Tables<'_>, k: usize) -> Result<RetrievalIndex> {
    let xs = model.map_all(Side::Source, tables.src, tables.src_ctx)?;
    let ys = model.map_all(Side::Target, tables.tgt, tables.tgt_ctx)?;
    RetrievalIndex::from_mapped(xs, ys, k)
}

impl RetrievalIndex {
    /// Index over already-mapped unit-norm rows.
    pub fn from_mapped(mapped_src: Array2<f64>, mapped_tgt: Array2<f64>, k: usize) -> Result<Self> {
        Self::from_mapped_blocked(mapped_src, mapped_tgt, k, DEFAULT_BLOCK)
    }

    pub fn from_mapped_blocked(
        mapped_src: Array2<f64>,
        mapped_tgt: Array2<f64>,
        k: usize,
        block: usize,
    ) -> Result<Self> {
        let r_src = csls_penalties_blocked(mapped_src.view(), mapped_tgt.view(), k, false, block)?;
        let r_tgt = csls_penalties_blocked(mapped_tgt.view(), mapped_src.view(), k, false, block)?;
        Ok(Self {
            mapped_src,
            mapped_tgt,
            r_src,
            r_tgt,
            k,
        })
    }

    pub fn mapped_src(&self) -> ArrayView2<'_, f64> {
        self.mapped_src.view()
    }

    pub fn mapped_tgt(&self) -> ArrayView2<'_, f64> {
        self.mapped_tgt.view()
    }

    pub fn r_src(&self) -> &Array1<f64> {
        &self.r_src
    }

    pub fn r_tgt(&self) -> &Array1<f64> {
        &self.r_tgt
    }

    pub fn csls_k(&self) -> usize {
        self.k
    }

    pub fn source_count(&self) -> usize {
        self.mapped_src.nrows()
    }

    pub fn target_count(&self) -> usize {
        self.mapped_tgt.nrows()
    }

    pub fn penalties(&self) -> Penalties {
        Penalties {
            r_src: self.r_src.clone(),
            r_tgt: self.r_tgt.clone(),
        }
    }

    /// CSLS score of source `src` against every target.
    pub fn scores(&self, src: usize) -> Array1<f64> {
        let x = self.mapped_src.row(src);
        let r_x = self.r_src[src];
        let mut s = self.mapped_tgt.dot(&x);
        s.iter_mut()
            .zip(&self.r_tgt)
            .for_each(|(v, &r_y)| *v = 2.0 * *v - r_x - r_y);
        s
    }

    /// The `k` best targets for `src` with their scores.
    pub fn top_k(&self, src: usize, k: usize) -> Result<Vec<(usize, f64)>> {
        if src >= self.source_count() {
            return Err(Error::Shape(format!(
                "source {src} out of range for {} words",
                self.source_count()
            )));
        }
        let scores = self.scores(src);
        Ok(top_k_of(scores.as_slice().unwrap(), k))
    }

    /// Best target for every source.
    pub fn best_targets(&self) -> Vec<usize> {
        (0..self.source_count())
            .into_par_iter()
            .map(|i| argmax(self.scores(i).as_slice().unwrap()))
            .collect()
    }

    /// Best source for every target. `r_tgt[j]` is constant per target, so
    /// only `2⟨x_i, y_j⟩ - r_src[i]` is compared.
    pub fn best_sources(&self) -> Vec<usize> {
        (0..self.target_count())
            .into_par_iter()
            .map(|j| {
                let mut s = self.mapped_src.dot(&self.mapped_tgt.row(j));
                s.iter_mut()
                    .zip(&self.r_src)
                    .for_each(|(v, &r)| *v = 2.0 * *v - r);
                argmax(s.as_slice().unwrap())
            })
            .collect()
    }

    pub fn precision_at_k(&self, test: &SeedLexicon, k: usize) -> Result<f64> {
        if test.is_empty() {
            return Err(Error::EmptyLexicon("test lexicon".into()));
        }
        test.check_bounds(self.source_count(), self.target_count())?;
        let sources: Vec<usize> = test.sources().collect();
        let hits: usize = sources
            .par_iter()
            .map(|&s| {
                let gold = test.gold(s).expect("source from lexicon");
                let top = self.top_k(s, k).expect("bounds checked");
                usize::from(top.iter().any(|(j, _)| gold.contains(j)))
            })
            .sum();
        Ok(hits as f64 / sources.len() as f64)
    }

    pub fn evaluate(&self, test: &SeedLexicon, ks: &[usize]) -> Result<EvalReport> {
        let precision = ks
            .iter()
            .map(|&k| Ok((k, self.precision_at_k(test, k)?)))
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            precision,
            n_src_words: test.source_count(),
        })
    }

    /// Write `k` translations per source word as `src\ttgt\tscore` lines.
    pub fn induce(
        &self,
        src_words: &[String],
        tgt_words: &[String],
        sources: impl IntoIterator<Item = usize>,
        k: usize,
        mut out: impl Write,
    ) -> Result<()> {
        for s in sources {
            for (t, score) in self.top_k(s, k)? {
                writeln!(out, "{}\t{}\t{}", src_words[s], tgt_words[t], score)
                    .map_err(|e| Error::io("<induction output>", e))?;
            }
        }
        Ok(())
    }
}

/// Indices of the `k` largest values, in descending order with ties broken
/// by ascending index.
pub fn top_k_of(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let cmp = |a: &(usize, f64), b: &(usize, f64)| rank_order(*a, *b);
    let mut all: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    let k = k.min(all.len());
    if k == 0 {
        return Vec::new();
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_unstable_by(cmp);
    all
}

#[inline]
fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = j;
        }
    }
    best
}

/// Precision figures as printed by the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub precision: Vec<(usize, f64)>,
    pub n_src_words: usize,
}

impl EvalReport {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.precision.iter().find(|(kk, _)| *kk == k).map(|(_, p)| *p)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, p) in &self.precision {
            writeln!(f, "p_at_{k}={p:.6}")?;
        }
        write!(f, "n_src_words={}", self.n_src_words)
    }
}

/// Parse `src\ttgt\tscore` lines written by [`RetrievalIndex::induce`].
pub fn read_induction(input: impl BufRead) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<induction>", e))?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let row_err = |m: String| Error::Row { line: i + 1, message: m };
        if parts.len() != 3 {
            return Err(row_err(format!("expected 3 fields, found {}", parts.len())));
        }
        let score = parts[2]
            .parse()
            .map_err(|_| row_err(format!("bad score {:?}", parts[2])))?;
        out.push((parts[0].to_string(), parts[1].to_string(), score));
    }
    Ok(out)
}
