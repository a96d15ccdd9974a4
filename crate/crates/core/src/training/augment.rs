use log::warn;

use super::grad::Tables;
use crate::error::Result;
use crate::lexicon::SeedLexicon;
use crate::mapping::{AlignmentModel, Side};
use crate::retrieval::RetrievalIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentReport {
    /// Mutual nearest pairs found in the pool.
    pub candidates: usize,
    /// Pairs not already in the lexicon.
    pub added: usize,
}

/// Extend `lexicon` with mutual CSLS nearest neighbors among the `pool` most
/// frequent words of each language. Never removes pairs.
pub fn augment_dictionary(
    model: &AlignmentModel,
    tables: &Tables<'_>,
    lexicon: &SeedLexicon,
    pool: usize,
    csls_k: usize,
) -> Result<(SeedLexicon, AugmentReport)> {
    let p_src = clamp_pool(pool, tables.src.len(), "source");
    let p_tgt = clamp_pool(pool, tables.tgt.len(), "target");
    let src_ids: Vec<usize> = (0..p_src).collect();
    let tgt_ids: Vec<usize> = (0..p_tgt).collect();
    let xs = model.forward_map(Side::Source, &src_ids, tables.src, tables.src_ctx)?;
    let ys = model.forward_map(Side::Target, &tgt_ids, tables.tgt, tables.tgt_ctx)?;
    let k = csls_k.min(p_src).min(p_tgt);
    let index = RetrievalIndex::from_mapped(xs, ys, k)?;
    let found = mutual_pairs(&index);
    let mut out = lexicon.clone();
    let added = found.iter().filter(|&&(s, t)| out.insert(s, t)).count();
    Ok((
        out,
        AugmentReport {
            candidates: found.len(),
            added,
        },
    ))
}

fn clamp_pool(pool: usize, vocab: usize, side: &str) -> usize {
    if pool > vocab {
        warn!("augment pool {pool} exceeds {side} vocabulary {vocab}; clamping");
        vocab
    } else {
        pool
    }
}

/// All `(i, j)` where `j` is the CSLS-best target of `i` and `i` the
/// CSLS-best source of `j`. Ties go to the lower index.
pub fn mutual_pairs(index: &RetrievalIndex) -> Vec<(usize, usize)> {
    let fwd = index.best_targets();
    let bwd = index.best_sources();
    fwd.iter()
        .enumerate()
        .filter(|&(i, &j)| bwd[j] == i)
        .map(|(i, &j)| (i, j))
        .collect()
}
