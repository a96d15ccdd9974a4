use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::grad::Tables;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::lexicon::SeedLexicon;
use crate::mapping::AlignmentModel;
use crate::retrieval::{build_index, top_k_of, RetrievalIndex};

/// Negative targets for one source word: hard ones first, then random ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Negatives {
    all: Vec<usize>,
    n_hard: usize,
}

impl Negatives {
    pub fn new(hard: Vec<usize>, random: Vec<usize>) -> Self {
        let n_hard = hard.len();
        let mut all = hard;
        all.extend(random);
        Self { all, n_hard }
    }

    pub fn all(&self) -> &[usize] {
        &self.all
    }

    pub fn hard(&self) -> &[usize] {
        &self.all[..self.n_hard]
    }

    pub fn random(&self) -> &[usize] {
        &self.all[self.n_hard..]
    }
}

/// Negatives per training source word, shared by all of that word's pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NegativeSet {
    by_source: BTreeMap<usize, Negatives>,
}

impl NegativeSet {
    pub fn from_map(by_source: BTreeMap<usize, Negatives>) -> Self {
        Self { by_source }
    }

    pub fn get(&self, src: usize) -> Option<&Negatives> {
        self.by_source.get(&src)
    }

    pub fn for_source(&self, src: usize) -> Result<&[usize]> {
        self.by_source
            .get(&src)
            .map(Negatives::all)
            .ok_or_else(|| Error::Shape(format!("no negatives sampled for source {src}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Negatives)> {
        self.by_source.iter().map(|(&s, n)| (s, n))
    }

    pub fn len(&self) -> usize {
        self.by_source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_source.is_empty()
    }
}

/// Map both vocabularies under the current model and sample negatives.
pub fn sample_negatives(
    model: &AlignmentModel,
    lexicon: &SeedLexicon,
    tables: &Tables<'_>,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<NegativeSet> {
    let index = build_index(model, tables, config.csls_k)?;
    sample_negatives_with_index(&index, lexicon, config.k_hard, config.k_rand, config.hard_pool, rng)
}

/// For each source word of `lexicon`: the `k_hard` best-scoring non-gold
/// targets under CSLS (searching only the first `hard_pool` targets when set)
/// and `k_rand` further distinct non-gold targets drawn uniformly from the
/// whole target vocabulary.
pub fn sample_negatives_with_index(
    index: &RetrievalIndex,
    lexicon: &SeedLexicon,
    k_hard: usize,
    k_rand: usize,
    hard_pool: Option<usize>,
    rng: &mut impl Rng,
) -> Result<NegativeSet> {
    if lexicon.is_empty() {
        return Err(Error::EmptyLexicon("cannot sample negatives for an empty lexicon".into()));
    }
    let n_tgt = index.target_count();
    let pool = hard_pool.unwrap_or(n_tgt).min(n_tgt);
    let sources: Vec<usize> = lexicon.sources().collect();
    for &s in &sources {
        let gold = lexicon.gold(s).expect("source from lexicon");
        if pool < k_hard + gold.len() || n_tgt < k_hard + k_rand + gold.len() {
            return Err(Error::Config(format!(
                "target vocabulary of {n_tgt} (hard pool {pool}) cannot supply {k_hard} hard + {k_rand} random negatives beside {} gold targets",
                gold.len()
            )));
        }
    }
    let stream_seed: u64 = rng.random();
    let lists: Vec<(usize, Negatives)> = sources
        .par_iter()
        .map(|&s| {
            let gold = lexicon.gold(s).expect("source from lexicon");
            let hard = hard_negatives(index, s, gold, k_hard, pool);
            let mut local = ChaCha8Rng::seed_from_u64(stream_seed);
            local.set_stream(s as u64);
            let random = random_negatives(&mut local, n_tgt, gold, &hard, k_rand);
            (s, Negatives::new(hard, random))
        })
        .collect();
    Ok(NegativeSet::from_map(lists.into_iter().collect()))
}

fn hard_negatives(index: &RetrievalIndex, src: usize, gold: &BTreeSet<usize>, k_hard: usize, pool: usize) -> Vec<usize> {
    if k_hard == 0 {
        return Vec::new();
    }
    let scores = index.scores(src);
    top_k_of(&scores.as_slice().unwrap()[..pool], k_hard + gold.len())
        .into_iter()
        .map(|(j, _)| j)
        .filter(|j| !gold.contains(j))
        .take(k_hard)
        .collect()
}

fn random_negatives(
    rng: &mut impl Rng,
    n_tgt: usize,
    gold: &BTreeSet<usize>,
    taken: &[usize],
    k_rand: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(k_rand);
    while out.len() < k_rand {
        let j = rng.random_range(0..n_tgt);
        if !gold.contains(&j) && !taken.contains(&j) && !out.contains(&j) {
            out.push(j);
        }
    }
    out
}
