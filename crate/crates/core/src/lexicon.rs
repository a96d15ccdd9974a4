//! Seed and test dictionaries as index pairs into two embedding tables.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embio::EmbeddingTable;
use crate::error::{Error, Result};

/// Aligned (source, target) index pairs plus the per-source gold sets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedLexicon {
    pairs: Vec<(usize, usize)>,
    gold: BTreeMap<usize, BTreeSet<usize>>,
}

impl SeedLexicon {
    /// Build from pairs, dropping repeats while keeping first-seen order.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut lex = Self::default();
        for (s, t) in pairs {
            lex.insert(s, t);
        }
        lex
    }

    /// Returns false if the pair was already present.
    pub fn insert(&mut self, src: usize, tgt: usize) -> bool {
        let fresh = self.gold.entry(src).or_default().insert(tgt);
        if fresh {
            self.pairs.push((src, tgt));
        }
        fresh
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn gold(&self, src: usize) -> Option<&BTreeSet<usize>> {
        self.gold.get(&src)
    }

    pub fn contains(&self, src: usize, tgt: usize) -> bool {
        self.gold.get(&src).is_some_and(|g| g.contains(&tgt))
    }

    /// Unique source indices in ascending order.
    pub fn sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.gold.keys().copied()
    }

    pub fn source_count(&self) -> usize {
        self.gold.len()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Union with another lexicon; existing pairs keep their position.
    pub fn union(&self, other: &SeedLexicon) -> SeedLexicon {
        let mut out = self.clone();
        for &(s, t) in other.pairs() {
            out.insert(s, t);
        }
        out
    }

    /// Check every index against the table sizes.
    pub fn check_bounds(&self, n_src: usize, n_tgt: usize) -> Result<()> {
        match self.pairs.iter().find(|&&(s, t)| s >= n_src || t >= n_tgt) {
            Some(&(s, t)) => Err(Error::Shape(format!(
                "pair ({s}, {t}) out of range for vocabularies {n_src} x {n_tgt}"
            ))),
            None => Ok(()),
        }
    }

    /// Write as `<src-word> <tgt-word>` lines.
    pub fn write(&self, src: &EmbeddingTable, tgt: &EmbeddingTable, mut out: impl Write) -> std::io::Result<()> {
        for &(s, t) in &self.pairs {
            writeln!(out, "{} {}", src.words()[s], tgt.words()[t])?;
        }
        Ok(())
    }
}

/// Counts reported by [`parse_dictionary`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub kept: usize,
    pub skipped_oov: usize,
    pub skipped_dup: usize,
}

impl fmt::Display for ParseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kept={}", self.kept)?;
        writeln!(f, "skipped_oov={}", self.skipped_oov)?;
        write!(f, "skipped_dup={}", self.skipped_dup)
    }
}

pub fn parse_dictionary(
    path: impl AsRef<Path>,
    src: &EmbeddingTable,
    tgt: &EmbeddingTable,
) -> Result<(SeedLexicon, ParseReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dictionary(BufReader::new(file), src, tgt)
}

/// Parse `<src-word> <tgt-word>` lines. Out-of-vocabulary pairs and repeats
/// are skipped and counted; blank lines are ignored.
pub fn read_dictionary(
    reader: impl BufRead,
    src: &EmbeddingTable,
    tgt: &EmbeddingTable,
) -> Result<(SeedLexicon, ParseReport)> {
    let mut lex = SeedLexicon::default();
    let mut report = ParseReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<dictionary>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(Error::Row {
                line: i + 1,
                message: format!("expected 2 tokens, found {}", toks.len()),
            });
        }
        match (src.index_of(toks[0]), tgt.index_of(toks[1])) {
            (Some(s), Some(t)) => {
                if lex.insert(s, t) {
                    report.kept += 1;
                } else {
                    report.skipped_dup += 1;
                }
            }
            _ => report.skipped_oov += 1,
        }
    }
    Ok((lex, report))
}

/// Disjoint train / validation partition of a lexicon.
#[derive(Debug, Clone, PartialEq)]
pub struct LexiconSplit {
    pub train: SeedLexicon,
    pub validation: SeedLexicon,
    pub split_fraction: f64,
    pub seed: u64,
}

/// Hold out `round(fraction * sources)` unique source words, all of their
/// pairs included, chosen by a seeded shuffle.
pub fn split_lexicon(lex: &SeedLexicon, fraction: f64, seed: u64) -> Result<LexiconSplit> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "split fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let mut sources: Vec<usize> = lex.sources().collect();
    let held = (fraction * sources.len() as f64).round() as usize;
    if held >= sources.len() && !sources.is_empty() {
        return Err(Error::Config(format!(
            "fraction {fraction} leaves no training source words"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sources.shuffle(&mut rng);
    let held: HashSet<usize> = sources[..held].iter().copied().collect();
    let (val, train): (Vec<_>, Vec<_>) = lex.pairs().iter().partition(|(s, _)| held.contains(s));
    Ok(LexiconSplit {
        train: SeedLexicon::from_pairs(train),
        validation: SeedLexicon::from_pairs(val),
        split_fraction: fraction,
        seed,
    })
}
