//! Monolingual embedding tables: `.vec` parsing, the normalization pipeline,
//! contextual semantic vectors and a small binary container for persistence.
//!
//! # Container layout
//!
//! All integers are little-endian.
//!
//! | offset | size | field                                              |
//! |--------|------|----------------------------------------------------|
//! | 0      | 4    | magic `RPTB`                                       |
//! | 4      | 4    | version (`u32`, currently 1)                       |
//! | 8      | 1    | kind: 0 = embedding table, 1 = contextual table    |
//! | 9      | 1    | numeric width in bytes: 4 (`f32`) or 8 (`f64`)     |
//! | 10     | 2    | reserved, zero                                     |
//! | 12     | 8    | vocab (`u64`)                                      |
//! | 20     | 8    | dim (`u64`)                                        |
//! | 28     | 8    | threshold (`f64`, NaN for embedding tables)        |
//! | 36     | ...  | embedding: per word `u32` byte length + UTF-8      |
//! |        |      | contextual: per row `u64` neighbor count           |
//! | ...    | ...  | `vocab * dim` values, row-major, in the stated width|
//!
//! The file must end exactly after the last value.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of rows per block when building contextual vectors.
pub const DEFAULT_BLOCK: usize = 256;

const TABLE_MAGIC: &[u8; 4] = b"RPTB";
const TABLE_VERSION: u32 = 1;
const KIND_EMBEDDING: u8 = 0;
const KIND_CONTEXTUAL: u8 = 1;

/// Width of floating point values at rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NumericWidth {
    Single,
    #[default]
    Double,
}

impl NumericWidth {
    pub fn bytes(self) -> u8 {
        match self {
            NumericWidth::Single => 4,
            NumericWidth::Double => 8,
        }
    }

    fn from_bytes(b: u8) -> Result<Self> {
        match b {
            4 => Ok(NumericWidth::Single),
            8 => Ok(NumericWidth::Double),
            other => Err(Error::Version(format!("numeric width {other}"))),
        }
    }

    /// Round a value to what this width can store.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            NumericWidth::Single => v as f32 as f64,
            NumericWidth::Double => v,
        }
    }
}

/// Vocabulary plus one embedding row per word, in frequency order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    words: Vec<String>,
    vectors: Array2<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(words: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if words.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "{} words but {} rows",
                words.len(),
                vectors.nrows()
            )));
        }
        if vectors.ncols() == 0 {
            return Err(Error::Shape("dimension must be positive".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Shape(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self {
            words,
            vectors,
            index,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Keep only the first `n` words.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self::new(
            self.words[..n].to_vec(),
            self.vectors.slice(s![..n, ..]).to_owned(),
        )
        .expect("prefix of a valid table is valid")
    }

    /// Round every value to the given storage width.
    pub fn quantized(&self, width: NumericWidth) -> Self {
        let mut out = self.clone();
        out.vectors.mapv_inplace(|v| width.quantize(v));
        out
    }
}

/// Contextual semantic vectors: row `i` is the mean of all rows whose dot
/// product with row `i` exceeds the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualTable {
    vectors: Array2<f64>,
    threshold: f64,
    neighbor_counts: Vec<usize>,
}

impl ContextualTable {
    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn neighbor_counts(&self) -> &[usize] {
        &self.neighbor_counts
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    /// Contextual table whose vectors are the embeddings themselves.
    pub fn identity(table: &EmbeddingTable) -> Self {
        Self {
            vectors: table.vectors.clone(),
            threshold: f64::NAN,
            neighbor_counts: vec![1; table.len()],
        }
    }

    /// Keep only the first `n` rows.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            vectors: self.vectors.slice(s![..n, ..]).to_owned(),
            threshold: self.threshold,
            neighbor_counts: self.neighbor_counts[..n].to_vec(),
        }
    }
}

/// Read a fastText-style `.vec` file, keeping the first `max_vocab` words.
pub fn load_vec_file(path: impl AsRef<Path>, max_vocab: usize) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_vec(BufReader::new(file), max_vocab, &path.display().to_string())
}

/// Parse `.vec` text from any reader. `origin` names the source in errors.
pub fn read_vec(reader: impl BufRead, max_vocab: usize, origin: &str) -> Result<EmbeddingTable> {
    if max_vocab == 0 {
        return Err(Error::Config("max_vocab must be positive".into()));
    }
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(origin, e))?,
        None => return Err(Error::Format(format!("{origin}: empty file"))),
    };
    let (count, dim) = parse_header(&header)?;
    let keep = count.min(max_vocab);

    let mut words = Vec::with_capacity(keep);
    let mut data = Vec::with_capacity(keep * dim);
    let mut seen = HashMap::with_capacity(keep);
    for (offset, line) in lines.enumerate() {
        if words.len() == keep {
            break;
        }
        let line_no = offset + 2;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let word = tokens.next().expect("non-empty line has a token");
        let start = data.len();
        for tok in tokens {
            let v: f64 = tok.parse().map_err(|_| Error::Row {
                line: line_no,
                message: format!("unparseable value {tok:?}"),
            })?;
            data.push(v);
        }
        let arity = data.len() - start;
        if arity != dim {
            return Err(Error::Row {
                line: line_no,
                message: format!("expected {dim} values, found {arity}"),
            });
        }
        if seen.contains_key(word) {
            data.truncate(start);
            continue;
        }
        seen.insert(word.to_string(), words.len());
        words.push(word.to_string());
    }
    if words.is_empty() {
        return Err(Error::EmptyTable(origin.to_string()));
    }
    let vectors = Array2::from_shape_vec((words.len(), dim), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    EmbeddingTable::new(words, vectors)
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 2 {
        return Err(Error::Format(format!(
            "expected \"<count> <dim>\", got {header:?}"
        )));
    }
    let count = toks[0]
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("bad count {:?}", toks[0])))?;
    let dim = toks[1]
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("bad dim {:?}", toks[1])))?;
    if dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    Ok((count, dim))
}

/// Write a table in `.vec` text format. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_vec(table: &EmbeddingTable, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{} {}", table.len(), table.dim())?;
    for (word, row) in table.words.iter().zip(table.vectors.rows()) {
        write!(out, "{word}")?;
        for v in row {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_vec_file(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_vec(table, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Length normalization, column centering and a second length normalization.
pub fn normalize_pipeline(table: &EmbeddingTable) -> Result<EmbeddingTable> {
    let (_, out) = normalize_stages(table)?;
    Ok(out)
}

/// Runs the pipeline and also returns the centered intermediate (after
/// steps 1 and 2), whose column means are zero.
pub fn normalize_stages(table: &EmbeddingTable) -> Result<(Array2<f64>, EmbeddingTable)> {
    let mut m = table.vectors.clone();
    unit_rows(&mut m, &table.words)?;
    let mean = m.mean_axis(Axis(0)).expect("table is non-empty");
    m -= &mean;
    let centered = m.clone();
    unit_rows(&mut m, &table.words)?;
    let out = EmbeddingTable {
        words: table.words.clone(),
        vectors: m,
        index: table.index.clone(),
    };
    Ok((centered, out))
}

// Degenerate threshold for row normalization.
const ZERO_NORM: f64 = 1e-12;

fn unit_rows(m: &mut Array2<f64>, words: &[String]) -> Result<()> {
    for (mut row, word) in m.rows_mut().into_iter().zip(words) {
        let norm = row.dot(&row).sqrt();
        if !(norm > ZERO_NORM) {
            return Err(Error::Degenerate {
                word: word.clone(),
                norm,
            });
        }
        row /= norm;
    }
    Ok(())
}

/// Contextual semantic vectors with the default block size.
pub fn build_contextual_table(
    table: &EmbeddingTable,
    threshold: f64,
    max_neighbors: Option<usize>,
) -> Result<ContextualTable> {
    build_contextual_table_blocked(table, threshold, max_neighbors, DEFAULT_BLOCK)
}

/// Contextual semantic vectors, computed `block` query rows at a time so the
/// similarity buffer never exceeds `block * vocab` entries.
///
/// Row `i` averages every row `j` (itself included) with `<x_j, x_i> > threshold`.
/// With `max_neighbors`, only the most similar qualifiers count, ties going to
/// the lower index.
pub fn build_contextual_table_blocked(
    table: &EmbeddingTable,
    threshold: f64,
    max_neighbors: Option<usize>,
    block: usize,
) -> Result<ContextualTable> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "contextual threshold must lie in (0, 1), got {threshold}"
        )));
    }
    if max_neighbors == Some(0) {
        return Err(Error::Config("max_neighbors must be positive".into()));
    }
    if block == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    let x = table.vectors.view();
    let (n, d) = x.dim();
    let starts: Vec<usize> = (0..n).step_by(block).collect();
    let blocks: Vec<(Array2<f64>, Vec<usize>)> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + block).min(n);
            let sims = x.slice(s![start..end, ..]).dot(&x.t());
            let mut out = Array2::zeros((end - start, d));
            let mut counts = Vec::with_capacity(end - start);
            let mut chosen = Vec::new();
            for (r, sim_row) in sims.rows().into_iter().enumerate() {
                chosen.clear();
                chosen.extend((0..n).filter(|&j| sim_row[j] > threshold));
                if chosen.is_empty() {
                    // Rounding can push a unit row's self-similarity just
                    // under a threshold close to 1.
                    chosen.push(start + r);
                }
                if let Some(cap) = max_neighbors {
                    if chosen.len() > cap {
                        chosen.sort_by(|&a, &b| sim_row[b].total_cmp(&sim_row[a]).then(a.cmp(&b)));
                        chosen.truncate(cap);
                        chosen.sort_unstable();
                    }
                }
                let mut acc = Array1::<f64>::zeros(d);
                for &j in &chosen {
                    acc += &x.row(j);
                }
                acc /= chosen.len() as f64;
                out.row_mut(r).assign(&acc);
                counts.push(chosen.len());
            }
            (out, counts)
        })
        .collect();

    let mut vectors = Array2::zeros((n, d));
    let mut neighbor_counts = Vec::with_capacity(n);
    for (&start, (rows, counts)) in starts.iter().zip(blocks) {
        vectors
            .slice_mut(s![start..start + rows.nrows(), ..])
            .assign(&rows);
        neighbor_counts.extend(counts);
    }
    Ok(ContextualTable {
        vectors,
        threshold,
        neighbor_counts,
    })
}

struct Header {
    kind: u8,
    width: NumericWidth,
    vocab: usize,
    dim: usize,
    threshold: f64,
}

fn write_header(out: &mut impl Write, h: &Header) -> std::io::Result<()> {
    out.write_all(TABLE_MAGIC)?;
    out.write_all(&TABLE_VERSION.to_le_bytes())?;
    out.write_all(&[h.kind, h.width.bytes(), 0, 0])?;
    out.write_all(&(h.vocab as u64).to_le_bytes())?;
    out.write_all(&(h.dim as u64).to_le_bytes())?;
    out.write_all(&h.threshold.to_le_bytes())
}

fn read_header(input: &mut impl Read, expect_kind: u8) -> Result<Header> {
    let mut buf = [0u8; 36];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::Version("truncated header".into()))?;
    if &buf[0..4] != TABLE_MAGIC {
        return Err(Error::Version("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != TABLE_VERSION {
        return Err(Error::Version(format!("version {version}")));
    }
    let kind = buf[8];
    if kind != expect_kind {
        return Err(Error::Version(format!(
            "container kind {kind}, expected {expect_kind}"
        )));
    }
    let width = NumericWidth::from_bytes(buf[9])?;
    let vocab = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(buf[20..28].try_into().unwrap()) as usize;
    let threshold = f64::from_le_bytes(buf[28..36].try_into().unwrap());
    Ok(Header {
        kind,
        width,
        vocab,
        dim,
        threshold,
    })
}

fn write_values(
    out: &mut impl Write,
    m: ArrayView2<'_, f64>,
    width: NumericWidth,
) -> std::io::Result<()> {
    for &v in m.iter() {
        match width {
            NumericWidth::Single => out.write_all(&(v as f32).to_le_bytes())?,
            NumericWidth::Double => out.write_all(&v.to_le_bytes())?,
        }
    }
    Ok(())
}

fn read_values(input: &mut impl Read, h: &Header) -> Result<Array2<f64>> {
    let w = h.width.bytes() as usize;
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<table>", e))?;
    let expected = h.vocab * h.dim * w;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "header declares {} x {} values ({} bytes), payload has {} bytes",
            h.vocab,
            h.dim,
            expected,
            bytes.len()
        )));
    }
    let values: Vec<f64> = match h.width {
        NumericWidth::Single => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        NumericWidth::Double => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Array2::from_shape_vec((h.vocab, h.dim), values).map_err(|e| Error::Shape(e.to_string()))
}

pub fn write_table(table: &EmbeddingTable, width: NumericWidth, mut out: impl Write) -> std::io::Result<()> {
    write_header(
        &mut out,
        &Header {
            kind: KIND_EMBEDDING,
            width,
            vocab: table.len(),
            dim: table.dim(),
            threshold: f64::NAN,
        },
    )?;
    for w in &table.words {
        out.write_all(&(w.len() as u32).to_le_bytes())?;
        out.write_all(w.as_bytes())?;
    }
    write_values(&mut out, table.vectors(), width)
}

pub fn read_table(mut input: impl Read) -> Result<EmbeddingTable> {
    let h = read_header(&mut input, KIND_EMBEDDING)?;
    if h.dim == 0 {
        return Err(Error::Shape("dim must be positive".into()));
    }
    let mut words = Vec::with_capacity(h.vocab);
    for _ in 0..h.vocab {
        let mut len = [0u8; 4];
        input
            .read_exact(&mut len)
            .map_err(|_| Error::Shape("truncated word list".into()))?;
        let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
        input
            .read_exact(&mut buf)
            .map_err(|_| Error::Shape("truncated word list".into()))?;
        words.push(String::from_utf8(buf).map_err(|e| Error::Shape(e.to_string()))?);
    }
    let vectors = read_values(&mut input, &h)?;
    EmbeddingTable::new(words, vectors)
}

pub fn write_contextual(
    table: &ContextualTable,
    width: NumericWidth,
    mut out: impl Write,
) -> std::io::Result<()> {
    write_header(
        &mut out,
        &Header {
            kind: KIND_CONTEXTUAL,
            width,
            vocab: table.len(),
            dim: table.vectors.ncols(),
            threshold: table.threshold,
        },
    )?;
    for &c in &table.neighbor_counts {
        out.write_all(&(c as u64).to_le_bytes())?;
    }
    write_values(&mut out, table.vectors(), width)
}

pub fn read_contextual(mut input: impl Read) -> Result<ContextualTable> {
    let h = read_header(&mut input, KIND_CONTEXTUAL)?;
    let mut neighbor_counts = Vec::with_capacity(h.vocab);
    for _ in 0..h.vocab {
        let mut c = [0u8; 8];
        input
            .read_exact(&mut c)
            .map_err(|_| Error::Shape("truncated neighbor counts".into()))?;
        neighbor_counts.push(u64::from_le_bytes(c) as usize);
    }
    let vectors = read_values(&mut input, &h)?;
    debug_assert_eq!(h.kind, KIND_CONTEXTUAL);
    Ok(ContextualTable {
        vectors,
        threshold: h.threshold,
        neighbor_counts,
    })
}

pub fn save_table(table: &EmbeddingTable, width: NumericWidth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_table(table, width, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_table(BufReader::new(file))
}

pub fn save_contextual(
    table: &ContextualTable,
    width: NumericWidth,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_contextual(table, width, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_contextual(path: impl AsRef<Path>) -> Result<ContextualTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_contextual(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn table(words: &[&str], m: Array2<f64>) -> EmbeddingTable {
        EmbeddingTable::new(words.iter().map(|w| w.to_string()).collect(), m).unwrap()
    }

    fn parse(text: &str, max_vocab: usize) -> Result<EmbeddingTable> {
        read_vec(text.as_bytes(), max_vocab, "test")
    }

    #[test]
    fn parses_small_file() {
        let t = parse("3 4\na 1 2 3 4\nb 0 0 0 1\nc 1 1 1 1\n", 200_000).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.dim(), 4);
        assert_eq!(t.words(), ["a", "b", "c"]);
        assert_eq!(t.row(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn trims_to_max_vocab() {
        let mut text = String::from("200001 3\n");
        for i in 0..200_001 {
            text.push_str(&format!("w{i} 0.1 0.2 0.3\n"));
        }
        let t = parse(&text, 200_000).unwrap();
        assert_eq!(t.len(), 200_000);
        assert_eq!(t.words()[199_999], "w199999");
    }

    #[test]
    fn row_arity_error_names_line() {
        let err = parse("2 4\ndog 1 2 3 4\ncat 0.1 0.2\n", 10).unwrap_err();
        match err {
            Error::Row { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_errors() {
        assert!(matches!(parse("3\na 1\n", 10), Err(Error::Format(_))));
        assert!(matches!(parse("x 4\n", 10), Err(Error::Format(_))));
        assert!(matches!(parse("0 4\n", 10), Err(Error::EmptyTable(_))));
    }

    #[test]
    fn duplicates_keep_first() {
        let t = parse("3 2\na 1 0\na 0 1\nb 1 1\n", 10).unwrap();
        assert_eq!(t.words(), ["a", "b"]);
        assert_eq!(t.row(0).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn pipeline_hand_example() {
        let t = table(&["a", "b"], array![[2.0, 0.0], [0.0, 2.0]]);
        let (centered, out) = normalize_stages(&t).unwrap();
        assert_eq!(centered, array![[0.5, -0.5], [-0.5, 0.5]]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for (got, want) in out.vectors().iter().zip([h, -h, -h, h]) {
            assert!((got - want).abs() < 1e-15);
        }
        // input untouched
        assert_eq!(t.row(0).to_vec(), vec![2.0, 0.0]);
    }

    #[test]
    fn pipeline_single_row_is_degenerate() {
        let t = table(&["only"], array![[3.0, 4.0]]);
        match normalize_pipeline(&t) {
            Err(Error::Degenerate { word, .. }) => assert_eq!(word, "only"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pipeline_zero_row_is_degenerate() {
        let t = table(&["a", "z"], array![[1.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(normalize_pipeline(&t), Err(Error::Degenerate { word, .. }) if word == "z"));
    }

    fn three_words() -> EmbeddingTable {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        table(&["e1", "e2", "mid"], array![[1.0, 0.0], [0.0, 1.0], [h, h]])
    }

    #[test]
    fn contextual_self_only() {
        let t = table(&["a", "b"], array![[1.0, 0.0], [0.0, 1.0]]);
        let c = build_contextual_table(&t, 0.5, None).unwrap();
        assert_eq!(c.neighbor_counts(), [1, 1]);
        assert_eq!(c.vectors(), t.vectors());
    }

    #[test]
    fn contextual_hand_enumerated() {
        // dots: e1.e2 = 0, e1.mid = e2.mid = 0.7071
        let t = three_words();
        let c = build_contextual_table(&t, 0.5, None).unwrap();
        assert_eq!(c.neighbor_counts(), [2, 2, 3]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expect = [
            [(1.0 + h) / 2.0, h / 2.0],
            [h / 2.0, (1.0 + h) / 2.0],
            [(1.0 + h) / 3.0, (1.0 + h) / 3.0],
        ];
        for (row, want) in c.vectors().rows().into_iter().zip(expect) {
            assert!((row[0] - want[0]).abs() < 1e-12);
            assert!((row[1] - want[1]).abs() < 1e-12);
        }

        let tight = build_contextual_table(&t, 0.9, None).unwrap();
        assert_eq!(tight.neighbor_counts(), [1, 1, 1]);
        assert_eq!(tight.vectors(), t.vectors());
    }

    #[test]
    fn contextual_cap_keeps_most_similar() {
        let t = three_words();
        let c = build_contextual_table(&t, 0.5, Some(1)).unwrap();
        assert_eq!(c.neighbor_counts(), [1, 1, 1]);
        assert_eq!(c.vectors(), t.vectors());
    }

    #[test]
    fn contextual_threshold_bounds() {
        let t = three_words();
        assert!(matches!(build_contextual_table(&t, 1.0, None), Err(Error::Config(_))));
        assert!(matches!(build_contextual_table(&t, 0.0, None), Err(Error::Config(_))));
        assert!(matches!(build_contextual_table(&t, -0.2, None), Err(Error::Config(_))));
    }

    #[test]
    fn table_round_trip_both_widths() {
        let t = table(
            &["x", "y", "z"],
            array![[0.1, 0.2, 0.3, 0.4], [1.0, -1.0, 0.5, 1e-9], [3.0, 2.0, 1.0, 0.0]],
        );
        let mut buf = Vec::new();
        write_table(&t, NumericWidth::Double, &mut buf).unwrap();
        assert_eq!(read_table(buf.as_slice()).unwrap(), t);

        let mut buf = Vec::new();
        write_table(&t, NumericWidth::Single, &mut buf).unwrap();
        let back = read_table(buf.as_slice()).unwrap();
        assert_eq!(back, t.quantized(NumericWidth::Single));
        assert_eq!(back.words(), t.words());
    }

    #[test]
    fn contextual_round_trip() {
        let c = build_contextual_table(&three_words(), 0.5, None).unwrap();
        let mut buf = Vec::new();
        write_contextual(&c, NumericWidth::Double, &mut buf).unwrap();
        assert_eq!(read_contextual(buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let t = table(&["x", "y"], array![[1.0, 2.0], [3.0, 4.0]]);
        let mut buf = Vec::new();
        write_table(&t, NumericWidth::Double, &mut buf).unwrap();
        // bump declared dim from 2 to 3
        buf[20] = 3;
        assert!(matches!(read_table(buf.as_slice()), Err(Error::Shape(_))));
        let mut buf2 = Vec::new();
        write_table(&t, NumericWidth::Double, &mut buf2).unwrap();
        buf2[4] = 9;
        assert!(matches!(read_table(buf2.as_slice()), Err(Error::Version(_))));
    }

    fn brute_contextual(m: &Array2<f64>, tau: f64) -> Array2<f64> {
        let (n, d) = m.dim();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let mut count = 0.0;
            for j in 0..n {
                let dot: f64 = (0..d).map(|c| m[[i, c]] * m[[j, c]]).sum();
                if dot > tau {
                    for c in 0..d {
                        out[[i, c]] += m[[j, c]];
                    }
                    count += 1.0;
                }
            }
            for c in 0..d {
                out[[i, c]] /= count;
            }
        }
        out
    }

    fn unit_table(raw: Vec<f64>, d: usize) -> EmbeddingTable {
        let n = raw.len() / d;
        let mut m = Array2::from_shape_vec((n, d), raw[..n * d].to_vec()).unwrap();
        for mut r in m.rows_mut() {
            let norm = r.dot(&r).sqrt().max(1e-3);
            r /= norm;
        }
        let words = (0..n).map(|i| format!("w{i}")).collect();
        EmbeddingTable::new(words, m).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn contextual_matches_brute_force(
            raw in proptest::collection::vec(-1.0f64..1.0, 3 * 40..3 * 120),
            tau in 0.05f64..0.98,
        ) {
            let t = unit_table(raw, 3);
            let c = build_contextual_table(&t, tau, None).unwrap();
            let oracle = brute_contextual(&t.vectors().to_owned(), tau);
            for (a, b) in c.vectors().iter().zip(oracle.iter()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            prop_assert!(c.neighbor_counts().iter().all(|&k| k >= 1));
        }

        #[test]
        fn contextual_block_size_independent(
            raw in proptest::collection::vec(-1.0f64..1.0, 4 * 20..4 * 60),
            tau in 0.1f64..0.95,
        ) {
            let t = unit_table(raw, 4);
            let full = build_contextual_table_blocked(&t, tau, None, t.len()).unwrap();
            for b in [1, 7] {
                let c = build_contextual_table_blocked(&t, tau, None, b).unwrap();
                prop_assert_eq!(c.neighbor_counts(), full.neighbor_counts());
                for (a, b) in c.vectors().iter().zip(full.vectors().iter()) {
                    prop_assert!((a - b).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn vec_text_round_trip_preserves_order(
            raw in proptest::collection::vec(-10.0f64..10.0, 2..60),
        ) {
            let n = raw.len() / 2;
            let m = Array2::from_shape_vec((n, 2), raw[..n * 2].to_vec()).unwrap();
            let words: Vec<String> = (0..n).rev().map(|i| format!("tok{i}")).collect();
            let t = EmbeddingTable::new(words, m).unwrap();
            let mut buf = Vec::new();
            write_vec(&t, &mut buf).unwrap();
            let back = read_vec(buf.as_slice(), usize::MAX, "rt").unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
