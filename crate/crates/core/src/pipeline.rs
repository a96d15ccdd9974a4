//! End-to-end commands: train, evaluate, induce and the orthogonal baseline.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::embio::{build_contextual_table, load_vec_file, normalize_pipeline, ContextualTable, EmbeddingTable, NumericWidth};
use crate::error::{Error, Result};
use crate::lexicon::{parse_dictionary, split_lexicon, SeedLexicon};
use crate::mapping::{load_checkpoint, save_checkpoint, AlignmentModel, Preprocessing};
use crate::procrustes::{self, ProcrustesFit};
use crate::retrieval::{build_index, EvalReport};
use crate::training::{train, write_history, Tables, TrainInputs, TrainObserver, TrainOutcome};

/// Precision cutoffs reported after training.
pub const REPORT_KS: [usize; 3] = [1, 5, 10];

/// Normalized embeddings and contextual vectors for one language.
#[derive(Debug, Clone)]
pub struct PreparedSide {
    pub table: EmbeddingTable,
    pub ctx: ContextualTable,
}

/// Load, quantize to `width`, normalize and build contextual vectors.
pub fn prepare_side(
    path: &Path,
    max_vocab: usize,
    width: NumericWidth,
    tau: f64,
    max_neighbors: Option<usize>,
) -> Result<PreparedSide> {
    let raw = load_vec_file(path, max_vocab)?.quantized(width);
    let table = normalize_pipeline(&raw)?;
    let ctx = build_contextual_table(&table, tau, max_neighbors)?;
    info!(
        "{}: {} words, dim {}",
        path.display(),
        table.len(),
        table.dim()
    );
    Ok(PreparedSide { table, ctx })
}

/// Load and normalize without contextual vectors.
pub fn prepare_plain(path: &Path, max_vocab: usize, width: NumericWidth) -> Result<EmbeddingTable> {
    normalize_pipeline(&load_vec_file(path, max_vocab)?.quantized(width))
}

fn tables<'a>(src: &'a PreparedSide, tgt: &'a PreparedSide) -> Tables<'a> {
    Tables {
        src: &src.table,
        src_ctx: &src.ctx,
        tgt: &tgt.table,
        tgt_ctx: &tgt.ctx,
    }
}

fn load_lexicon(path: &Path, src: &EmbeddingTable, tgt: &EmbeddingTable) -> Result<SeedLexicon> {
    let (lex, report) = parse_dictionary(path, src, tgt)?;
    if report.skipped_oov > 0 || report.skipped_dup > 0 {
        warn!(
            "{}: kept {}, skipped {} out of vocabulary, {} repeated",
            path.display(),
            report.kept,
            report.skipped_oov,
            report.skipped_dup
        );
    }
    Ok(lex)
}

/// Files written by [`cmd_train`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainArtifacts {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub lexicon: PathBuf,
    pub report: PathBuf,
}

impl TrainArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            config: dir.join("config.json"),
            checkpoint: dir.join("model.ckpt"),
            history: dir.join("history.jsonl"),
            lexicon: dir.join("lexicon.dict"),
            report: dir.join("eval.txt"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub report: Option<EvalReport>,
    pub artifacts: TrainArtifacts,
}

/// Train from files, writing the effective config, checkpoint, history,
/// final lexicon and (with a test dictionary) a precision report.
pub fn cmd_train(config: &RunConfig) -> Result<TrainRun> {
    cmd_train_observed(config, &mut ())
}

/// [`cmd_train`] with hooks into the training loop.
pub fn cmd_train_observed(config: &RunConfig, observer: &mut (dyn TrainObserver + Send)) -> Result<TrainRun> {
    for w in config.validate_for_training()? {
        warn!("{w}");
    }
    let out_dir = config.out_dir.as_deref().expect("validated");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let artifacts = TrainArtifacts::in_dir(out_dir);
    config.save(&artifacts.config)?;

    let tc = &config.train;
    let threads = config.effective_threads();
    crate::config::with_threads(threads, || -> Result<TrainRun> {
        let src = prepare_side(
            config.src_vec.as_deref().expect("validated"),
            config.max_vocab,
            config.width,
            tc.tau_src,
            tc.max_neighbors,
        )?;
        let tgt = prepare_side(
            config.tgt_vec.as_deref().expect("validated"),
            config.max_vocab,
            config.width,
            tc.tau_tgt,
            tc.max_neighbors,
        )?;
        if src.table.dim() != tgt.table.dim() {
            return Err(Error::Shape(format!(
                "source dim {} differs from target dim {}",
                src.table.dim(),
                tgt.table.dim()
            )));
        }
        let seed = load_lexicon(config.train_dict.as_deref().expect("validated"), &src.table, &tgt.table)?;
        let test = config
            .test_dict
            .as_deref()
            .map(|p| load_lexicon(p, &src.table, &tgt.table))
            .transpose()?;
        let split = split_lexicon(&seed, tc.val_fraction, tc.rng_seed)?;

        let d = src.table.dim();
        let mut init_rng = ChaCha8Rng::seed_from_u64(tc.rng_seed);
        init_rng.set_stream(1);
        let model = AlignmentModel::init(d, tc.n_reflectors.unwrap_or(d), tc.activation, &mut init_rng);

        let tables = tables(&src, &tgt);
        let inputs = TrainInputs {
            tables,
            train: &split.train,
            validation: &split.validation,
        };
        let outcome = train(model, &inputs, tc, observer)?;

        let pre = Preprocessing {
            tau_src: tc.tau_src,
            tau_tgt: tc.tau_tgt,
            max_neighbors: tc.max_neighbors,
            max_vocab: config.max_vocab,
        };
        save_checkpoint(&outcome.model, &pre, &artifacts.checkpoint)?;
        write_file(&artifacts.history, |w| write_history(&outcome.history, !config.reproducible, w))?;
        write_file(&artifacts.lexicon, |w| outcome.lexicon.write(&src.table, &tgt.table, w))?;

        let report = match &test {
            Some(test) => {
                let index = build_index(&outcome.model, &tables, tc.csls_k)?;
                let report = index.evaluate(test, &REPORT_KS)?;
                write_file(&artifacts.report, |w| writeln!(w, "{report}"))?;
                Some(report)
            }
            None => None,
        };
        Ok(TrainRun {
            outcome,
            report,
            artifacts: artifacts.clone(),
        })
    })?
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// A checkpoint with both vocabularies prepared the way it was trained.
pub struct LoadedModel {
    pub model: AlignmentModel,
    pub src: PreparedSide,
    pub tgt: PreparedSide,
}

impl LoadedModel {
    pub fn load(checkpoint: &Path, src_vec: &Path, tgt_vec: &Path, width: NumericWidth) -> Result<Self> {
        let (model, pre) = load_checkpoint(checkpoint)?;
        let src = prepare_side(src_vec, pre.max_vocab, width, pre.tau_src, pre.max_neighbors)?;
        let tgt = prepare_side(tgt_vec, pre.max_vocab, width, pre.tau_tgt, pre.max_neighbors)?;
        Ok(Self { model, src, tgt })
    }

    pub fn tables(&self) -> Tables<'_> {
        tables(&self.src, &self.tgt)
    }
}

/// Precision@k for each entry of `ks` on a test dictionary.
pub fn cmd_eval(loaded: &LoadedModel, test_dict: &Path, ks: &[usize], csls_k: usize) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::Config("at least one k is required".into()));
    }
    let test = load_lexicon(test_dict, &loaded.src.table, &loaded.tgt.table)?;
    let index = build_index(&loaded.model, &loaded.tables(), csls_k)?;
    index.evaluate(&test, ks)
}

/// Write `k` translations for each of the first `limit` source words (all
/// when `None`).
pub fn cmd_induce(loaded: &LoadedModel, k: usize, limit: Option<usize>, csls_k: usize, out: impl Write) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let index = build_index(&loaded.model, &loaded.tables(), csls_k)?;
    let n = limit.unwrap_or(usize::MAX).min(index.source_count());
    index.induce(loaded.src.table.words(), loaded.tgt.table.words(), 0..n, k, out)
}

/// Fit the orthogonal baseline on one dictionary and evaluate on another.
pub fn cmd_procrustes(
    src_vec: &Path,
    tgt_vec: &Path,
    train_dict: &Path,
    test_dict: &Path,
    max_vocab: usize,
    csls_k: usize,
) -> Result<(ProcrustesFit, EvalReport)> {
    let src = prepare_plain(src_vec, max_vocab, NumericWidth::Double)?;
    let tgt = prepare_plain(tgt_vec, max_vocab, NumericWidth::Double)?;
    let train = load_lexicon(train_dict, &src, &tgt)?;
    let test = load_lexicon(test_dict, &src, &tgt)?;
    procrustes::evaluate(src.vectors(), tgt.vectors(), &train, &test, csls_k, &REPORT_KS)
}
