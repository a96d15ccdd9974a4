use std::io::{BufRead, Write};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::OptimizerState;
use super::augment::augment_dictionary;
use super::grad::{loss_and_gradients, LossWeights, Tables};
use super::negatives::sample_negatives_with_index;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::lexicon::SeedLexicon;
use crate::mapping::AlignmentModel;
use crate::retrieval::build_index;

// Orthogonality is re-checked after every epoch against this bound.
const ORTHO_TOLERANCE: f64 = 1e-8;

/// Everything the training loop reads.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub tables: Tables<'a>,
    pub train: &'a SeedLexicon,
    /// Held-out pairs for early stopping; may be empty.
    pub validation: &'a SeedLexicon,
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    pub val_p1: Option<f64>,
    pub dict_size: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AlignmentModel,
    pub history: Vec<EpochRecord>,
    /// Training lexicon after the last augmentation.
    pub lexicon: SeedLexicon,
    /// Training lexicon size at the start of each iteration.
    pub dict_sizes: Vec<usize>,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) {}

    /// Called with the model whenever validation precision improves.
    fn on_best(&mut self, _model: &AlignmentModel) -> Result<()> {
        Ok(())
    }

    /// Called after augmentation with the model that produced the new pairs
    /// and the lexicon before held-out sources are filtered out.
    fn on_augment(&mut self, _iteration: usize, _model: &AlignmentModel, _augmented: &SeedLexicon) {}
}

impl TrainObserver for () {}

/// Run `config.effective_iterations()` rounds of: mini-batch Adam epochs with
/// negatives re-mined before each epoch and early stopping on validation P@1,
/// followed (with self-learning) by mutual-nearest-neighbor augmentation of
/// the training lexicon.
pub fn train(
    mut model: AlignmentModel,
    inputs: &TrainInputs<'_>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    let tables = &inputs.tables;
    if inputs.train.is_empty() {
        return Err(Error::EmptyLexicon("training lexicon".into()));
    }
    inputs.train.check_bounds(tables.src.len(), tables.tgt.len())?;
    inputs
        .validation
        .check_bounds(tables.src.len(), tables.tgt.len())?;

    let weights = LossWeights {
        lambda1: config.lambda1,
        lambda2: config.lambda2,
    };
    let frozen = [false, config.freeze_target, false, config.freeze_target];
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut opt = OptimizerState::new(&model);
    let mut lexicon = inputs.train.clone();
    let mut history = Vec::new();
    let mut dict_sizes = Vec::new();
    let has_validation = !inputs.validation.is_empty();

    for iteration in 1..=config.effective_iterations() {
        dict_sizes.push(lexicon.len());
        let mut best: Option<(f64, AlignmentModel)> = None;
        let mut stale = 0;
        let mut index = build_index(&model, tables, config.csls_k)?;
        let mut pairs = lexicon.pairs().to_vec();

        for epoch in 1..=config.epochs {
            let start = Instant::now();
            let negatives = sample_negatives_with_index(
                &index,
                &lexicon,
                config.k_hard,
                config.k_rand,
                config.hard_pool,
                &mut rng,
            )?;
            let penalties = index.penalties();
            pairs.shuffle(&mut rng);

            let mut loss_sum = 0.0;
            for batch in pairs.chunks(config.batch_size) {
                let (loss, grads) =
                    loss_and_gradients(&model, tables, batch, &negatives, &penalties, weights)
                        .map_err(|e| batch_failure(e, batch, iteration, epoch))?;
                loss_sum += loss * batch.len() as f64;
                opt.step(&mut model, &grads, config.learning_rate, frozen);
            }
            let loss = loss_sum / pairs.len() as f64;
            check_orthogonality(&model)?;

            index = build_index(&model, tables, config.csls_k)?;
            let val_p1 = if has_validation {
                Some(index.precision_at_k(inputs.validation, 1)?)
            } else {
                None
            };
            let record = EpochRecord {
                iteration,
                epoch,
                loss,
                val_p1,
                dict_size: lexicon.len(),
                wall_ms: start.elapsed().as_millis() as u64,
            };
            debug!("{record:?}");
            observer.on_epoch(&record);
            history.push(record);

            if let Some(p) = val_p1 {
                if best.as_ref().is_none_or(|(b, _)| p > *b) {
                    observer.on_best(&model)?;
                    best = Some((p, model.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        info!("iteration {iteration}: early stop after epoch {epoch}");
                        break;
                    }
                }
            }
        }
        if let Some((p, m)) = best {
            info!("iteration {iteration}: best validation P@1 {p:.4}");
            model = m;
        }

        if config.self_learning {
            let (augmented, report) =
                augment_dictionary(&model, tables, &lexicon, config.augment_pool, config.csls_k)?;
            observer.on_augment(iteration, &model, &augmented);
            // held-out words stay out of the training batches
            let filtered = SeedLexicon::from_pairs(
                augmented
                    .pairs()
                    .iter()
                    .copied()
                    .filter(|&(s, _)| inputs.validation.gold(s).is_none()),
            );
            info!(
                "iteration {iteration}: {} mutual pairs, {} new, dictionary {} -> {}",
                report.candidates,
                report.added,
                lexicon.len(),
                filtered.len()
            );
            lexicon = filtered;
        }
    }

    Ok(TrainOutcome {
        model,
        history,
        lexicon,
        dict_sizes,
    })
}

fn batch_failure(err: Error, batch: &[(usize, usize)], iteration: usize, epoch: usize) -> Error {
    match err {
        Error::Numeric(msg) => {
            let shown: Vec<_> = batch.iter().take(16).collect();
            Error::Numeric(format!(
                "{msg} (iteration {iteration}, epoch {epoch}, batch of {} pairs starting {shown:?})",
                batch.len()
            ))
        }
        other => other,
    }
}

fn check_orthogonality(model: &AlignmentModel) -> Result<()> {
    for (name, chain) in [("source", &model.src_chain), ("target", &model.tgt_chain)] {
        let p = chain.matrix();
        let d = p.nrows();
        let gram = p.dot(&p.t()) - ndarray::Array2::<f64>::eye(d);
        let err = gram.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(err <= ORTHO_TOLERANCE) {
            return Err(Error::Numeric(format!(
                "{name} projection lost orthogonality: ‖PPᵀ - I‖_F = {err:e}"
            )));
        }
    }
    Ok(())
}

/// Write records as JSON lines with keys `iteration`, `epoch`, `loss`,
/// `val_p1` (null without validation), `dict_size` and `wall_ms`. With
/// `wall_clock` false every `wall_ms` is written as 0 so that repeated runs
/// produce identical bytes.
pub fn write_history(records: &[EpochRecord], wall_clock: bool, mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        let mut r = r.clone();
        if !wall_clock {
            r.wall_ms = 0;
        }
        serde_json::to_writer(&mut out, &r)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_history(input: impl BufRead) -> Result<Vec<EpochRecord>> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io("<history>", e))?;
            serde_json::from_str(&line).map_err(|e| Error::Row {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
