//! Losses, negative sampling, analytic gradients, Adam and the outer
//! self-learning loop.

mod adam;
mod augment;
pub mod csls;
mod grad;
mod loss;
mod negatives;
mod trainer;

pub use adam::{adam_update, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use augment::{augment_dictionary, mutual_pairs, AugmentReport};
pub use csls::{csls_penalties, csls_penalties_blocked, csls_score};
pub use grad::{gradients, loss_and_gradients, total_loss, LossWeights, ModelGrads, Penalties, Tables, BLOCK_NAMES};
pub use loss::{log_sigmoid, mse_loss, rank_loss, softplus};
pub use negatives::{sample_negatives, sample_negatives_with_index, NegativeSet, Negatives};
pub use trainer::{read_history, train, write_history, EpochRecord, TrainInputs, TrainObserver, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::Activation;

/// Hyperparameters of the training procedure.
///
/// The sampled quantities (`k_hard`, `k_rand`, `activation`, `learning_rate`,
/// the thresholds and the loss weights) have a recommended search space;
/// values outside it are accepted with a warning from [`TrainConfig::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k_hard: usize,
    pub k_rand: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub tau_src: f64,
    pub tau_tgt: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Outer self-learning iterations.
    pub iterations: usize,
    /// Epochs per iteration, before early stopping.
    pub epochs: usize,
    pub patience: usize,
    pub csls_k: usize,
    /// Most frequent words per side considered for dictionary augmentation.
    pub augment_pool: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub self_learning: bool,
    /// Reflectors per chain; `None` uses the embedding dimension.
    pub n_reflectors: Option<usize>,
    /// Fraction of seed source words held out for early stopping.
    pub val_fraction: f64,
    /// Restrict hard-negative candidates to the most frequent targets.
    pub hard_pool: Option<usize>,
    /// Cap on neighbors averaged into a contextual vector.
    pub max_neighbors: Option<usize>,
    /// Keep the target adapter and chain at their initial values.
    pub freeze_target: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_hard: 128,
            k_rand: 128,
            activation: Activation::Tanh,
            learning_rate: 0.002,
            tau_src: 0.9,
            tau_tgt: 0.9,
            lambda1: 1.0,
            lambda2: 0.01,
            iterations: 5,
            epochs: 150,
            patience: 10,
            csls_k: 10,
            augment_pool: 15_000,
            batch_size: 512,
            rng_seed: 0,
            self_learning: true,
            n_reflectors: None,
            val_fraction: 0.1,
            hard_pool: None,
            max_neighbors: None,
            freeze_target: false,
        }
    }
}

const NEGATIVE_CHOICES: [usize; 4] = [64, 128, 192, 256];

impl TrainConfig {
    /// Rejects unusable values; returns warnings for values outside the
    /// recommended search space.
    pub fn validate(&self) -> Result<Vec<String>> {
        let err = |m: String| Err(Error::Config(m));
        if self.k_hard + self.k_rand == 0 {
            return err("at least one negative sample is required".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, tau) in [("tau_src", self.tau_src), ("tau_tgt", self.tau_tgt)] {
            if !(tau > 0.0 && tau < 1.0) {
                return err(format!("{name} must lie in (0, 1), got {tau}"));
            }
        }
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(l >= 0.0 && l.is_finite()) {
                return err(format!("{name} must be non-negative, got {l}"));
            }
        }
        for (name, v) in [
            ("iterations", self.iterations),
            ("epochs", self.epochs),
            ("patience", self.patience),
            ("csls_k", self.csls_k),
            ("augment_pool", self.augment_pool),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.n_reflectors == Some(0) || self.hard_pool == Some(0) || self.max_neighbors == Some(0) {
            return err("n_reflectors, hard_pool and max_neighbors must be positive when set".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }

        let mut warnings = Vec::new();
        for (name, k) in [("k_hard", self.k_hard), ("k_rand", self.k_rand)] {
            if !NEGATIVE_CHOICES.contains(&k) {
                warnings.push(format!("{name}={k} is outside {{64, 128, 192, 256}}"));
            }
        }
        let ranges = [
            ("learning_rate", self.learning_rate, 0.001, 0.003),
            ("tau_src", self.tau_src, 0.7, 0.99),
            ("tau_tgt", self.tau_tgt, 0.7, 0.99),
            ("lambda1", self.lambda1, 0.5, 2.5),
            ("lambda2", self.lambda2, 0.001, 0.1),
        ];
        for (name, v, lo, hi) in ranges {
            if !(lo..=hi).contains(&v) {
                warnings.push(format!("{name}={v} is outside [{lo}, {hi}]"));
            }
        }
        Ok(warnings)
    }

    /// Number of outer iterations actually run.
    pub fn effective_iterations(&self) -> usize {
        if self.self_learning {
            self.iterations
        } else {
            1
        }
    }
}
