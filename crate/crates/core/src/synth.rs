//! Synthetic bilingual data: a random rotation of Gaussian unit vectors, with
//! optional noise, and disjoint seed / test dictionaries pairing `s{i}` with
//! `t{i}`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::embio::{save_vec_file, EmbeddingTable};
use crate::error::{Error, Result};
use crate::lexicon::SeedLexicon;
use crate::mapping::HouseholderChain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Distortion {
    /// The same noise level for every word.
    #[default]
    None,
    /// Each word's noise level is scaled by a factor drawn from U(0, 2).
    PerWordJitter,
}

impl std::str::FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Distortion::None),
            "per-word-jitter" => Ok(Distortion::PerWordJitter),
            other => Err(Error::Config(format!(
                "unknown distortion {other:?} (expected none or per-word-jitter)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub noise_sigma: f64,
    pub seed_pairs: usize,
    pub test_pairs: usize,
    pub rng_seed: u64,
    pub distortion: Distortion,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            d: 32,
            noise_sigma: 0.0,
            seed_pairs: 200,
            test_pairs: 200,
            rng_seed: 0,
            distortion: Distortion::None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config("n and d must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.seed_pairs + self.test_pairs > self.n {
            return Err(Error::Config(format!(
                "seed_pairs + test_pairs = {} exceeds n = {}",
                self.seed_pairs + self.test_pairs,
                self.n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub src: EmbeddingTable,
    pub tgt: EmbeddingTable,
    pub seed: SeedLexicon,
    pub test: SeedLexicon,
    /// The rotation with `y_i ≈ Q x_i`.
    pub rotation: Array2<f64>,
}

/// Paths written by [`SynthData::write`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthFiles {
    pub src_vec: PathBuf,
    pub tgt_vec: PathBuf,
    pub train_dict: PathBuf,
    pub test_dict: PathBuf,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            src_vec: dir.join("src.vec"),
            tgt_vec: dir.join("tgt.vec"),
            train_dict: dir.join("train.dict"),
            test_dict: dir.join("test.dict"),
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let (n, d) = (spec.n, spec.d);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let mut x = Array2::<f64>::zeros((n, d));
    for mut row in x.rows_mut() {
        loop {
            row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-6 {
                row /= norm;
                break;
            }
        }
    }

    // an even number of reflections keeps det(Q) = +1
    let q = HouseholderChain::random(d + d % 2, d, &mut rng).matrix();
    let jitter = Uniform::new(0.0, 2.0).expect("valid range");
    let mut y = x.dot(&q.t());
    for mut row in y.rows_mut() {
        let scale = match spec.distortion {
            Distortion::None => spec.noise_sigma,
            Distortion::PerWordJitter => spec.noise_sigma * jitter.sample(&mut rng),
        };
        let g: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        row.scaled_add(scale, &g);
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0) {
            return Err(Error::Numeric("noisy target vector collapsed to zero".into()));
        }
        row /= norm;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let seed = SeedLexicon::from_pairs(order[..spec.seed_pairs].iter().map(|&i| (i, i)));
    let test = SeedLexicon::from_pairs(
        order[spec.seed_pairs..spec.seed_pairs + spec.test_pairs]
            .iter()
            .map(|&i| (i, i)),
    );

    let src = EmbeddingTable::new((0..n).map(|i| format!("s{i}")).collect(), x)?;
    let tgt = EmbeddingTable::new((0..n).map(|i| format!("t{i}")).collect(), y)?;
    Ok(SynthData {
        src,
        tgt,
        seed,
        test,
        rotation: q,
    })
}

impl SynthData {
    /// Write `src.vec`, `tgt.vec`, `train.dict` and `test.dict` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SynthFiles> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SynthFiles::in_dir(dir);
        save_vec_file(&self.src, &files.src_vec)?;
        save_vec_file(&self.tgt, &files.tgt_vec)?;
        for (lex, path) in [(&self.seed, &files.train_dict), (&self.test, &files.test_dict)] {
            let mut buf = Vec::new();
            lex.write(&self.src, &self.tgt, &mut buf).map_err(|e| Error::io(path, e))?;
            fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        }
        Ok(files)
    }
}
