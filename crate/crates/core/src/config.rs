//! Run configuration: training hyperparameters plus input paths, storage
//! width and parallelism. Stored as JSON; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embio::NumericWidth;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "RAPO_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub src_vec: Option<PathBuf>,
    pub tgt_vec: Option<PathBuf>,
    pub train_dict: Option<PathBuf>,
    pub test_dict: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Words kept from the top of each `.vec` file.
    pub max_vocab: usize,
    pub width: NumericWidth,
    /// Worker threads; `None` defers to the environment, then to rayon.
    pub threads: Option<usize>,
    /// Single-threaded, with wall-clock fields zeroed in the history.
    pub reproducible: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            src_vec: None,
            tgt_vec: None,
            train_dict: None,
            test_dict: None,
            out_dir: None,
            max_vocab: 200_000,
            width: NumericWidth::Double,
            threads: None,
            reproducible: false,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Thread count after applying reproducible mode and the environment.
    pub fn effective_threads(&self) -> Option<usize> {
        if self.reproducible {
            return Some(1);
        }
        self.threads.or_else(threads_from_env)
    }

    /// Checks that the paths a command needs are set and exist, and that the
    /// hyperparameters are usable. Returns range warnings.
    pub fn validate_for_training(&self) -> Result<Vec<String>> {
        for (flag, path) in [
            ("--src-vec", &self.src_vec),
            ("--tgt-vec", &self.tgt_vec),
            ("--train-dict", &self.train_dict),
        ] {
            require_file(flag, path.as_deref())?;
        }
        if let Some(p) = &self.test_dict {
            require_file("--test-dict", Some(p))?;
        }
        if self.out_dir.is_none() {
            return Err(Error::Config("--out-dir is required".into()));
        }
        if self.max_vocab == 0 {
            return Err(Error::Config("max_vocab must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.train.validate()
    }
}

/// `Ok(path)` if `path` is set and names an existing file.
pub fn require_file<'a>(flag: &str, path: Option<&'a Path>) -> Result<&'a Path> {
    match path {
        None => Err(Error::Config(format!("{flag} is required"))),
        Some(p) if !p.is_file() => Err(Error::Config(format!(
            "{flag}: {} does not exist",
            p.display()
        ))),
        Some(p) => Ok(p),
    }
}

fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
}

/// Run `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
