//! Bilingual lexicon induction with personalized adapters and Householder
//! projections.
//!
//! Both languages are mapped into a shared space: each word vector gets a
//! learned offset computed from its contextual neighborhood, is renormalized,
//! and is then rotated by a product of Householder reflections. Training
//! ranks gold translations above hard and random negatives under CSLS, and
//! optionally grows the seed dictionary with mutual nearest neighbors.
//!
//! ```
//! use rapo::mapping::HouseholderChain;
//! use rand::SeedableRng;
//!
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
//! let chain = HouseholderChain::random(4, 4, &mut rng);
//! let p = chain.matrix();
//! let gram = p.dot(&p.t());
//! assert!((gram[[0, 0]] - 1.0).abs() < 1e-12);
//! ```

pub mod config;
pub mod embio;
pub mod error;
pub mod lexicon;
pub mod mapping;
pub mod pipeline;
pub mod procrustes;
pub mod retrieval;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorKind, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/embeddings.md")]
    pub struct Embeddings;
    #[doc = include_str!("../../../book/src/householder.md")]
    pub struct Householder;
    #[doc = include_str!("../../../book/src/adapters.md")]
    pub struct Adapters;
    #[doc = include_str!("../../../book/src/csls.md")]
    pub struct Csls;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/baseline.md")]
    pub struct Baseline;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
