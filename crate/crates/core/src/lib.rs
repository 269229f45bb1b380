//! Binary knowledge graph embeddings.
//!
//! Entities and relations are represented as `k`-bit codes in `{±1}^k`.
//! A triple `(h, r, t)` is scored by `(h ∘ r)ᵀ t`, computed with a three-way
//! XOR popcount, and the codes are learned directly by discrete coordinate
//! descent with soft balance/decorrelation penalties.
//!
//! Module map:
//!
//! - [`data`]: triple files, vocabularies, filter index, dataset bundles.
//! - [`bitpack`]: packed ±1 code matrices and the popcount scoring kernels.
//! - [`linalg`]: small dense linear algebra for the auxiliary subproblem.
//! - [`learner`]: the discrete learner (objective, sampling, DCD, training loop).
//! - [`baselines`]: continuous TransE / DistMult trainers.
//! - [`quantize`]: sign, equal-interval and Lloyd-Max post-hoc hashing.
//! - [`eval`]: filtered ranking, metrics and memory accounting.
//! - [`planted`]: synthetic datasets generated from ground-truth codes.

pub mod baselines;
pub mod bitpack;
pub mod data;
pub mod eval;
pub mod fileio;
pub mod learner;
pub mod linalg;
pub mod par;
pub mod planted;
pub mod quantize;

pub use bitpack::{BinaryCodeMatrix, PackedCode};
pub use data::{Dataset, FilterIndex, Split, Triple, TripleSet, Vocabulary};
pub use eval::{EvalConfig, MetricsReport, RankRecord, Scorer, TiePolicy};
pub use learner::{AuxiliaryParams, ModelParams, TrainConfig, TrainState};
pub use par::Exec;
