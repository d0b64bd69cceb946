//! Training and inference for networks that predict *sets*: an unordered,
//! variable-size collection of elements (for example bounding boxes).
//!
//! The model has three output heads: cardinality logits, per-slot element
//! states and permutation logits over all orderings of the output slots.
//! Training alternates a discrete assignment step (Hungarian matching of
//! ground truth to output slots) with a gradient step on the matched loss;
//! inference picks the most likely cardinality and the highest-scoring slots.
//!
//! The crate also ships the two synthetic data generators used by the
//! experiments (colored blob scenes and a subset-sum digit puzzle) and the
//! detection metrics used to evaluate them.

pub mod assignment;
pub mod datagen;
pub mod geom;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;

pub use rng::Rng;
