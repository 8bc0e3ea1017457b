//! Compositional prototype networks for few-shot classification.
//!
//! The model operates on precomputed feature embeddings. Base classes are
//! used to learn a bank of per-attribute component prototypes; novel classes
//! are recognized by composing those components according to class attribute
//! scores, optionally fused with the visual prototype (support-set mean)
//! through a learned adaptive gate. Classification is cosine softmax with a
//! learnable temperature, evaluated episodically (N-way K-shot).
//!
//! The crate is examples-first. Each major capability has a runnable
//! example under `examples/`:
//!
//! - `cargo run --example grad_check` verifies every analytic gradient
//!   against central finite differences.
//! - `cargo run --example sample_episodes` shows seeded, stream-addressable
//!   episode sampling.
//! - `cargo run --example synthesize_dataset` generates a synthetic corpus
//!   with known ground truth and writes the on-disk artifacts.
//! - `cargo run --example train_and_evaluate` runs the full two-stage
//!   pipeline (pretrain, meta-train, evaluate) in memory.
//! - `cargo run --example ablation_grid` reproduces the prototype-variant
//!   and gate-input ablations.
//! - `cargo run --example export_visualization` dumps query and prototype
//!   vectors for external projection tools.
//! - `cargo run --example custom_dataset_files` builds the binary embedding,
//!   attribute CSV, and split files for your own data.
//!
//! The same functionality is exposed as a CLI (`cargo run -- <subcommand>`);
//! see the README for the command reference.
//!
//! Determinism is a hard guarantee: every stochastic routine takes an
//! explicit seed, all randomness flows through [`episodes::RngStream`], and
//! repeated runs produce byte-identical artifacts.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod episodes;
pub mod eval;
pub mod gradcore;
pub mod model;
pub mod synthgen;
pub mod training;

pub use config::RunConfig;
pub use dataio::{AttributeLevel, AttributeTable, DatasetBundle, EmbeddingTable, SplitSpec};
pub use episodes::{Episode, EpisodeSpec, RngStream};
pub use eval::{AblationTable, EvalReport};
pub use gradcore::{Matrix, Vector};
pub use model::{CpnParams, GenInputMode, Variant};
pub use synthgen::{GroundTruth, SynthConfig};
pub use training::{SgdConfig, TrainLog};
