//! Federated learning simulation for code vulnerability detection.
//!
//! The crate is organised around the pieces of a federated experiment:
//!
//! - [`numkit`]: dense vectors and matrices, weighted sums, cosine similarity.
//! - [`corpus`]: ingestion, tokenization, vocabulary, cleaning and splitting.
//! - [`partition`]: IID and Dirichlet label-skew client shards.
//! - [`refmodel`]: the compact reference classifier with exact gradients.
//! - [`peft`]: parameter-efficient training schemes (LoRA, LoHa, IA3, prompts).
//! - [`federation`]: client selection, local training, the aggregation
//!   algorithms and the round orchestrator.
//! - [`metrics`]: global and per-category evaluation and comparison tables.
//! - [`synth`]: a seeded synthetic corpus for desk-scale experiments.
//! - [`experiment`]: config files, prepared datasets and run directories.

pub mod corpus;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod numkit;
pub mod partition;
pub mod peft;
pub mod refmodel;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
