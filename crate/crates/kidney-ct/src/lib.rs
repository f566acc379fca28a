//! CT kidney image classification pipeline.
//!
//! Everything needed to reproduce the workflow end to end: scanning a
//! class-per-directory CT corpus into a manifest, deterministic
//! augmentation, four transfer-learning backbone families plus a
//! feature-concatenation ensemble, a seeded training loop with early
//! stopping, LIME-style local explanations, and an evaluation/report
//! engine producing the usual multi-class metrics.
//!
//! Start with the runnable examples:
//!
//! ```bash
//! cargo run --example dataset_split -p kidney-ct
//! cargo run --example train_backbone -p kidney-ct
//! cargo run --example train_ensemble -p kidney-ct
//! cargo run --example evaluate_model -p kidney-ct
//! cargo run --example explain_prediction -p kidney-ct
//! ```
//!
//! or the `kidney-ct` binary, which drives the same library code via
//! `prepare`, `fixture`, `train`, `evaluate`, `explain`, and `report`
//! subcommands.

pub mod augment;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod fixture;
pub mod lime;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod persist;
pub mod plot;
pub mod report;
pub mod seeding;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
