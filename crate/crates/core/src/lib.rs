//! Proto-OOD: a detector-agnostic, prototype-based out-of-distribution head.
//!
//! The crate takes per-object query features from any detector and learns
//! to tell in-distribution objects from unknown ones:
//!
//! - [`proto_head`] projects features to embeddings, keeps one prototype per
//!   category and scores objects with the energy `E = exp(cos) · s`.
//! - [`losses`] and [`trainer`] implement the staged training schedule.
//! - [`evaluator`] computes FPR95 and AUROC under two protocols.
//! - [`datasets`] reads and writes feature splits and detection dumps, and
//!   generates synthetic benchmarks.
//!
//! ```
//! use proto_ood::datasets::{generate_synthetic, SyntheticConfig};
//! use proto_ood::evaluator::{evaluate, Protocol};
//! use proto_ood::trainer::{train, TrainConfig};
//!
//! let data = generate_synthetic(&SyntheticConfig {
//!     t: 3, h: 16, per_class: 40, ood_per_cluster: 20, ..Default::default()
//! })?;
//! let cfg = TrainConfig {
//!     epochs: 8, lambda_start: 3, omega_gap: 2, batch_size: 32, d: 6,
//!     projection_hidden: 32, similarity_hidden: 32, learning_rate: 5e-3,
//!     ..Default::default()
//! };
//! let (model, report) = train(&data.train, &cfg)?;
//! assert_eq!(report.epochs.len(), 8);
//!
//! let metrics = evaluate(&model, &data.id_eval, &data.ood_eval, Protocol::B)?.report;
//! assert!((0.0..=1.0).contains(&metrics.auroc));
//! # Ok::<(), proto_ood::Error>(())
//! ```

pub mod cli;
pub mod datasets;
mod error;
pub mod evaluator;
pub mod losses;
pub mod numerics;
pub mod proto_head;
mod textfmt;
pub mod trainer;

pub use error::{Error, Result};
