//! In-process federated learning simulator for imbalanced tabular
//! classification.
//!
//! The crate wires together, end to end:
//!
//! - a small define-by-run reverse-mode autodiff engine ([`autodiff`]);
//! - a transformer-encoder tabular classifier with per-feature token
//!   embeddings and multi-head self-attention ([`model`]);
//! - class-weighted NLL / cross-entropy / focal objectives plus the FedProx
//!   proximal penalty ([`loss`]);
//! - a communication-round engine with performance-based or random client
//!   selection, a round-varying proximal coefficient, and sample-size
//!   weighted aggregation ([`federation`]);
//! - approximate homomorphic encryption of parameter vectors (RLWE,
//!   coefficient-encoded, addition and plaintext-scalar multiplication)
//!   so the server can aggregate without seeing individual updates
//!   ([`secure`]);
//! - synthetic non-IID imbalanced multi-client data generation and CSV
//!   ingestion ([`data`]);
//! - integrated-gradients attributions with completeness auditing and
//!   attention-score reports ([`explain`]);
//! - minority-class precision/recall/F1 ([`metrics`]);
//! - a reproducible experiment runner behind the `fedsim` binary
//!   ([`runner`]).
//!
//! # Security warning
//!
//! The encryption layer runs at **toy parameters** (ring degree 1024, a
//! 59-bit modulus) and exists to demonstrate the aggregation protocol, not
//! to protect real data. The protocol itself also distributes the secret
//! key to every participant, so any client can decrypt any other client's
//! update. Do not reuse this code as deployable cryptography.
//!
//! # Quick start
//!
//! See the `examples/` directory for one runnable example per capability,
//! or the `fedsim` binary (`generate-data`, `train`, `compare`, `explain`)
//! for file-based experiment runs.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod explain;
pub mod federation;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod secure;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParameterVector, Tensor};
