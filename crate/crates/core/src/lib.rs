//! Confidence scores from token log-probabilities, calibration metrics, and
//! a confidence-gated retrieval controller.
//!
//! - [`confidence`]: normalized label confidence and Yes/No self-evaluation.
//! - [`metrics`]: AUROC, equal-mass ECE and bin tables.
//! - [`client`]: chat-completion backends (HTTP, scripted mock, cache).
//! - [`bench`]: datasets, answer matching, evaluation runs and reports.
//! - [`rag`]: adaptive retrieval and threshold sweeps.
//! - [`sandbox`]: toy softmax-policy training under CE, clipped advantage and
//!   preference losses.

pub mod bench;
pub mod client;
pub mod confidence;
pub mod fixed;
pub mod metrics;
pub mod rag;
pub mod sandbox;
