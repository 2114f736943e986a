//! Multi-label topic classification with transformer cross- and bi-encoders.
//!
//! The crate covers the whole life cycle of a topic classifier: a small
//! differentiable numeric core ([`nncore`]), the shared transformer encoder
//! ([`encoder`]), the scoring architectures ([`models`]), partially labelled
//! datasets and annotation planning ([`data`]), training ([`training`]),
//! evaluation ([`metrics`], [`zeroshot`]), local explanations ([`explain`])
//! and batched serving ([`serve`]). [`cli`] wires them into one binary.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod models;
pub mod nncore;
pub mod serve;
pub mod training;
pub mod zeroshot;

pub use error::{Error, Result};
