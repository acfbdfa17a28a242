//! Relational-knowledge tracing for small decoder-only transformers.
//!
//! The crate decomposes a model's residual stream into per-head and
//! per-source-token contributions, trains linear probes on those
//! contributions for few-shot relation classification, and attributes
//! probe predictions back to heads and tokens (HeadScore/TokenScore). A
//! synthetic corpus generator and a planted-circuit model builder provide
//! ground truth for end-to-end verification, and the analysis layer adds
//! classification reports, lexical-alignment metrics, and correlation
//! studies against external relation statistics.

pub mod analysis;
pub mod attribution;
pub mod cli;
pub mod container;
pub mod corpus;
pub mod error;
pub mod model;
pub mod numerics;
pub mod probing;
pub mod tracing;

pub use error::{Error, Result};
