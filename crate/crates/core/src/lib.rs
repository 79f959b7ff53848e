//! Generator-oriented synthetic-image detector.
//!
//! A frozen desk-scale vision transformer carries one low-rank adapter
//! branch per generator family. A learned router pools token features into
//! a descriptor, predicts simplex merge weights, and the weighted branch
//! residuals are injected back into the frozen attention projections.
//! Training runs in two stages: each branch specializes on one generator's
//! data, then branches freeze and only the router and detection head learn
//! on the mixed stream (with low-probability fake-fake fusion for routing
//! supervision). Synthetic generator fingerprints make the whole pipeline
//! verifiable on a laptop.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod head;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod router;
pub mod trainer;

pub use error::{Error, Result};
