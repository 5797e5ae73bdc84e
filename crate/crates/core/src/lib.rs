//! Active semi-supervised training with Monte-Carlo dropout pseudo-labels.
//!
//! [`em::Learner`] runs the loop over [`datasets::DataPools`], asking an
//! [`oracle`] for labels of the most uncertain samples. [`experiments`] wraps
//! it into seeded, repeatable runs with JSONL reports.

pub mod datasets;
pub mod em;
pub mod error;
pub mod experiments;
pub mod heap;
pub mod mc;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
