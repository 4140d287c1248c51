//! Desk-scale laboratory for adversarial training with topology-preserving
//! regularization.
//!
//! Two small MLP classifiers are trained jointly: a standard model on clean
//! batches and an adversarial model on attacked batches, with a regularizer
//! that aligns the adversarial model's neighborhood-relation graph to the
//! standard model's. The crate keeps everything deterministic end to end:
//! seeded streams, fixed iteration orders, and byte-stable metrics.

pub mod attacks;
pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod topology;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Matrix;
