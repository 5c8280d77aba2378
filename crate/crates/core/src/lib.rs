//! Global norm-aware pooling (GNAP) in double precision.
//!
//! The crate provides the pooling block and the heads it is compared with
//! ([`layers`]), a finite-difference oracle for the hand-written gradients
//! ([`gradcheck`]), a small trainer on synthetic easy/hard-viewpoint data
//! ([`toy`]), and the verification metrics used to compare heads
//! ([`metrics`]).
//!
//! Kernels parallelize over the batch dimension with rayon when the default
//! `parallel` feature is enabled. Every per-sample reduction runs in a fixed
//! order, so outputs do not depend on the number of worker threads.

pub mod bench;
pub mod certify;
pub mod check;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Matrix, Shape4};
