//! Weakly supervised grounding of instructional steps in narrated videos.
//!
//! A video, its narrations and the steps of a matching article are encoded
//! jointly; steps are aligned to frames both directly and through the
//! narrations. Training uses narration timestamps plus step pseudo-labels
//! produced by a periodically refreshed teacher.

// Numeric kernels walk several row-aligned buffers at once, and `!(x > 0.0)`
// is the intended way to reject NaN along with non-positive values.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod objective;
pub mod pseudolabel;
pub mod taskselect;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Mat;
