//! Knee osteoarthritis severity toolkit: joint detection, feature-tap and
//! CNN grading, and ordinal metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detect;
mod error;
pub mod imaging;
pub mod metrics;
pub mod minicnn;
pub mod pipeline;
pub mod svm;

pub use error::{Error, Result};
pub use imaging::{BBox, GrayImage};

/// Number of Kellgren–Lawrence grades (0 through 4).
pub const GRADES: usize = 5;
