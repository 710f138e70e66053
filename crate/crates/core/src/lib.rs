//! Semi-supervised keypoint estimation with two mean-teacher pairs,
//! a parameter-adversarial loss between the students and triplet
//! uncertainty for pseudo-label selection.

pub mod augment;
pub mod codec;
pub mod data;
pub mod ema;
pub mod error;
pub mod logs;
pub mod metrics;
pub mod losses;
pub mod nn;
pub mod plot;
pub mod pseudo;
pub mod report;
pub mod synth;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
