//! Two-step mSASSS grading for vertebral-unit (VU) radiograph crops.
//!
//! A stage-1 classifier decides whether a VU carries a bony bridge
//! (grade 3); VUs without one go to a stage-2 grader that scores the
//! upper and lower anterior corners in `{0, 1, 2}`. The crate also
//! provides patient-level k-fold splitting, an imbalanced-classification
//! metrics engine and a deterministic synthetic corpus generator.

pub mod backend;
pub mod cascade;
pub mod data;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod split;
pub mod synth;

pub use error::{Error, Result};
