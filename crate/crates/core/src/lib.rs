//! Cross-cohort graph-guided distillation of MRI teacher embeddings into a fundus student.

pub mod cv;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod prior;
pub mod report;
pub mod student;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
