//! Desk-scale laboratory for coarse-to-fine few-shot class-incremental
//! learning: a contrastively trained embedding over coarse labels, a
//! cosine-normalized classifier whose per-session column blocks are learned,
//! normalized, and frozen, the accuracy/forgetting metrics, and an analysis
//! suite that numerically checks the method's stability, plasticity, and
//! weight-growth properties.
//!
//! Numeric core types (`numerics`, `classifier`, `metrics`) are generic over
//! the scalar; the trainers and the protocol run in f64. The aliases below
//! fix the concrete types used throughout the pipeline.

pub mod analysis;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod protocol;
pub mod report;
pub mod rng;

/// Scalar used by the training pipeline.
pub type Scalar = f64;
/// Dense matrix over the pipeline scalar.
pub type Mat = numerics::Mat<Scalar>;
/// Classifier head over the pipeline scalar.
pub type Head = classifier::ClassifierHead<Scalar>;
/// Metric series over the pipeline scalar.
pub type Metrics = metrics::MetricSeries<Scalar>;

pub use error::{Error, Result};
