//! Virtual-imaging-trial bench for dose-parameterized chest-CT classification.
//!
//! The crate generates synthetic CT-like volumes with voxel-level disease
//! ground truth ([`phantom`]), preprocesses them ([`volume`]), trains and
//! evaluates a small 3D residual CNN from scratch ([`model`]), and reproduces
//! a patient-level ROC methodology with DeLong confidence intervals and
//! dose/extent stratification ([`metrics`], [`trial`]).
//!
//! Everything is deterministic under a single seed: generation, splits,
//! weight init, shuffling, dropout and noise all derive independent streams
//! from it via [`rng::derive_rng`].

pub mod aggregate;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod trial;
pub mod volume;

pub use aggregate::SliceScores;
pub use metrics::{RocResult, ScoredLabels};
pub use model::{ModelParams, TrainConfig};
pub use phantom::{CaseRecord, Label, Manifest, NoiseModel, PhantomSpec};
pub use trial::{CaseScore, EvalConfig, StratumReport};
pub use volume::{BoundingBox, Domain, Mask3D, Volume3D};

/// Version string recorded in generated manifests.
pub const GENERATOR_VERSION: &str = env!("CARGO_PKG_VERSION");
