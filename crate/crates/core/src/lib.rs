//! Quantification-based estimation of demographic disparity when the
//! sensitive attribute is not observed at deployment time.

pub mod data;
pub mod error;
pub mod fairness;
pub mod ingest;
pub mod linear;
pub mod protocol;
pub mod quantify;
pub mod seeding;

pub use data::{FeatureMatrix, LabelKind, LabeledSample, Prevalence};
pub use error::{Error, Result};
