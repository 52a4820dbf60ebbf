//! Population-level evaluation of predicted perturbation responses.
//!
//! Every perturbation λ contributes observed perturbed cells, an equally sized
//! set of matched controls and predicted cells. Expression accuracy is judged
//! on pseudobulk shifts against the shared control mean; differential
//! expression is judged by running the same rank-sum pipeline on observed and
//! predicted cells and comparing the outcomes.

pub mod metrics;
mod report;
pub mod stats;

pub use metrics::{DePattern, DeResult, Distance};
pub use report::{evaluate, EvalConfig, MetricReport, MetricSummary, PerturbationGroup, PerturbationScores};
