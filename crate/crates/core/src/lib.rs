//! Signalling acute adverse drug reactions from longitudinal patient records
//! with an ensemble of simple study designs.
//!
//! The pipeline has three stages:
//!
//! 1. For every drug family and each of its risk medical events, compute nine
//!    association features ([`measures`]) from self-controlled and
//!    substitute-population comparisons ([`cohort`]) over an immutable
//!    [`store::Dataset`].
//! 2. Train a random forest ([`forest`]) on pairs with known labels, tuning
//!    `mtry` by stratified cross-validated AUC.
//! 3. Score unlabelled pairs, or evaluate the whole procedure with a
//!    leave-one-family-out protocol ([`eval`]).
//!
//! [`synth`] produces datasets with planted ground truth for testing and
//! benchmarking, and [`pipeline`] wires the stages together behind file
//! hand-offs used by the `essd` command-line tool.

pub mod cohort;
pub mod config;
pub mod eval;
pub mod forest;
pub mod fsio;
pub mod measures;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod store;
pub mod synth;

pub use cohort::{CohortIndex, RiskEventSet, SubstituteCohort};
pub use eval::{ConfusionCounts, EvaluationReport, LabeledPair};
pub use forest::{DecisionTree, Forest, TrainingSet};
pub use measures::{FeatureTable, FeatureVector};
pub use store::{Dataset, DrugFamily, EventCodeTree};
