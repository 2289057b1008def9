//! Two-stage Bayesian propensity score analysis (BPSA).
//!
//! The pipeline samples a posterior over logistic propensity-score
//! coefficients, turns each draw into a study *design* (strata labels or
//! per-unit weights), estimates the treatment effect conditional on every
//! design, and pools the conditional estimates with multiple-imputation
//! combining rules. The pooled variance splits into a between-design part
//! (design uncertainty) and a within-design part (analysis uncertainty);
//! their ratio is reported as `prop_du`.
//!
//! Module map:
//!
//! * [`data`]: datasets, CSV I/O and the simulation data generator.
//! * [`ps_model`]: logistic MLE, random-walk Metropolis posterior sampling
//!   and propensity prediction.
//! * [`design`]: stratification, nearest-neighbour and caliper matching,
//!   inverse-probability weights.
//! * [`analysis`]: conditional effect estimators and their variances.
//! * [`combine`]: between/within pooling and intervals.
//! * [`montecarlo`]: BPSA/PSA pipelines and the replicate simulation study.
//! * [`cli`]: the `bpsa` command-line front end.
//!
//! The design stage never sees the outcome: every design-stage function
//! takes a [`data::TreatmentData`] (covariates and treatment only), which a
//! [`data::Dataset`] hands out without its outcome vector.

pub mod analysis;
pub mod cli;
pub mod combine;
pub mod data;
pub mod design;
pub mod error;
pub mod linalg;
pub mod montecarlo;
pub mod ps_model;
pub mod rng;

pub use error::{Error, Result};
