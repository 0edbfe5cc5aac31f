//! Deep Cox survival modelling over coded clinical histories.
//!
//! The crate is organised bottom-up:
//!
//! - [`cohort`]: person records, the cohort file format, vocabularies and
//!   sequence encoding.
//! - [`synth`]: synthetic cohorts with known proportional-hazards truth.
//! - [`autodiff`]: a small reverse-mode differentiation engine.
//! - [`risknet`]: the recurrent network mapping a history and predictors to
//!   a log relative risk.
//! - [`coxtrain`]: case-control partial-likelihood training, ensembles and
//!   baseline survival.
//! - [`cph`]: the classical Cox proportional hazards comparator.
//! - [`metrics`]: discrimination, calibration and explained-variation
//!   metrics, and the 5x2cv F test.
//! - [`explain`]: local hazard ratios from perturbing a reference person.
//! - [`survival`]: Kaplan–Meier and Breslow step functions shared by the above.

pub mod autodiff;
pub mod cohort;
pub mod coxtrain;
pub mod cph;
pub mod explain;
pub mod metrics;
pub mod survival;
pub mod synth;
pub mod risknet;
