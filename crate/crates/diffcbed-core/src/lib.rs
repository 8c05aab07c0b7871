//! Batch experimental design for causal discovery on linear-Gaussian SCMs.
//!
//! The library models structural causal models as DAGs with linear mechanisms
//! and Gaussian noise, estimates the expected information gain of a batch of
//! interventions with nested Monte Carlo estimators, and optimizes relaxed
//! design policies over intervention targets and states by gradient ascent.
//!
//! Modules follow the pipeline:
//! - [`scm`]: graphs, mechanisms, interventional sampling and likelihoods
//! - [`prior`]: random environments and prior particle sets
//! - [`posterior`]: particle posteriors (history reweighting, exact
//!   enumeration, bootstrap ensembles)
//! - [`policy`]: relaxed design distributions over targets and states
//! - [`estimator`]: information-gain objectives and their gradients
//! - [`optim`]: Adam ascent over policy parameters
//! - [`metrics`]: structure and distribution recovery metrics
//! - [`acquisition`]: the batch acquisition loop and its artifacts

pub mod acquisition;
pub mod error;
pub mod estimator;
pub mod learn;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod posterior;
pub mod prior;
pub mod rng;
pub mod scm;

pub use error::Error;
