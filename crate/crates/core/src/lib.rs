//! Free-energy based selection of pretraining checkpoints.
//!
//! Small MLPs are pretrained with SGD on synthetic tasks; each checkpoint's
//! localized free energy is estimated with an SGLD-based WBIC estimator and
//! checkpoints are ranked by the asymptotic free-energy criterion. Transfer
//! protocols, Gibbs/Bayes error diagnostics and an experiment harness sit
//! on top.

pub mod bayes_diag;
pub mod error;
pub mod free_energy;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod pretrain;
pub mod quadrature;
pub mod registry;
pub mod selection;
pub mod surfaces;
pub mod synth;
pub mod transfer;

pub use error::{Error, Result};
