//! De-confounding representation learning (DRL) for counterfactual
//! inference under a continuous treatment.
//!
//! The crate bundles everything needed to run the method end to end: a small
//! reverse-mode autodiff engine ([`autodiff`]), MLPs and Adam ([`nn`]), the
//! adversarial model itself ([`drl`]), synthetic scenarios with analytic
//! ground truth ([`synthgen`]), correlation and MTEF metrics ([`metrics`]),
//! reweighting baselines ([`baselines`]) and experiment plumbing
//! ([`harness`]).

pub mod autodiff;
pub mod baselines;
pub mod dataset;
pub mod drl;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod synthgen;
pub mod tensor;

pub use dataset::{Dataset, OutcomeKind};
pub use error::{Error, Result};
pub use tensor::Tensor;
