//! Nearest-neighbour self-normalized importance sampling (SNIS) estimators of
//! the diffusion score over finite datasets.
//!
//! The data distribution is the empirical mixture of Dirac atoms over a
//! [`DatasetStore`]. Under a Gaussian forward process the posterior over atoms
//! is categorical, so the marginal score reduces to a posterior mean. This
//! crate provides:
//!
//! * exact O(N) oracles for the posterior, its mean, the score and the
//!   analytic SNIS covariance ([`oracle`]),
//! * the estimator family, from single-sample Monte Carlo up to the
//!   k-nearest-neighbour proposal ([`estimators`], backed by [`knn`]),
//! * a bias/variance harness and trace-of-covariance bound checks
//!   ([`analysis`]),
//! * a probability-flow ODE sampler driven by any score source ([`sampler`]).
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default) and fall back to plain iterators otherwise. Every random draw
//! comes from a stream derived from a master seed and the work item's
//! coordinates, so results do not depend on the worker count.

pub mod analysis;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod knn;
pub mod math;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod schedules;

pub use dataset::{DatasetStore, SyntheticKind, SyntheticSpec};
pub use error::{Error, Result};
pub use estimators::{KnnProposal, Proposal, ScoreEstimate};
pub use knn::{KnnIndex, NeighborSet};
pub use oracle::{ExactPosterior, Target};
pub use schedules::{DiffusionSchedule, NoiseLevel, NoisePoint, ScheduleKind};
