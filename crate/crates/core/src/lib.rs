//! Spectral representation learning for low-rank MDPs.
//!
//! The crate learns factorizations `P(s'|s,a) = phi(s,a)^T mu(s')` of tabular
//! transition kernels with a least-squares spectral objective and uses them
//! for optimistic exploration, pessimistic offline planning and latent
//! behavior cloning. Every stochastic routine is seeded; see [`rng`].

pub mod bc;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod io;
pub mod learner;
pub mod linalg;
pub mod mdp;
pub mod objective;
pub mod offline;
pub mod online;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use mdp::{LowRankMdp, OccupancyMeasure, Policy, Transition, TransitionDataset, ValueFunctions};
