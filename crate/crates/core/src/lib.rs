//! Variational integrators for forced Lagrangian systems, built by
//! duplicating the configuration variables.
//!
//! A forced system `(L, F)` is turned into an unforced doubled Lagrangian on
//! pairs `(q, Q)`; discretizing that Lagrangian with an alpha rule or a
//! Galerkin-Lobatto rule gives a symplectic map on the doubled space whose
//! restriction to the identities `q = Q` integrates the forced dynamics.
#![allow(clippy::neg_cmp_op_on_partial_ord)]


pub mod autodiff;
pub mod cli;
pub mod continuous;
pub mod discrete;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod trajectory;

pub use continuous::{ForcedModel, ForcedSystem, Lagrangian};
pub use discrete::{alpha_rule, integrate, lobatto_galerkin, DiscreteLagrangian, IdentityMode, SolverConfig};
pub use error::{Error, Result};
pub use trajectory::TrajectoryRecord;
