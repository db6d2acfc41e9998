//! Discrete mechanics: discrete Lagrangians, discrete Euler-Lagrange
//! stepping and the discrete forces induced by the generalized potential.
//!
//! All discrete Lagrangians are represented at the level of their control
//! points: `m` configurations per step (two for the alpha rule, `s` for an
//! `s`-stage Galerkin-Lobatto rule), with the interior ones eliminated by
//! stationarity when a two-point view `L_d(q0, q1)` is needed.

mod forces;
mod integrator;
mod lagrangian;
mod quadrature;
mod solver;

pub use forces::{discrete_forces_from_k, doubled_del_residual, forced_del_residual, DiscreteForces, PerPoint};
pub use integrator::{
    del_step, discrete_legendre_minus, discrete_legendre_plus, initialize_from_state, integrate,
    momentum_step, step_map_jacobian, StepSolution,
};
pub use lagrangian::{alpha_rule, lobatto_galerkin, DiscreteLagrangian, Rule};
pub use quadrature::QuadratureScheme;

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Smallest step accepted by the steppers.
pub const MIN_STEP: f64 = 1e-13;

/// How doubled steps are solved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IdentityMode {
    /// Newton in the full `(q, Q)` space; identity invariance is observed.
    #[default]
    Full,
    /// Newton on the identities `q = Q` directly, using the plus-copy equations.
    Restricted,
}

/// Newton settings. Jacobians are always exact (automatic differentiation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub max_iters: usize,
    pub mode: IdentityMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            newton_tol: 1e-12,
            max_iters: 50,
            mode: IdentityMode::Full,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.newton_tol > 10.0 * f64::EPSILON) {
            return Err(Error::InvalidArgument(
                "newton_tol must exceed 10 machine epsilons".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Two consecutive configurations of a discrete trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePair {
    pub q_prev: Point,
    pub q_curr: Point,
    pub h: f64,
}

pub(crate) fn check_step(h: f64) -> Result<()> {
    if !h.is_finite() || h < MIN_STEP {
        Err(Error::StepTooSmall { h })
    } else {
        Ok(())
    }
}
