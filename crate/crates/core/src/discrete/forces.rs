//! Discrete forces generated by the discretized generalized potential.
//!
//! With the doubled action written as `S(Q) - S(q) - K_d(q, Q)`, the
//! plus-copy equations on the identities read `D S + f = 0` where the
//! control-point forces are `f_j = -dK_d/dQ_j = dK_d/dq_j`. These are the
//! left/right discrete forces of the classical forced discrete
//! Euler-Lagrange equations (the first and last control point).

use super::lagrangian::DiscreteLagrangian;
use crate::continuous::{Doubled, ForcedModel, GeneralizedPotential, Lagrangian};
use crate::error::{check_dim, Result};
use crate::geometry::Retraction;

/// One vector per control point.
pub type PerPoint = Vec<Vec<f64>>;

pub struct DiscreteForces<'a, M, R> {
    doubled: DiscreteLagrangian<Doubled<'a, M, R>>,
    potential: DiscreteLagrangian<GeneralizedPotential<'a, M, R>>,
}

pub fn discrete_forces_from_k<'a, M: ForcedModel, R: Retraction>(
    ld: &DiscreteLagrangian<Doubled<'a, M, R>>,
) -> DiscreteForces<'a, M, R> {
    let system = ld.lagrangian().system();
    DiscreteForces {
        doubled: ld.clone(),
        potential: ld.with_lagrangian(system.potential()),
    }
}

fn lift_stages<Lg: Lagrangian>(lag: &Lg, stages: &[f64]) -> Vec<f64> {
    let n = lag.physical_dim();
    stages.chunks(n).flat_map(|c| lag.lift(c)).collect()
}

impl<M: ForcedModel, R: Retraction> DiscreteForces<'_, M, R> {
    fn dim(&self) -> usize {
        self.potential.lagrangian().physical_dim()
    }

    /// `(dK_d/dq_j, dK_d/dQ_j)` at the identity lift of physical control
    /// points `stages`.
    pub fn potential_partials(&self, stages: &[f64], h: f64) -> Result<(PerPoint, PerPoint)> {
        let n = self.dim();
        check_dim(self.potential.points() * n, stages.len())?;
        let x = lift_stages(self.potential.lagrangian(), stages);
        let g = self.potential.action_gradient(&x, h)?;
        let (mut dq, mut dbq) = (Vec::new(), Vec::new());
        for block in g.chunks(2 * n) {
            dq.push(block[..n].to_vec());
            dbq.push(block[n..].to_vec());
        }
        Ok((dq, dbq))
    }

    /// Control-point forces `f_j = -dK_d/dQ_j` on the identities.
    pub fn stage_forces(&self, stages: &[f64], h: f64) -> Result<Vec<Vec<f64>>> {
        let (_, dbq) = self.potential_partials(stages, h)?;
        Ok(dbq
            .into_iter()
            .map(|f| f.into_iter().map(|x| -x).collect())
            .collect())
    }

    fn physical_stages(&self, q0: &[f64], q1: &[f64], h: f64) -> Result<Vec<f64>> {
        let lag = self.doubled.lagrangian();
        let x = self.doubled.stages(&lag.lift(q0), &lag.lift(q1), h)?;
        Ok(x.chunks(2 * self.dim()).flat_map(|c| lag.project(c).to_vec()).collect())
    }

    /// Left discrete force `f^-(q0, q1)`.
    pub fn minus(&self, q0: &[f64], q1: &[f64], h: f64) -> Result<Vec<f64>> {
        let stages = self.physical_stages(q0, q1, h)?;
        Ok(self.stage_forces(&stages, h)?.swap_remove(0))
    }

    /// Right discrete force `f^+(q0, q1)`.
    pub fn plus(&self, q0: &[f64], q1: &[f64], h: f64) -> Result<Vec<f64>> {
        let stages = self.physical_stages(q0, q1, h)?;
        Ok(self.stage_forces(&stages, h)?.pop().unwrap_or_default())
    }
}

fn chain_residual(prev: &[Vec<f64>], next: &[Vec<f64>]) -> Vec<f64> {
    let m = prev.len();
    let mut r = Vec::new();
    for g in &prev[1..m - 1] {
        r.extend_from_slice(g);
    }
    r.extend(prev[m - 1].iter().zip(&next[0]).map(|(a, b)| a + b));
    for g in &next[1..m - 1] {
        r.extend_from_slice(g);
    }
    r
}

/// Forced discrete Euler-Lagrange residual over two consecutive steps
/// given by their control points (`prev` ends where `next` starts):
/// `[interior(prev); D_last S(prev) + f^+ + D_0 S(next) + f^-; interior(next)]`.
pub fn forced_del_residual<Lp: Lagrangian, M: ForcedModel, R: Retraction>(
    plain: &DiscreteLagrangian<Lp>,
    forces: &DiscreteForces<'_, M, R>,
    prev: &[f64],
    next: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let n = plain.dim();
    let per_point = |stages: &[f64]| -> Result<Vec<Vec<f64>>> {
        let g = plain.action_gradient(stages, h)?;
        let f = forces.stage_forces(stages, h)?;
        Ok(g.chunks(n)
            .zip(f)
            .map(|(gj, fj)| gj.iter().zip(fj).map(|(a, b)| a + b).collect())
            .collect())
    };
    Ok(chain_residual(&per_point(prev)?, &per_point(next)?))
}

/// Unforced discrete Euler-Lagrange residual of any discrete Lagrangian,
/// laid out like [`forced_del_residual`].
pub fn doubled_del_residual<Lg: Lagrangian>(
    ld: &DiscreteLagrangian<Lg>,
    prev: &[f64],
    next: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let n = ld.dim();
    let split = |stages: &[f64]| -> Result<Vec<Vec<f64>>> {
        Ok(ld.action_gradient(stages, h)?.chunks(n).map(<[f64]>::to_vec).collect())
    };
    Ok(chain_residual(&split(prev)?, &split(next)?))
}
