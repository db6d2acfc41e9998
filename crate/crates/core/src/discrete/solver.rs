use nalgebra::{DMatrix, DVector};

use super::SolverConfig;
use crate::error::Error;

pub(crate) struct NewtonOutcome {
    pub z: Vec<f64>,
    pub iters: usize,
    pub residual: f64,
}

pub(crate) enum NewtonFailure {
    Diverged { iters: usize, residual: f64 },
    Singular,
    Eval(Error),
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Newton's method on `r(z) = 0` given residual and Jacobian.
///
/// Converges when `|r|_inf <= newton_tol`, after which the last Newton
/// correction is still applied. An update at the roundoff level
/// with a residual within a factor 100 of the tolerance is also accepted.
pub(crate) fn newton<F>(mut f: F, z0: Vec<f64>, cfg: &SolverConfig) -> Result<NewtonOutcome, NewtonFailure>
where
    F: FnMut(&[f64]) -> crate::error::Result<(Vec<f64>, DMatrix<f64>)>,
{
    let mut z = z0;
    let mut residual = f64::INFINITY;
    for iter in 0..=cfg.max_iters {
        let (r, jac) = f(&z).map_err(NewtonFailure::Eval)?;
        residual = inf_norm(&r);
        if !residual.is_finite() {
            return Err(NewtonFailure::Diverged {
                iters: iter,
                residual,
            });
        }
        if residual <= cfg.newton_tol {
            // the final correction is free and removes the tolerance-sized bias
            if let Some(dz) = jac.lu().solve(&DVector::from_vec(r)) {
                if dz.iter().all(|x| x.is_finite()) {
                    for (zi, di) in z.iter_mut().zip(dz.iter()) {
                        *zi -= di;
                    }
                }
            }
            return Ok(NewtonOutcome {
                z,
                iters: iter,
                residual,
            });
        }
        if iter == cfg.max_iters {
            break;
        }
        let dz = jac
            .lu()
            .solve(&DVector::from_vec(r))
            .ok_or(NewtonFailure::Singular)?;
        if dz.iter().any(|x| !x.is_finite()) {
            return Err(NewtonFailure::Singular);
        }
        for (zi, di) in z.iter_mut().zip(dz.iter()) {
            *zi -= di;
        }
        let step = inf_norm(dz.as_slice());
        if step <= 4.0 * f64::EPSILON * (1.0 + inf_norm(&z)) && residual <= 100.0 * cfg.newton_tol {
            return Ok(NewtonOutcome {
                z,
                iters: iter + 1,
                residual,
            });
        }
    }
    Err(NewtonFailure::Diverged {
        iters: cfg.max_iters,
        residual,
    })
}
