use nalgebra::DMatrix;

use super::quadrature::QuadratureScheme;
use super::solver::{newton, NewtonFailure};
use super::{check_step, SolverConfig};
use crate::autodiff::{gradient, hessian, Real};
use crate::continuous::Lagrangian;
use crate::error::{check_dim, Error, Result};

/// How the action over one step is approximated.
#[derive(Clone, Debug, PartialEq)]
pub enum Rule {
    /// `h L((1-a) q0 + a q1, (q1 - q0)/h)`
    Alpha(f64),
    /// Degree `s-1` polynomial through control points at the Lobatto nodes,
    /// integrated with the same `s`-point Lobatto rule.
    Galerkin(QuadratureScheme),
}

impl Rule {
    /// Number of control points per step, endpoints included.
    pub fn points(&self) -> usize {
        match self {
            Rule::Alpha(_) => 2,
            Rule::Galerkin(q) => q.stages(),
        }
    }

    /// Relative positions of the control points within a step.
    pub fn nodes(&self) -> Vec<f64> {
        match self {
            Rule::Alpha(_) => vec![0.0, 1.0],
            Rule::Galerkin(q) => q.nodes().to_vec(),
        }
    }
}

/// A discrete Lagrangian built from a continuous one.
///
/// The control-point action `S(x_0, ..., x_{m-1}; h)` is the primary object.
/// The two-point discrete Lagrangian is `L_d(q0, q1) = S` with the interior
/// points at a stationary point of `S` (found by Newton, settings in
/// `inner`).
#[derive(Clone, Debug)]
pub struct DiscreteLagrangian<Lg> {
    lagrangian: Lg,
    rule: Rule,
    order: usize,
    inner: SolverConfig,
}

pub fn alpha_rule<Lg: Lagrangian>(lagrangian: Lg, alpha: f64) -> Result<DiscreteLagrangian<Lg>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let order = if alpha == 0.5 { 2 } else { 1 };
    Ok(DiscreteLagrangian {
        lagrangian,
        rule: Rule::Alpha(alpha),
        order,
        inner: SolverConfig::default(),
    })
}

pub fn lobatto_galerkin<Lg: Lagrangian>(lagrangian: Lg, stages: usize) -> Result<DiscreteLagrangian<Lg>> {
    let scheme = QuadratureScheme::lobatto(stages)?;
    Ok(DiscreteLagrangian {
        lagrangian,
        rule: Rule::Galerkin(scheme),
        order: 2 * stages - 2,
        inner: SolverConfig::default(),
    })
}

impl<Lg: Lagrangian> DiscreteLagrangian<Lg> {
    /// Rebuilds with the same rule on another Lagrangian of equal dimension.
    pub fn with_lagrangian<L2: Lagrangian>(&self, lagrangian: L2) -> DiscreteLagrangian<L2> {
        DiscreteLagrangian {
            lagrangian,
            rule: self.rule.clone(),
            order: self.order,
            inner: self.inner,
        }
    }

    pub fn with_solver(mut self, inner: SolverConfig) -> Self {
        self.inner = inner;
        self
    }

    pub fn lagrangian(&self) -> &Lg {
        &self.lagrangian
    }

    pub fn rule(&self) -> &Rule {
        &self.rule
    }

    /// Design order `r`.
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn points(&self) -> usize {
        self.rule.points()
    }

    /// Dimension of one control point.
    pub fn dim(&self) -> usize {
        self.lagrangian.dim()
    }

    pub fn inner_solver(&self) -> &SolverConfig {
        &self.inner
    }

    /// The control-point action; `x` holds `points()` blocks of `dim()`.
    pub fn action<T: Real>(&self, x: &[T], h: f64) -> T {
        self.action_offset(&[], x, h)
    }

    /// The action at control points `base + d_j`, with velocities formed
    /// from the offsets alone. With `d_0 = 0` the velocities carry relative
    /// rather than absolute rounding errors. An empty `base` means zero.
    pub fn action_offset<T: Real>(&self, base: &[f64], d: &[T], h: f64) -> T {
        let n = self.dim();
        let at = |j: usize| -> Vec<T> {
            (0..n)
                .map(|k| match base.get(k) {
                    Some(b) => d[j * n + k].clone() + *b,
                    None => d[j * n + k].clone(),
                })
                .collect()
        };
        match &self.rule {
            Rule::Alpha(a) => {
                let (x0, x1) = (at(0), at(1));
                let q: Vec<T> = x0
                    .iter()
                    .zip(&x1)
                    .map(|(u, w)| u.clone() * (1.0 - a) + w.clone() * *a)
                    .collect();
                let v: Vec<T> = (0..n).map(|k| (d[n + k].clone() - d[k].clone()) / h).collect();
                self.lagrangian.eval(&q, &v) * h
            }
            Rule::Galerkin(scheme) => {
                let dm = scheme.differentiation();
                let s = scheme.stages();
                let dx: Vec<T> = (n..s * n).map(|i| d[i].clone() - d[i % n].clone()).collect();
                let mut total = T::zero();
                for (i, b) in scheme.weights().iter().enumerate() {
                    let v: Vec<T> = (0..n)
                        .map(|k| {
                            (1..s)
                                .filter(|&j| dm[(i, j)] != 0.0)
                                .fold(T::zero(), |acc, j| acc + dx[(j - 1) * n + k].clone() * (dm[(i, j)] / h))
                        })
                        .collect();
                    total = total + self.lagrangian.eval(&at(i), &v) * *b;
                }
                total * h
            }
        }
    }

    pub fn action_gradient(&self, x: &[f64], h: f64) -> Result<Vec<f64>> {
        self.action_gradient_offset(&[], x, h)
    }

    pub fn action_hessian(&self, x: &[f64], h: f64) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
        self.action_hessian_offset(&[], x, h)
    }

    fn check_offset(&self, base: &[f64], d: &[f64]) -> Result<()> {
        if !base.is_empty() {
            check_dim(self.dim(), base.len())?;
        }
        check_dim(self.points() * self.dim(), d.len())
    }

    /// Gradient of [`Self::action_offset`] with respect to the offsets,
    /// which equals the gradient with respect to the control points.
    pub fn action_gradient_offset(&self, base: &[f64], d: &[f64], h: f64) -> Result<Vec<f64>> {
        self.check_offset(base, d)?;
        gradient(|y| self.action_offset(base, y, h), d)
    }

    pub fn action_hessian_offset(&self, base: &[f64], d: &[f64], h: f64) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
        self.check_offset(base, d)?;
        hessian(|y| self.action_offset(base, y, h), d)
    }

    /// Control points for the step `q0 -> q1` with interior points making
    /// the action stationary.
    pub fn stages(&self, q0: &[f64], q1: &[f64], h: f64) -> Result<Vec<f64>> {
        check_step(h)?;
        let n = self.dim();
        check_dim(n, q0.len())?;
        check_dim(n, q1.len())?;
        let m = self.points();
        let nodes = self.rule.nodes();
        let step: Vec<f64> = q0.iter().zip(q1).map(|(a, b)| b - a).collect();
        let mut d: Vec<f64> = nodes.iter().flat_map(|c| step.iter().map(move |s| c * s)).collect();
        if m > 2 {
            let interior = (m - 2) * n;
            let seed = d[n..n + interior].to_vec();
            let solved = newton(
                |z| {
                    d[n..n + interior].copy_from_slice(z);
                    let (_, g, h2) = self.action_hessian_offset(q0, &d, h)?;
                    let jac = h2.view((n, n), (interior, interior)).into_owned();
                    Ok((g[n..n + interior].to_vec(), jac))
                },
                seed,
                &self.inner,
            )
            .map_err(|e| match e {
                NewtonFailure::Diverged { residual, .. } => Error::InnerSolveFailed { residual },
                NewtonFailure::Singular => Error::InnerSolveFailed {
                    residual: f64::INFINITY,
                },
                NewtonFailure::Eval(err) => err,
            })?;
            d[n..n + interior].copy_from_slice(&solved.z);
        }
        let mut x: Vec<f64> = d.chunks(n).flat_map(|c| c.iter().zip(q0).map(|(a, b)| a + b).collect::<Vec<_>>()).collect();
        // endpoints exactly as given
        x[..n].copy_from_slice(q0);
        x[(m - 1) * n..].copy_from_slice(q1);
        Ok(x)
    }

    /// `L_d(q0, q1)`.
    pub fn eval(&self, q0: &[f64], q1: &[f64], h: f64) -> Result<f64> {
        let x = self.stages(q0, q1, h)?;
        Ok(self.action(&x, h))
    }

    /// `D1 L_d(q0, q1)`; the interior points are stationary so only the
    /// explicit endpoint dependence contributes.
    pub fn d1(&self, q0: &[f64], q1: &[f64], h: f64) -> Result<Vec<f64>> {
        let x = self.stages(q0, q1, h)?;
        let g = self.action_gradient(&x, h)?;
        Ok(g[..self.dim()].to_vec())
    }

    /// `D2 L_d(q0, q1)`.
    pub fn d2(&self, q0: &[f64], q1: &[f64], h: f64) -> Result<Vec<f64>> {
        let x = self.stages(q0, q1, h)?;
        let g = self.action_gradient(&x, h)?;
        Ok(g[g.len() - self.dim()..].to_vec())
    }
}
