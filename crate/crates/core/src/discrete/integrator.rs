use nalgebra::DMatrix;

use super::lagrangian::DiscreteLagrangian;
use super::solver::{newton, NewtonFailure, NewtonOutcome};
use super::{check_step, DiscretePair, IdentityMode, SolverConfig};
use crate::continuous::{
    lagrangian_energy, momentum, velocity_from_momentum, Lagrangian, PhysicalView, StateCotangent,
    StateTangent,
};
use crate::error::{check_dim, Error, Result};
use crate::geometry::Point;
use crate::trajectory::TrajectoryRecord;

/// Result of one step of the discrete flow in position-momentum form.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSolution {
    /// All control points of the step, `points() * dim()` entries.
    pub stages: Vec<f64>,
    /// `D2 S` at the final control point (the momentum carried forward).
    pub p_next: Vec<f64>,
    pub iters: usize,
    pub residual: f64,
}

impl StepSolution {
    pub fn endpoint(&self) -> &[f64] {
        &self.stages[self.stages.len() - self.p_next.len()..]
    }
}

fn outer_failure(e: NewtonFailure) -> Error {
    match e {
        NewtonFailure::Diverged { iters, residual } => Error::NewtonDiverged { iters, residual },
        NewtonFailure::Singular => Error::SingularD12,
        NewtonFailure::Eval(err) => err,
    }
}

/// Advances `(x0, p0)` one step: solves `D0 S + p0 = 0` together with the
/// stationarity of the interior control points, then returns `p1 = D_last S`.
///
/// `seed` holds initial guesses for control points `1..m` in the space of
/// the discrete Lagrangian (physical space is accepted in restricted mode).
pub fn momentum_step<Lg: Lagrangian>(
    ld: &DiscreteLagrangian<Lg>,
    x0: &[f64],
    p0: &[f64],
    h: f64,
    seed: &[f64],
    cfg: &SolverConfig,
) -> Result<StepSolution> {
    check_step(h)?;
    let n = ld.dim();
    let m = ld.points();
    check_dim(n, x0.len())?;
    check_dim(n, p0.len())?;
    let lag = ld.lagrangian();
    if cfg.mode == IdentityMode::Restricted && lag.is_doubled() {
        return restricted_step(ld, x0, p0, h, seed, cfg);
    }
    check_dim((m - 1) * n, seed.len())?;
    let unknowns = (m - 1) * n;
    // unknowns are offsets from x0
    let mut d = vec![0.0; m * n];
    let rel: Vec<f64> = seed.iter().enumerate().map(|(i, s)| s - x0[i % n]).collect();
    let NewtonOutcome { z, iters, residual } = newton(
        |z| {
            d[n..].copy_from_slice(z);
            let (_, g, hess) = ld.action_hessian_offset(x0, &d, h)?;
            let mut r = g[..unknowns].to_vec();
            for (ri, pi) in r.iter_mut().zip(p0) {
                *ri += pi;
            }
            Ok((r, hess.view((0, n), (unknowns, unknowns)).into_owned()))
        },
        rel,
        cfg,
    )
    .map_err(outer_failure)?;
    d[n..].copy_from_slice(&z);
    let g = ld.action_gradient_offset(x0, &d, h)?;
    Ok(StepSolution {
        p_next: g[unknowns..].to_vec(),
        stages: absolute(x0, &d),
        iters,
        residual,
    })
}

fn absolute(base: &[f64], d: &[f64]) -> Vec<f64> {
    let mut x: Vec<f64> = d.iter().enumerate().map(|(i, v)| base[i % base.len()] + v).collect();
    x[..base.len()].copy_from_slice(base);
    x
}

fn restricted_step<Lg: Lagrangian>(
    ld: &DiscreteLagrangian<Lg>,
    x0: &[f64],
    p0: &[f64],
    h: f64,
    seed: &[f64],
    cfg: &SolverConfig,
) -> Result<StepSolution> {
    let lag = ld.lagrangian();
    let n = lag.physical_dim();
    let big_n = ld.dim();
    let m = ld.points();
    let seed: Vec<f64> = if seed.len() == (m - 1) * big_n {
        seed.chunks(big_n).flat_map(|c| lag.project(c).to_vec()).collect()
    } else {
        check_dim((m - 1) * n, seed.len())?;
        seed.to_vec()
    };
    let start = lag.project(x0).to_vec();
    let p_plus = lag.project(p0).to_vec();
    let base = lag.lift(&start);
    let lift_all = |z: &[f64]| -> Vec<f64> {
        let mut d = vec![0.0; big_n];
        for c in z.chunks(n) {
            d.extend(lag.lift(c));
        }
        d
    };
    let unknowns = (m - 1) * n;
    let rel: Vec<f64> = seed.iter().enumerate().map(|(i, s)| s - start[i % n]).collect();
    let NewtonOutcome { z, iters, residual } = newton(
        |z| {
            let d = lift_all(z);
            let (_, g, hess) = ld.action_hessian_offset(&base, &d, h)?;
            let mut r = vec![0.0; unknowns];
            let mut jac = DMatrix::zeros(unknowns, unknowns);
            for i in 0..m - 1 {
                for k in 0..n {
                    let row = i * big_n + n + k;
                    r[i * n + k] = g[row] + if i == 0 { p_plus[k] } else { 0.0 };
                    for j in 1..m {
                        for l in 0..n {
                            jac[(i * n + k, (j - 1) * n + l)] =
                                hess[(row, j * big_n + l)] + hess[(row, j * big_n + n + l)];
                        }
                    }
                }
            }
            Ok((r, jac))
        },
        rel,
        cfg,
    )
    .map_err(outer_failure)?;
    let d = lift_all(&z);
    let g = ld.action_gradient_offset(&base, &d, h)?;
    Ok(StepSolution {
        p_next: g[(m - 1) * big_n..].to_vec(),
        stages: absolute(&base, &d),
        iters,
        residual,
    })
}

fn interpolated_seed(nodes: &[f64], from: &[f64], to: &[f64]) -> Vec<f64> {
    nodes[1..]
        .iter()
        .flat_map(|c| from.iter().zip(to).map(move |(a, b)| a + c * (b - a)))
        .collect()
}

/// One step of the discrete Euler-Lagrange equations
/// `D1 L_d(q_curr, q_next) + D2 L_d(q_prev, q_curr) = 0`,
/// seeded with `q_next = 2 q_curr - q_prev`.
pub fn del_step<Lg: Lagrangian>(
    ld: &DiscreteLagrangian<Lg>,
    pair: &DiscretePair,
    cfg: &SolverConfig,
) -> Result<Point> {
    check_step(pair.h)?;
    let p_curr = ld.d2(&pair.q_prev, &pair.q_curr, pair.h)?;
    let guess: Vec<f64> = pair
        .q_curr
        .iter()
        .zip(&pair.q_prev)
        .map(|(c, p)| 2.0 * c - p)
        .collect();
    let seed = interpolated_seed(&ld.rule().nodes(), &pair.q_curr, &guess);
    let sol = momentum_step(ld, &pair.q_curr, &p_curr, pair.h, &seed, cfg)?;
    Ok(sol.endpoint().to_vec())
}

/// `F^- L_d(q0, q1) = (q0, -D1 L_d(q0, q1))`.
pub fn discrete_legendre_minus<Lg: Lagrangian>(
    ld: &DiscreteLagrangian<Lg>,
    q0: &[f64],
    q1: &[f64],
    h: f64,
) -> Result<StateCotangent> {
    let d1 = ld.d1(q0, q1, h)?;
    Ok(StateCotangent::new(q0.to_vec(), d1.iter().map(|x| -x).collect()))
}

/// `F^+ L_d(q0, q1) = (q1, D2 L_d(q0, q1))`.
pub fn discrete_legendre_plus<Lg: Lagrangian>(
    ld: &DiscreteLagrangian<Lg>,
    q0: &[f64],
    q1: &[f64],
    h: f64,
) -> Result<StateCotangent> {
    Ok(StateCotangent::new(q1.to_vec(), ld.d2(q0, q1, h)?))
}

/// Initial momentum of the chain: `dL/dv` at the lifted initial state.
/// For a doubled Lagrangian on the identities this is `(-p, p)`.
fn initial_momentum<Lg: Lagrangian>(lag: &Lg, s0: &StateTangent) -> Result<(Vec<f64>, Vec<f64>)> {
    let x0 = lag.lift(&s0.q);
    let p0 = momentum(lag, &x0, &lag.lift(&s0.v))?;
    Ok((x0, p0))
}

/// Finds `q1` with `F^- L_d(q0, q1) = (q0, dL/dv(q0, v0))`.
pub fn initialize_from_state<Lg: Lagrangian>(
    ld: &DiscreteLagrangian<Lg>,
    s0: &StateTangent,
    h: f64,
    cfg: &SolverConfig,
) -> Result<DiscretePair> {
    check_step(h)?;
    let lag = ld.lagrangian();
    check_dim(lag.physical_dim(), s0.q.len())?;
    check_dim(lag.physical_dim(), s0.v.len())?;
    let (x0, p0) = initial_momentum(lag, s0)?;
    let guess: Vec<f64> = x0.iter().zip(lag.lift(&s0.v)).map(|(q, v)| q + h * v).collect();
    let seed = interpolated_seed(&ld.rule().nodes(), &x0, &guess);
    let sol = momentum_step(ld, &x0, &p0, h, &seed, cfg)?;
    Ok(DiscretePair {
        q_curr: sol.endpoint().to_vec(),
        q_prev: x0,
        h,
    })
}

fn physical_energy<Lg: Lagrangian>(lag: &Lg, q: &[f64], p: &[f64]) -> Result<f64> {
    let view = PhysicalView(lag);
    let v = velocity_from_momentum(&view, q, p)?;
    lagrangian_energy(&view, q, &v)
}

/// Runs `steps` steps of the discrete flow from a continuous initial state.
pub fn integrate<Lg: Lagrangian>(
    ld: &DiscreteLagrangian<Lg>,
    s0: &StateTangent,
    steps: usize,
    h: f64,
    cfg: &SolverConfig,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    check_step(h)?;
    let lag = ld.lagrangian();
    let big_n = ld.dim();
    check_dim(lag.physical_dim(), s0.q.len())?;
    check_dim(lag.physical_dim(), s0.v.len())?;
    let (mut x, mut p) = initial_momentum(lag, s0)?;
    let nodes = ld.rule().nodes();
    let doubled = lag.is_doubled();

    let mut record = TrajectoryRecord::default();
    let row = |record: &mut TrajectoryRecord, t: f64, x: &[f64], p: &[f64], iters: usize| -> Result<()> {
        let q = lag.project(x).to_vec();
        let pp = lag.project(p).to_vec();
        let e = physical_energy(lag, &q, &pp)?;
        if doubled {
            record.q_minus.push(x[..lag.physical_dim()].to_vec());
        }
        record.push(t, q, pp, e, lag.identity_defect(x), iters);
        Ok(())
    };
    row(&mut record, 0.0, &x, &p, 0)?;

    let lifted_v = lag.lift(&s0.v);
    let mut seed = interpolated_seed(
        &nodes,
        &x,
        &x.iter().zip(&lifted_v).map(|(q, v)| q + h * v).collect::<Vec<_>>(),
    );
    for k in 1..=steps {
        let sol = momentum_step(ld, &x, &p, h, &seed, cfg).map_err(|e| e.at_step(k))?;
        record.max_residual = record.max_residual.max(sol.residual);
        // warm start: reuse this step's stage offsets from the new start
        let start = sol.endpoint().to_vec();
        seed = sol.stages[big_n..]
            .chunks(big_n)
            .flat_map(|c| {
                c.iter()
                    .zip(&sol.stages[..big_n])
                    .zip(&start)
                    .map(|((s, s0), e)| e + (s - s0))
                    .collect::<Vec<_>>()
            })
            .collect();
        x = start;
        p = sol.p_next;
        row(&mut record, k as f64 * h, &x, &p, sol.iters).map_err(|e| e.at_step(k))?;
    }
    Ok(record)
}

/// Jacobian of the one-step map `(x0, p0) -> (x1, p1)` by implicit
/// differentiation of the step equations (exact second derivatives).
pub fn step_map_jacobian<Lg: Lagrangian>(
    ld: &DiscreteLagrangian<Lg>,
    x0: &[f64],
    p0: &[f64],
    h: f64,
    cfg: &SolverConfig,
) -> Result<DMatrix<f64>> {
    let n = ld.dim();
    let m = ld.points();
    let full = SolverConfig {
        mode: IdentityMode::Full,
        ..*cfg
    };
    let guess: Vec<f64> = x0.to_vec();
    let seed = interpolated_seed(&ld.rule().nodes(), x0, &guess);
    let sol = momentum_step(ld, x0, p0, h, &seed, &full)?;
    let (_, _, hess) = ld.action_hessian(&sol.stages, h)?;
    let u = (m - 1) * n;
    // residual R(z; x0, p0) = [D_0 S + p0, D_int S]
    let r_z = hess.view((0, n), (u, u)).into_owned();
    let mut r_in = DMatrix::zeros(u, 2 * n);
    r_in.view_mut((0, 0), (u, n)).copy_from(&hess.view((0, 0), (u, n)));
    for k in 0..n {
        r_in[(k, n + k)] = 1.0;
    }
    let lu = r_z.lu();
    let dz = -lu.solve(&r_in).ok_or(Error::SingularD12)?;
    let last = (m - 2) * n;
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    jac.view_mut((0, 0), (n, 2 * n)).copy_from(&dz.view((last, 0), (n, 2 * n)));
    // p1 = D_last S(x0, z)
    let row = (m - 1) * n;
    let mut dp = hess.view((row, n), (n, u)) * &dz;
    let dx0 = hess.view((row, 0), (n, n)).into_owned();
    let mut head = dp.view_mut((0, 0), (n, n));
    head += &dx0;
    jac.view_mut((n, 0), (n, 2 * n)).copy_from(&dp);
    Ok(jac)
}
