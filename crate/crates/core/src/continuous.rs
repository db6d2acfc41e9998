//! Forced Lagrangian systems and their doubled counterparts.
//!
//! A [`ForcedSystem`] pairs a Lagrangian `L(q, v)` and an external force
//! `F(q, v)` with a retraction. Duplicating the variables gives the doubled
//! Lagrangian
//!
//! ```text
//! L_K(q, v, Q, V) = L(Q, V) - L(q, v) - K(q, v, Q, V)
//! K(q, v, Q, V)   = 1/2 <F(Q, V), tau(Q, q)> - 1/2 <F(q, v), tau(q, Q)>
//! ```
//!
//! which is antisymmetric under the swap of the two copies and whose
//! Euler-Lagrange flow, restricted to `q = Q, v = V`, is the forced flow.
//! The Hamiltonian side is computed from the Lagrangian through numerical
//! Legendre inversion.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{constants, dot, gradient, hessian, jacobian, Dual, Dual2, Real};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{Chart, CotangentVec, Euclidean, Point, Retraction, TangentVec};
use crate::trajectory::TrajectoryRecord;

/// Largest accepted condition number of a mass matrix.
pub const MAX_MASS_CONDITION: f64 = 1e12;

/// User-supplied mechanics: a Lagrangian and an autonomous external force.
pub trait ForcedModel: Send + Sync {
    fn dim(&self) -> usize;
    fn lagrangian<T: Real>(&self, q: &[T], v: &[T]) -> T;
    fn force<T: Real>(&self, q: &[T], v: &[T]) -> Vec<T>;
}

#[derive(Clone, Debug)]
pub struct ForcedSystem<M, R = Euclidean> {
    chart: Chart,
    model: M,
    retraction: R,
}

impl<M: ForcedModel> ForcedSystem<M, Euclidean> {
    pub fn euclidean(model: M) -> Result<Self> {
        Self::new(model, Euclidean)
    }
}

impl<M: ForcedModel, R: Retraction> ForcedSystem<M, R> {
    pub fn new(model: M, retraction: R) -> Result<Self> {
        let chart = Chart::new(model.dim())?;
        Ok(ForcedSystem {
            chart,
            model,
            retraction,
        })
    }

    pub fn with_chart(mut self, chart: Chart) -> Result<Self> {
        check_dim(self.model.dim(), chart.dim())?;
        self.chart = chart;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.chart.dim()
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn retraction(&self) -> &R {
        &self.retraction
    }

    /// The physical Lagrangian `L`.
    pub fn physical(&self) -> Physical<'_, M, R> {
        Physical(self)
    }

    /// The doubled Lagrangian `L(Q,V) - L(q,v) - K`.
    pub fn doubled(&self) -> Doubled<'_, M, R> {
        Doubled(self)
    }

    /// The generalized potential `K` as a function on the doubled space.
    pub fn potential(&self) -> GeneralizedPotential<'_, M, R> {
        GeneralizedPotential(self)
    }

    fn potential_value<T: Real>(&self, q: &[T], v: &[T], big_q: &[T], big_v: &[T]) -> T {
        let r = &self.retraction;
        let plus = dot(&self.model.force(big_q, big_v), &r.tau(big_q, q));
        let minus = dot(&self.model.force(q, v), &r.tau(q, big_q));
        plus * 0.5 - minus * 0.5
    }
}

/// A Lagrangian on a (possibly doubled) configuration space.
///
/// Doubled spaces store the minus copy first: `x = (q, Q)`, `v = (v, V)`.
pub trait Lagrangian: Send + Sync {
    fn dim(&self) -> usize;
    fn eval<T: Real>(&self, q: &[T], v: &[T]) -> T;

    /// Dimension of the physical configuration space.
    fn physical_dim(&self) -> usize {
        self.dim()
    }

    /// The physical Lagrangian, used for energies and initial momenta.
    fn physical_eval<T: Real>(&self, q: &[T], v: &[T]) -> T {
        self.eval(q, v)
    }

    fn is_doubled(&self) -> bool {
        self.dim() != self.physical_dim()
    }

    /// Embeds a physical vector into this space (duplicates it when doubled).
    fn lift(&self, x: &[f64]) -> Vec<f64> {
        if self.is_doubled() {
            x.iter().chain(x).copied().collect()
        } else {
            x.to_vec()
        }
    }

    /// Projects onto the physical space (the plus copy when doubled).
    fn project<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[x.len() - self.physical_dim()..]
    }

    /// `max |q - Q|` for doubled spaces, zero otherwise.
    fn identity_defect(&self, x: &[f64]) -> f64 {
        if self.is_doubled() {
            let n = self.physical_dim();
            crate::trajectory::max_abs_diff(&x[..n], &x[n..2 * n])
        } else {
            0.0
        }
    }
}

pub struct Physical<'a, M, R>(&'a ForcedSystem<M, R>);

impl<M: ForcedModel, R: Retraction> Lagrangian for Physical<'_, M, R> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval<T: Real>(&self, q: &[T], v: &[T]) -> T {
        self.0.model.lagrangian(q, v)
    }
}

pub struct Doubled<'a, M, R>(&'a ForcedSystem<M, R>);

impl<'a, M: ForcedModel, R: Retraction> Doubled<'a, M, R> {
    pub fn system(&self) -> &'a ForcedSystem<M, R> {
        self.0
    }
}

impl<M: ForcedModel, R: Retraction> Lagrangian for Doubled<'_, M, R> {
    fn dim(&self) -> usize {
        2 * self.0.dim()
    }
    fn physical_dim(&self) -> usize {
        self.0.dim()
    }
    fn eval<T: Real>(&self, x: &[T], xd: &[T]) -> T {
        let n = self.0.dim();
        let (q, big_q) = x.split_at(n);
        let (v, big_v) = xd.split_at(n);
        let model = &self.0.model;
        let free = model.lagrangian(big_q, big_v) - model.lagrangian(q, v);
        free - self.0.potential_value(q, v, big_q, big_v)
    }
    fn physical_eval<T: Real>(&self, q: &[T], v: &[T]) -> T {
        self.0.model.lagrangian(q, v)
    }
}

pub struct GeneralizedPotential<'a, M, R>(&'a ForcedSystem<M, R>);

impl<M: ForcedModel, R: Retraction> Lagrangian for GeneralizedPotential<'_, M, R> {
    fn dim(&self) -> usize {
        2 * self.0.dim()
    }
    fn physical_dim(&self) -> usize {
        self.0.dim()
    }
    fn eval<T: Real>(&self, x: &[T], xd: &[T]) -> T {
        let n = self.0.dim();
        let (q, big_q) = x.split_at(n);
        let (v, big_v) = xd.split_at(n);
        self.0.potential_value(q, v, big_q, big_v)
    }
    fn physical_eval<T: Real>(&self, q: &[T], v: &[T]) -> T {
        self.0.model.lagrangian(q, v)
    }
}

impl<M, R> Clone for Physical<'_, M, R> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<M, R> Copy for Physical<'_, M, R> {}

impl<M, R> std::fmt::Debug for Physical<'_, M, R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Physical(dim={})", self.0.chart.dim())
    }
}

impl<M, R> Clone for Doubled<'_, M, R> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<M, R> Copy for Doubled<'_, M, R> {}

impl<M, R> std::fmt::Debug for Doubled<'_, M, R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Doubled(dim={})", self.0.chart.dim())
    }
}

impl<M, R> Clone for GeneralizedPotential<'_, M, R> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<M, R> Copy for GeneralizedPotential<'_, M, R> {}

impl<M, R> std::fmt::Debug for GeneralizedPotential<'_, M, R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GeneralizedPotential(dim={})", self.0.chart.dim())
    }
}

/// Evaluates the physical Lagrangian of any [`Lagrangian`] as a plain one.
pub(crate) struct PhysicalView<'a, Lg>(pub &'a Lg);

impl<Lg: Lagrangian> Lagrangian for PhysicalView<'_, Lg> {
    fn dim(&self) -> usize {
        self.0.physical_dim()
    }
    fn eval<T: Real>(&self, q: &[T], v: &[T]) -> T {
        self.0.physical_eval(q, v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateTangent {
    pub q: Point,
    pub v: TangentVec,
}

impl StateTangent {
    pub fn new(q: Point, v: TangentVec) -> Self {
        StateTangent { q, v }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateCotangent {
    pub q: Point,
    pub p: CotangentVec,
}

impl StateCotangent {
    pub fn new(q: Point, p: CotangentVec) -> Self {
        StateCotangent { q, p }
    }
}

/// A point `(q, v; Q, V)` of the doubled tangent bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubledStateTangent {
    pub minus: StateTangent,
    pub plus: StateTangent,
}

impl DoubledStateTangent {
    pub fn new(minus: StateTangent, plus: StateTangent) -> Self {
        DoubledStateTangent { minus, plus }
    }

    /// The image of a physical state on the identity submanifold.
    pub fn on_identity(s: &StateTangent) -> Self {
        DoubledStateTangent {
            minus: s.clone(),
            plus: s.clone(),
        }
    }

    /// The inversion: swaps the two copies.
    pub fn swapped(&self) -> Self {
        DoubledStateTangent {
            minus: self.plus.clone(),
            plus: self.minus.clone(),
        }
    }

    /// `|q - Q| + |v - V|` in the max norm.
    pub fn identity_distance(&self) -> f64 {
        crate::trajectory::max_abs_diff(&self.minus.q, &self.plus.q)
            + crate::trajectory::max_abs_diff(&self.minus.v, &self.plus.v)
    }

    pub fn on_identities(&self, tol: f64) -> bool {
        self.identity_distance() <= tol
    }

    pub(crate) fn stacked(&self) -> (Vec<f64>, Vec<f64>) {
        let x = self.minus.q.iter().chain(&self.plus.q).copied().collect();
        let v = self.minus.v.iter().chain(&self.plus.v).copied().collect();
        (x, v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyReport {
    pub energy: f64,
    pub t: f64,
}

/// Time derivative `(q', v')` of a tangent state.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentRate {
    pub q_dot: Vec<f64>,
    pub v_dot: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoubledRate {
    pub minus: TangentRate,
    pub plus: TangentRate,
}

/// Time derivative `(q', p')` of a cotangent state.
#[derive(Clone, Debug, PartialEq)]
pub struct CotangentRate {
    pub q_dot: Vec<f64>,
    pub p_dot: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoubledCotangentRate {
    pub minus: CotangentRate,
    pub plus: CotangentRate,
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `w x = rhs`, refusing ill-conditioned mass matrices.
pub(crate) fn solve_mass(w: &DMatrix<f64>, rhs: &[f64]) -> Result<Vec<f64>> {
    let condition = condition_number(w);
    if !(condition < MAX_MASS_CONDITION) {
        return Err(Error::SingularMass { condition });
    }
    let x = w
        .clone()
        .lu()
        .solve(&DVector::from_column_slice(rhs))
        .ok_or(Error::SingularMass { condition })?;
    Ok(x.as_slice().to_vec())
}

fn stack(q: &[f64], v: &[f64]) -> Vec<f64> {
    q.iter().chain(v).copied().collect()
}

/// Hessian of `lag` in the joint variables `(q, v)`.
fn joint_hessian<Lg: Lagrangian>(
    lag: &Lg,
    q: &[f64],
    v: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = q.len();
    let (_, g, h) = hessian(|z| lag.eval(&z[..n], &z[n..]), &stack(q, v))?;
    Ok((g, h))
}

/// Euler-Lagrange acceleration of `lag`, optionally with an external force:
/// `W a = F + dL/dq - (d2L/dv dq) v`.
pub fn el_acceleration<Lg: Lagrangian>(
    lag: &Lg,
    q: &[f64],
    v: &[f64],
    force: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let n = lag.dim();
    check_dim(n, q.len())?;
    check_dim(n, v.len())?;
    let (g, h) = joint_hessian(lag, q, v)?;
    let w = h.view((n, n), (n, n)).into_owned();
    let mixed = h.view((n, 0), (n, n)).into_owned();
    let coriolis = &mixed * DVector::from_column_slice(v);
    let rhs: Vec<f64> = (0..n)
        .map(|i| g[i] - coriolis[i] + force.map_or(0.0, |f| f[i]))
        .collect();
    solve_mass(&w, &rhs)
}

/// `dL/dv` of any Lagrangian.
pub fn momentum<Lg: Lagrangian>(lag: &Lg, q: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let qc: Vec<Dual> = constants(q);
    gradient(|vv| lag.eval(&qc, vv), v)
}

/// `E = v . dL/dv - L`.
pub fn lagrangian_energy<Lg: Lagrangian>(lag: &Lg, q: &[f64], v: &[f64]) -> Result<f64> {
    let p = momentum(lag, q, v)?;
    let e = dot(v, &p) - lag.eval(q, v);
    if e.is_finite() {
        Ok(e)
    } else {
        Err(Error::NonFinite("energy"))
    }
}

fn velocity_hessian<Lg: Lagrangian>(lag: &Lg, q: &[f64], v: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let qc: Vec<Dual2> = constants(q);
    let (_, g, h) = hessian(|vv| lag.eval(&qc, vv), v)?;
    Ok((g, h))
}

/// Solves `dL/dv(q, v) = p` for `v` by Newton's method, seeded with
/// `v = M^-1 p` where `M` is the velocity Hessian at `v = 0`.
pub fn velocity_from_momentum<Lg: Lagrangian>(lag: &Lg, q: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    let n = lag.dim();
    check_dim(n, q.len())?;
    check_dim(n, p.len())?;
    let (_, m0) = velocity_hessian(lag, q, &vec![0.0; n])?;
    let mut v = solve_mass(&m0, p)?;
    let scale = 1.0 + p.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut residual = f64::INFINITY;
    const MAX_ITERS: usize = 50;
    for _ in 0..MAX_ITERS {
        let (g, w) = velocity_hessian(lag, q, &v)?;
        let r: Vec<f64> = g.iter().zip(p).map(|(a, b)| a - b).collect();
        residual = r.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if residual <= 4.0 * f64::EPSILON * scale {
            return Ok(v);
        }
        let dv = solve_mass(&w, &r)?;
        let step = dv.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        for (vi, di) in v.iter_mut().zip(&dv) {
            *vi -= di;
        }
        if step <= 1e-15 * (1.0 + v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))) {
            return Ok(v);
        }
    }
    Err(Error::LegendreInversionFailed {
        iters: MAX_ITERS,
        residual,
    })
}

/// Forced Euler-Lagrange acceleration of the physical system.
pub fn forced_el_acceleration<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    s: &StateTangent,
) -> Result<TangentVec> {
    sys.chart.check_point(&s.q)?;
    check_dim(sys.dim(), s.v.len())?;
    let f = sys.model.force(&s.q, &s.v);
    el_acceleration(&sys.physical(), &s.q, &s.v, Some(&f))
}

/// Fibre derivative `p = dL/dv`.
pub fn legendre<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    s: &StateTangent,
) -> Result<StateCotangent> {
    let p = momentum(&sys.physical(), &s.q, &s.v)?;
    Ok(StateCotangent { q: s.q.clone(), p })
}

pub fn inverse_legendre<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    c: &StateCotangent,
) -> Result<StateTangent> {
    let v = velocity_from_momentum(&sys.physical(), &c.q, &c.p)?;
    Ok(StateTangent { q: c.q.clone(), v })
}

pub fn energy<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    s: &StateTangent,
    t: f64,
) -> Result<EnergyReport> {
    Ok(EnergyReport {
        energy: lagrangian_energy(&sys.physical(), &s.q, &s.v)?,
        t,
    })
}

/// `H(q, p) = E_L(q, v(q, p))`.
pub fn hamiltonian<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    c: &StateCotangent,
) -> Result<f64> {
    let s = inverse_legendre(sys, c)?;
    lagrangian_energy(&sys.physical(), &s.q, &s.v)
}

/// Forced Hamilton equations `q' = dH/dp`, `p' = -dH/dq + F^H`.
///
/// Uses `dH/dp = v` and `dH/dq = -dL/dq` at `v = v(q, p)`.
pub fn forced_hamilton_field<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    c: &StateCotangent,
) -> Result<CotangentRate> {
    let s = inverse_legendre(sys, c)?;
    let local = HamiltonianLocal::at(sys, &s)?;
    let p_dot = local
        .dl_dq
        .iter()
        .zip(&local.force)
        .map(|(a, b)| a + b)
        .collect();
    Ok(CotangentRate {
        q_dot: s.v,
        p_dot,
    })
}

/// `K(v_q, V_Q) = 1/2 <F(V_Q), tau(Q,q)> - 1/2 <F(v_q), tau(q,Q)>`.
pub fn generalized_potential_kf<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    d: &DoubledStateTangent,
) -> f64 {
    sys.potential_value(&d.minus.q, &d.minus.v, &d.plus.q, &d.plus.v)
}

pub fn doubled_lagrangian<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    d: &DoubledStateTangent,
) -> f64 {
    let (x, v) = d.stacked();
    sys.doubled().eval(&x, &v)
}

/// `H(beta) - H(alpha) + K_F(alpha, beta)` with `K_F` built from `F^H`.
pub fn doubled_hamiltonian<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    alpha: &StateCotangent,
    beta: &StateCotangent,
) -> Result<f64> {
    let sa = inverse_legendre(sys, alpha)?;
    let sb = inverse_legendre(sys, beta)?;
    let lag = sys.physical();
    let ha = lagrangian_energy(&lag, &sa.q, &sa.v)?;
    let hb = lagrangian_energy(&lag, &sb.q, &sb.v)?;
    let r = &sys.retraction;
    let fa = sys.model.force(&sa.q, &sa.v);
    let fb = sys.model.force(&sb.q, &sb.v);
    let k = 0.5 * dot(&fb, &r.tau(&beta.q, &alpha.q)) - 0.5 * dot(&fa, &r.tau(&alpha.q, &beta.q));
    Ok(hb - ha + k)
}

/// Euler-Lagrange field of the doubled Lagrangian, from `L_K` alone.
pub fn doubled_field<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    d: &DoubledStateTangent,
) -> Result<DoubledRate> {
    let n = sys.dim();
    let (x, v) = d.stacked();
    let a = el_acceleration(&sys.doubled(), &x, &v, None)?;
    Ok(DoubledRate {
        minus: TangentRate {
            q_dot: d.minus.v.clone(),
            v_dot: a[..n].to_vec(),
        },
        plus: TangentRate {
            q_dot: d.plus.v.clone(),
            v_dot: a[n..].to_vec(),
        },
    })
}

/// Local first-order data of the induced Hamiltonian at `(q, v(q,p))`.
struct HamiltonianLocal {
    v: Vec<f64>,
    dl_dq: Vec<f64>,
    force: Vec<f64>,
    /// `dF^H/dq` and `dF^H/dp`, rows indexed by force component.
    dfh_dq: DMatrix<f64>,
    dfh_dp: DMatrix<f64>,
}

impl HamiltonianLocal {
    fn at<M: ForcedModel, R: Retraction>(sys: &ForcedSystem<M, R>, s: &StateTangent) -> Result<Self> {
        let n = sys.dim();
        let (g, h) = joint_hessian(&sys.physical(), &s.q, &s.v)?;
        let w = h.view((n, n), (n, n)).into_owned();
        let mixed = h.view((n, 0), (n, n)).into_owned();
        let jf = jacobian(|z| sys.model.force(&z[..n], &z[n..]), &stack(&s.q, &s.v))?;
        let jf_q = jf.columns(0, n).into_owned();
        let jf_v = jf.columns(n, n).into_owned();
        let condition = condition_number(&w);
        if !(condition < MAX_MASS_CONDITION) {
            return Err(Error::SingularMass { condition });
        }
        let w_inv = w.try_inverse().ok_or(Error::SingularMass { condition })?;
        // dv/dp = W^-1, dv/dq = -W^-1 d2L/dvdq
        let dfh_dp = &jf_v * &w_inv;
        let dfh_dq = &jf_q - &dfh_dp * &mixed;
        Ok(HamiltonianLocal {
            v: s.v.clone(),
            dl_dq: g[..n].to_vec(),
            force: sys.model.force(&s.q, &s.v),
            dfh_dq,
            dfh_dp,
        })
    }
}

fn mat_t_vec(m: &DMatrix<f64>, x: &[f64]) -> DVector<f64> {
    m.transpose() * DVector::from_column_slice(x)
}

/// Hamiltonian vector field of `H(beta) - H(alpha) + K_F` with respect to
/// the symplectic form `dQ^dP - dq^dp`, in coordinates.
pub fn doubled_hamilton_field<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    alpha: &StateCotangent,
    beta: &StateCotangent,
) -> Result<DoubledCotangentRate> {
    let (q, big_q) = (&alpha.q, &beta.q);
    let a = HamiltonianLocal::at(sys, &inverse_legendre(sys, alpha)?)?;
    let b = HamiltonianLocal::at(sys, &inverse_legendre(sys, beta)?)?;
    let r = &sys.retraction;
    let tau_a = r.tau(q.as_slice(), big_q.as_slice());
    let tau_b = r.tau(big_q.as_slice(), q.as_slice());

    let dk_dq = (mat_t_vec(&r.d2_tau(big_q, q), &b.force)
        - mat_t_vec(&a.dfh_dq, &tau_a)
        - mat_t_vec(&r.d1_tau(q, big_q), &a.force))
        * 0.5;
    let dk_dp = mat_t_vec(&a.dfh_dp, &tau_a) * -0.5;
    let dk_dbq = (mat_t_vec(&b.dfh_dq, &tau_b) + mat_t_vec(&r.d1_tau(big_q, q), &b.force)
        - mat_t_vec(&r.d2_tau(q, big_q), &a.force))
        * 0.5;
    let dk_dbp = mat_t_vec(&b.dfh_dp, &tau_b) * 0.5;

    let n = sys.dim();
    let mut out = DoubledCotangentRate {
        minus: CotangentRate {
            q_dot: vec![0.0; n],
            p_dot: vec![0.0; n],
        },
        plus: CotangentRate {
            q_dot: vec![0.0; n],
            p_dot: vec![0.0; n],
        },
    };
    for i in 0..n {
        // dH/dq = -dL/dq, dH/dp = v
        let dh_dq = a.dl_dq[i] + dk_dq[i];
        let dh_dp = -a.v[i] + dk_dp[i];
        let dh_dbq = -b.dl_dq[i] + dk_dbq[i];
        let dh_dbp = b.v[i] + dk_dbp[i];
        out.minus.q_dot[i] = -dh_dp;
        out.minus.p_dot[i] = dh_dq;
        out.plus.q_dot[i] = dh_dbp;
        out.plus.p_dot[i] = -dh_dbq;
    }
    Ok(out)
}

/// One fixed step of the Dormand-Prince fifth-order method.
pub(crate) fn dopri5_step<F>(f: &F, y: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    const A: [[f64; 5]; 5] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    ];
    const B: [f64; 6] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ];
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(6);
    k.push(f(y)?);
    for row in A.iter() {
        let stage: Vec<f64> = (0..y.len())
            .map(|i| y[i] + h * k.iter().zip(row).map(|(kj, a)| a * kj[i]).sum::<f64>())
            .collect();
        k.push(f(&stage)?);
    }
    let next: Vec<f64> = (0..y.len())
        .map(|i| y[i] + h * k.iter().zip(&B).map(|(kj, b)| b * kj[i]).sum::<f64>())
        .collect();
    if next.iter().all(|x| x.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFinite("reference step"))
    }
}

/// Integrates `y' = f(y)` from `0` to each of `times` (ascending), landing
/// exactly on every requested time.
pub(crate) fn dopri5_at<F>(f: &F, y0: &[f64], times: &[f64], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("reference step must be positive".into()));
    }
    let mut t = 0.0;
    let mut y = y0.to_vec();
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        if target < t - 1e-12 {
            return Err(Error::InvalidArgument("output times must be ascending".into()));
        }
        let span = target - t;
        let steps = (span / h - 1e-9).ceil().max(0.0) as usize;
        if steps > 0 {
            let hs = span / steps as f64;
            for _ in 0..steps {
                y = dopri5_step(f, &y, hs)?;
            }
        }
        t = target;
        out.push(y.clone());
    }
    Ok(out)
}

fn first_order_field<'a, M: ForcedModel, R: Retraction>(
    sys: &'a ForcedSystem<M, R>,
) -> impl Fn(&[f64]) -> Result<Vec<f64>> + 'a {
    let n = sys.dim();
    move |y: &[f64]| {
        let s = StateTangent::new(y[..n].to_vec(), y[n..].to_vec());
        let a = forced_el_acceleration(sys, &s)?;
        Ok(stack(&s.v, &a))
    }
}

/// High-accuracy classical solution at the given times.
pub fn reference_solve_at<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    s0: &StateTangent,
    times: &[f64],
    h_ref: f64,
) -> Result<Vec<StateTangent>> {
    let n = sys.dim();
    sys.chart.check_point(&s0.q)?;
    check_dim(n, s0.v.len())?;
    let ys = dopri5_at(&first_order_field(sys), &stack(&s0.q, &s0.v), times, h_ref)?;
    Ok(ys
        .into_iter()
        .map(|y| StateTangent::new(y[..n].to_vec(), y[n..].to_vec()))
        .collect())
}

/// Fixed-step fifth-order explicit solution on a uniform grid ending at
/// `t_end`; the step is shrunk so the grid lands on `t_end`.
pub fn reference_solve<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    s0: &StateTangent,
    t_end: f64,
    h_ref: f64,
) -> Result<TrajectoryRecord> {
    if !(h_ref > 0.0) || !(t_end >= 0.0) {
        return Err(Error::InvalidArgument("need h_ref > 0 and t_end >= 0".into()));
    }
    let steps = ((t_end / h_ref) - 1e-9).ceil().max(0.0) as usize;
    let times: Vec<f64> = (0..=steps)
        .map(|k| if steps == 0 { 0.0 } else { t_end * k as f64 / steps as f64 })
        .collect();
    let states = reference_solve_at(sys, s0, &times, h_ref)?;
    let mut record = TrajectoryRecord::default();
    for (t, s) in times.into_iter().zip(states) {
        let c = legendre(sys, &s)?;
        let e = energy(sys, &s, t)?.energy;
        record.push(t, s.q, c.p, e, 0.0, 0);
    }
    Ok(record)
}

/// Integrates the doubled Euler-Lagrange field with the explicit reference
/// method, returning the doubled state at each grid node.
pub fn doubled_reference_solve<M: ForcedModel, R: Retraction>(
    sys: &ForcedSystem<M, R>,
    d0: &DoubledStateTangent,
    t_end: f64,
    h_ref: f64,
) -> Result<Vec<(f64, DoubledStateTangent)>> {
    let n = sys.dim();
    if !(h_ref > 0.0) {
        return Err(Error::InvalidArgument("reference step must be positive".into()));
    }
    let field = |y: &[f64]| -> Result<Vec<f64>> {
        let a = el_acceleration(&sys.doubled(), &y[..2 * n], &y[2 * n..], None)?;
        Ok(stack(&y[2 * n..], &a))
    };
    let (x, v) = d0.stacked();
    let steps = ((t_end / h_ref) - 1e-9).ceil().max(0.0) as usize;
    let h = if steps == 0 { 0.0 } else { t_end / steps as f64 };
    let mut y = stack(&x, &v);
    let unpack = |y: &[f64]| {
        DoubledStateTangent::new(
            StateTangent::new(y[..n].to_vec(), y[2 * n..3 * n].to_vec()),
            StateTangent::new(y[n..2 * n].to_vec(), y[3 * n..].to_vec()),
        )
    };
    let mut out = vec![(0.0, unpack(&y))];
    for k in 1..=steps {
        y = dopri5_step(&field, &y, h)?;
        out.push((h * k as f64, unpack(&y)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Real;

    /// `L = 1/2 v^T M v - 1/2 q^T K q`, `F = -D v`, diagonal matrices.
    struct Linear {
        m: Vec<f64>,
        k: Vec<f64>,
        d: Vec<f64>,
    }

    impl ForcedModel for Linear {
        fn dim(&self) -> usize {
            self.m.len()
        }
        fn lagrangian<T: Real>(&self, q: &[T], v: &[T]) -> T {
            (0..self.dim()).fold(T::zero(), |acc, i| {
                acc + v[i].square() * (0.5 * self.m[i]) - q[i].square() * (0.5 * self.k[i])
            })
        }
        fn force<T: Real>(&self, _q: &[T], v: &[T]) -> Vec<T> {
            v.iter().zip(&self.d).map(|(vi, d)| vi.clone() * -d).collect()
        }
    }

    fn oscillator(d: f64) -> ForcedSystem<Linear> {
        ForcedSystem::euclidean(Linear {
            m: vec![1.0],
            k: vec![1.0],
            d: vec![d],
        })
        .unwrap()
    }

    fn st(q: &[f64], v: &[f64]) -> StateTangent {
        StateTangent::new(q.to_vec(), v.to_vec())
    }

    #[test]
    fn accelerations_of_linear_examples() {
        let sys = oscillator(0.0);
        assert_eq!(forced_el_acceleration(&sys, &st(&[1.0], &[0.0])).unwrap(), vec![-1.0]);
        let damped = oscillator(0.2);
        let a = forced_el_acceleration(&damped, &st(&[1.0], &[0.0])).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-15);
        let a = forced_el_acceleration(&damped, &st(&[0.0], &[1.0])).unwrap();
        assert!((a[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn legendre_with_nontrivial_mass() {
        let sys = ForcedSystem::euclidean(Linear {
            m: vec![2.0, 3.0],
            k: vec![1.0, 1.0],
            d: vec![0.0, 0.0],
        })
        .unwrap();
        let c = legendre(&sys, &st(&[0.0, 0.0], &[1.0, 1.0])).unwrap();
        assert_eq!(c.p, vec![2.0, 3.0]);
        let back = inverse_legendre(&sys, &c).unwrap();
        assert!(crate::trajectory::max_abs_diff(&back.v, &[1.0, 1.0]) < 1e-15);
    }

    #[test]
    fn hamilton_field_examples() {
        let sys = oscillator(0.0);
        let r = forced_hamilton_field(&sys, &StateCotangent::new(vec![1.0], vec![0.0])).unwrap();
        assert_eq!((r.q_dot[0], r.p_dot[0]), (0.0, -1.0));
        let damped = oscillator(0.2);
        let r = forced_hamilton_field(&damped, &StateCotangent::new(vec![0.0], vec![1.0])).unwrap();
        assert!((r.q_dot[0] - 1.0).abs() < 1e-15);
        assert!((r.p_dot[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn doubled_hamiltonian_damped_value() {
        let damped = oscillator(0.2);
        let alpha = StateCotangent::new(vec![0.0], vec![1.0]);
        let beta = StateCotangent::new(vec![1.0], vec![0.0]);
        let h = doubled_hamiltonian(&damped, &alpha, &beta).unwrap();
        assert!((h - 0.1).abs() < 1e-15);
        let swapped = doubled_hamiltonian(&damped, &beta, &alpha).unwrap();
        assert_eq!(swapped, -h);
        assert_eq!(doubled_hamiltonian(&damped, &alpha, &alpha).unwrap(), 0.0);
    }

    #[test]
    fn doubled_lagrangian_basic_identities() {
        let damped = oscillator(0.2);
        let s = st(&[0.3], &[-0.7]);
        assert_eq!(doubled_lagrangian(&damped, &DoubledStateTangent::on_identity(&s)), 0.0);
        let d = DoubledStateTangent::new(s.clone(), st(&[1.1], &[0.4]));
        assert_eq!(doubled_lagrangian(&damped, &d.swapped()), -doubled_lagrangian(&damped, &d));
        let free = oscillator(0.0);
        let l = |s: &StateTangent| 0.5 * s.v[0] * s.v[0] - 0.5 * s.q[0] * s.q[0];
        let expected = l(&d.plus) - l(&d.minus);
        assert!((doubled_lagrangian(&free, &d) - expected).abs() < 1e-15);
    }

    #[test]
    fn singular_mass_is_rejected() {
        let sys = ForcedSystem::euclidean(Linear {
            m: vec![1.0, 0.0],
            k: vec![1.0, 1.0],
            d: vec![0.0, 0.0],
        })
        .unwrap();
        let err = forced_el_acceleration(&sys, &st(&[0.0, 0.0], &[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::SingularMass { .. }));
    }

    #[test]
    fn doubled_field_without_force_decouples() {
        let sys = oscillator(0.0);
        let d = DoubledStateTangent::new(st(&[0.5], &[0.1]), st(&[-0.2], &[0.9]));
        let f = doubled_field(&sys, &d).unwrap();
        assert!((f.minus.v_dot[0] + 0.5).abs() < 1e-14);
        assert!((f.plus.v_dot[0] - 0.2).abs() < 1e-14);
        assert_eq!(f.plus.q_dot, vec![0.9]);
    }

    #[test]
    fn reference_solver_closed_forms() {
        let sys = oscillator(0.0);
        let s0 = st(&[1.0], &[0.0]);
        let rec = reference_solve(&sys, &s0, 2.0 * std::f64::consts::PI, 1e-4).unwrap();
        assert!((rec.final_q()[0] - 1.0).abs() < 1e-8);
        assert!(rec.final_p()[0].abs() < 1e-8);

        let damped = oscillator(0.2);
        let rec = reference_solve(&damped, &s0, 1.0, 1e-3).unwrap();
        let w = 0.99_f64.sqrt();
        let exact = (-0.1_f64).exp() * (w.cos() + 0.1 / w * w.sin());
        assert!((rec.final_q()[0] - exact).abs() < 1e-8);
        assert_eq!(rec.len(), 1001);
        for pair in rec.energy.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15);
        }
    }

    #[test]
    fn reference_solver_lands_on_requested_times() {
        let sys = oscillator(0.0);
        let out = reference_solve_at(&sys, &st(&[1.0], &[0.0]), &[0.25, 0.5, 1.0], 0.01).unwrap();
        for (t, s) in [0.25_f64, 0.5, 1.0].iter().zip(&out) {
            assert!((s.q[0] - t.cos()).abs() < 1e-12);
        }
        assert!(reference_solve(&sys, &st(&[1.0], &[0.0]), 1.0, 0.0).is_err());
    }
}
