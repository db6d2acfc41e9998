//! Benchmarks, convergence studies and ensembles.
//!
//! Errors are measured at the final time as the sup norm over `(q, p)`
//! against a reference produced by the doubled 3-stage Lobatto integrator
//! at a quarter of the finest ladder step. That reference is cross-checked
//! once per initial state against the explicit fifth-order solver.

use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Real;
use crate::continuous::{energy, legendre, reference_solve_at, ForcedModel, ForcedSystem, StateTangent};
use crate::discrete::{alpha_rule, integrate, lobatto_galerkin, IdentityMode, SolverConfig};
use crate::error::{Error, Result};
use crate::trajectory::{max_abs_diff, TrajectoryRecord};

/// Errors below this level are treated as roundoff and left out of fits.
pub const ROUNDOFF_FLOOR: f64 = 1e-11;

/// Largest allowed disagreement between the two references.
pub const REFERENCE_AGREEMENT: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum BenchmarkModel {
    /// Two coupled van der Pol oscillators.
    VanDerPol { eps: f64, rho: f64, lambda: f64 },
    /// `M q'' + D q' + K q = 0`.
    DampedLinear {
        mass: DMatrix<f64>,
        damping: DMatrix<f64>,
        stiffness: DMatrix<f64>,
    },
}

fn quadratic<T: Real>(a: &DMatrix<f64>, x: &[T]) -> T {
    let mut acc = T::zero();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if a[(i, j)] != 0.0 {
                acc = acc + x[i].clone() * x[j].clone() * a[(i, j)];
            }
        }
    }
    acc
}

impl ForcedModel for BenchmarkModel {
    fn dim(&self) -> usize {
        match self {
            BenchmarkModel::VanDerPol { .. } => 2,
            BenchmarkModel::DampedLinear { mass, .. } => mass.nrows(),
        }
    }

    fn lagrangian<T: Real>(&self, q: &[T], v: &[T]) -> T {
        match self {
            BenchmarkModel::VanDerPol { rho, lambda, .. } => {
                let kinetic = (v[0].square() + v[1].square()) * 0.5;
                let springs = (q[0].square() + q[1].square() * (1.0 + rho)) * 0.5;
                kinetic - springs - (q[0].clone() - q[1].clone()).square() * *lambda
            }
            BenchmarkModel::DampedLinear { mass, stiffness, .. } => {
                (quadratic(mass, v) - quadratic(stiffness, q)) * 0.5
            }
        }
    }

    fn force<T: Real>(&self, q: &[T], v: &[T]) -> Vec<T> {
        match self {
            BenchmarkModel::VanDerPol { eps, .. } => (0..2)
                .map(|i| (T::cst(*eps) - q[i].square()) * v[i].clone())
                .collect(),
            BenchmarkModel::DampedLinear { damping, .. } => (0..damping.nrows())
                .map(|i| {
                    (0..damping.ncols())
                        .filter(|&j| damping[(i, j)] != 0.0)
                        .fold(T::zero(), |acc, j| acc - v[j].clone() * damping[(i, j)])
                })
                .collect(),
        }
    }
}

/// A benchmark problem with its default initial data.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub name: String,
    pub system: ForcedSystem<BenchmarkModel>,
    pub initial: StateTangent,
    pub t_end: f64,
}

fn is_diagonal(a: &DMatrix<f64>) -> bool {
    (0..a.nrows()).all(|i| (0..a.ncols()).all(|j| i == j || a[(i, j)] == 0.0))
}

/// Solution of `m x'' + d x' + k x = 0` with `x(0) = x0`, `x'(0) = v0`.
fn scalar_damped(m: f64, d: f64, k: f64, x0: f64, v0: f64, t: f64) -> (f64, f64) {
    let a = -d / (2.0 * m);
    let disc = a * a - k / m;
    if disc < 0.0 {
        let w = (-disc).sqrt();
        let (c1, c2) = (x0, (v0 - a * x0) / w);
        let e = (a * t).exp();
        let (s, c) = (w * t).sin_cos();
        let x = e * (c1 * c + c2 * s);
        let v = e * ((a * c1 + w * c2) * c + (a * c2 - w * c1) * s);
        (x, v)
    } else if disc == 0.0 {
        let c2 = v0 - a * x0;
        let e = (a * t).exp();
        (e * (x0 + c2 * t), e * (a * (x0 + c2 * t) + c2))
    } else {
        let r = disc.sqrt();
        let (l1, l2) = (a + r, a - r);
        let c1 = (v0 - l2 * x0) / (l1 - l2);
        let c2 = x0 - c1;
        let (e1, e2) = ((l1 * t).exp(), (l2 * t).exp());
        (c1 * e1 + c2 * e2, c1 * l1 * e1 + c2 * l2 * e2)
    }
}

impl Benchmark {
    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    /// Closed-form state for diagonal damped linear systems.
    pub fn exact_state(&self, s0: &StateTangent, t: f64) -> Option<StateTangent> {
        match self.system.model() {
            BenchmarkModel::DampedLinear {
                mass,
                damping,
                stiffness,
            } if is_diagonal(mass) && is_diagonal(damping) && is_diagonal(stiffness) => {
                let (q, v) = (0..mass.nrows())
                    .map(|i| scalar_damped(mass[(i, i)], damping[(i, i)], stiffness[(i, i)], s0.q[i], s0.v[i], t))
                    .unzip();
                Some(StateTangent::new(q, v))
            }
            _ => None,
        }
    }
}

/// Damped linear benchmark; `M` must be symmetric positive definite.
pub fn benchmark_damped_linear(mass: DMatrix<f64>, damping: DMatrix<f64>, stiffness: DMatrix<f64>) -> Result<Benchmark> {
    let n = mass.nrows();
    if n == 0 || mass.ncols() != n {
        return Err(Error::BadMass);
    }
    for other in [&damping, &stiffness] {
        if other.nrows() != n || other.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: other.nrows().max(other.ncols()),
            });
        }
    }
    let all = mass.iter().chain(damping.iter()).chain(stiffness.iter());
    if all.clone().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("benchmark matrices"));
    }
    let scale = mass.amax().max(f64::MIN_POSITIVE);
    if (&mass - mass.transpose()).amax() > 1e-14 * scale || mass.clone().cholesky().is_none() {
        return Err(Error::BadMass);
    }
    let model = BenchmarkModel::DampedLinear {
        mass,
        damping,
        stiffness,
    };
    Ok(Benchmark {
        name: "damped_linear".into(),
        system: ForcedSystem::euclidean(model)?,
        initial: StateTangent::new(vec![1.0; n], vec![0.0; n]),
        t_end: 1.0,
    })
}

/// Coupled van der Pol oscillators with initial state `(-1/2, -1/4, 0, 4)`.
pub fn benchmark_van_der_pol(eps: f64, rho: f64, lambda: f64) -> Result<Benchmark> {
    if !(eps.is_finite() && rho.is_finite() && lambda.is_finite()) {
        return Err(Error::NonFinite("van der Pol parameters"));
    }
    Ok(Benchmark {
        name: "van_der_pol".into(),
        system: ForcedSystem::euclidean(BenchmarkModel::VanDerPol { eps, rho, lambda })?,
        initial: StateTangent::new(vec![-0.5, -0.25], vec![0.0, 4.0]),
        t_end: 1.0,
    })
}

pub const VAN_DER_POL_DEFAULTS: (f64, f64, f64) = (0.5, 0.02, 0.8);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Family {
    Alpha(f64),
    Lobatto(usize),
}

/// Which discrete Lagrangian to build and how to solve its steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorSpec {
    pub family: Family,
    pub solver: SolverConfig,
}

impl IntegratorSpec {
    pub fn midpoint() -> Self {
        Self::alpha(0.5)
    }

    pub fn alpha(alpha: f64) -> Self {
        IntegratorSpec {
            family: Family::Alpha(alpha),
            solver: SolverConfig::default(),
        }
    }

    pub fn lobatto(stages: usize) -> Self {
        IntegratorSpec {
            family: Family::Lobatto(stages),
            solver: SolverConfig::default(),
        }
    }

    pub fn with_mode(mut self, mode: IdentityMode) -> Self {
        self.solver.mode = mode;
        self
    }

    /// Control points per step.
    pub fn stages(&self) -> usize {
        match self.family {
            Family::Alpha(_) => 2,
            Family::Lobatto(s) => s,
        }
    }

    /// Runs the doubled integrator for `steps` steps of size `h`.
    pub fn run(&self, system: &ForcedSystem<BenchmarkModel>, s0: &StateTangent, steps: usize, h: f64) -> Result<TrajectoryRecord> {
        let ld = match self.family {
            Family::Alpha(a) => alpha_rule(system.doubled(), a)?,
            Family::Lobatto(s) => lobatto_galerkin(system.doubled(), s)?,
        };
        let ld = ld.with_solver(SolverConfig {
            mode: IdentityMode::Full,
            ..self.solver
        });
        integrate(&ld, s0, steps, h, &self.solver)
    }
}

impl fmt::Display for IntegratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            Family::Alpha(0.5) => write!(f, "midpoint"),
            Family::Alpha(a) => write!(f, "alpha{a}"),
            Family::Lobatto(s) => write!(f, "lobatto{s}"),
        }
    }
}

/// Geometric ladder of step sizes expressed as step counts over `t_end`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ladder {
    pub h_max: f64,
    pub h_min: f64,
    pub points: usize,
}

impl Default for Ladder {
    fn default() -> Self {
        Ladder {
            h_max: 0.25,
            h_min: 1e-3,
            points: 8,
        }
    }
}

impl Ladder {
    pub fn validate(&self, t_end: f64) -> Result<()> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::InvalidArgument("t_end must be positive".into()));
        }
        if !(self.h_min > 0.0 && self.h_max > self.h_min && self.h_max <= t_end) {
            return Err(Error::InvalidArgument("ladder needs 0 < h_min < h_max <= t_end".into()));
        }
        if self.points < 4 {
            return Err(Error::InvalidArgument("ladder needs at least 4 points".into()));
        }
        if self.h_max / self.h_min < 100.0 {
            return Err(Error::InvalidArgument("ladder must span at least two decades".into()));
        }
        Ok(())
    }

    /// Strictly increasing step counts, coarsest first.
    pub fn steps(&self, t_end: f64) -> Vec<usize> {
        let ratio = (self.h_min / self.h_max).ln();
        let mut out: Vec<usize> = (0..self.points)
            .map(|i| {
                let h = self.h_max * (ratio * i as f64 / (self.points - 1) as f64).exp();
                ((t_end / h).round() as usize).max(1)
            })
            .collect();
        out.dedup();
        out
    }
}

/// Final physical state and energy of a reference run.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub energy: f64,
    /// Disagreement with the explicit fifth-order solver.
    pub cross_check: f64,
}

/// Reference final state: doubled Lobatto s=3 with `steps` steps solved on
/// the identities, validated against the explicit solver.
pub fn reference_point(system: &ForcedSystem<BenchmarkModel>, s0: &StateTangent, t_end: f64, steps: usize) -> Result<ReferencePoint> {
    let h = t_end / steps as f64;
    let rec = IntegratorSpec::lobatto(3)
        .with_mode(IdentityMode::Restricted)
        .run(system, s0, steps, h)?;
    let explicit = reference_solve_at(system, s0, &[t_end], h)?.remove(0);
    let cotangent = legendre(system, &explicit)?;
    let cross_check = max_abs_diff(rec.final_q(), &cotangent.q).max(max_abs_diff(rec.final_p(), &cotangent.p));
    if !(cross_check < REFERENCE_AGREEMENT) {
        return Err(Error::ReferenceMismatch {
            disagreement: cross_check,
        });
    }
    let e = energy(system, &explicit, t_end)?.energy;
    Ok(ReferencePoint {
        q: rec.final_q().to_vec(),
        p: rec.final_p().to_vec(),
        energy: e,
        cross_check,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowFlag {
    /// Used in the slope fit.
    Fit,
    /// Error at or below the roundoff floor.
    Floor,
    /// Error grew when the step was refined (roundoff dominated).
    Plateau,
    /// Coarse step whose local order has not settled yet.
    Preasymptotic,
    /// The integrator failed at this step size.
    Failed,
}

impl fmt::Display for WindowFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WindowFlag::Fit => "fit",
            WindowFlag::Floor => "floor",
            WindowFlag::Plateau => "plateau",
            WindowFlag::Preasymptotic => "preasymptotic",
            WindowFlag::Failed => "failed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LadderPoint {
    pub steps: usize,
    pub h: f64,
    pub err_state: f64,
    pub err_energy: f64,
    pub max_identity_defect: f64,
    pub flag: WindowFlag,
    pub failure: Option<Error>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub retained: usize,
}

/// Least squares line through `(ln x, ln y)`.
pub fn fit_loglog(x: &[f64], y: &[f64]) -> Option<SlopeFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n as f64;
    let my = ly.iter().sum::<f64>() / n as f64;
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = ly.iter().map(|b| (b - my) * (b - my)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Some(SlopeFit {
        slope,
        intercept: my - slope * mx,
        r2,
        retained: n,
    })
}

/// Fewest points the pre-asymptotic rule leaves in a fit.
pub const MIN_RETAINED: usize = 4;

/// Relative mismatch between neighbouring local orders that marks the
/// coarsest point as pre-asymptotic.
pub const PREASYMPTOTIC_TOLERANCE: f64 = 0.2;

/// Flags ladder points (coarsest first) and fits the slope on those kept.
///
/// Points below [`ROUNDOFF_FLOOR`] are dropped, as is every point after the
/// first refinement that fails to decrease the error. Then, while more than
/// [`MIN_RETAINED`] points remain, the coarsest one is dropped if its local
/// order differs from the next local order by more than
/// [`PREASYMPTOTIC_TOLERANCE`] (relative).
pub fn classify_and_fit(points: &mut [LadderPoint]) -> Option<SlopeFit> {
    let mut last: Option<f64> = None;
    let mut plateau = false;
    for p in points.iter_mut() {
        if p.failure.is_some() || !p.err_state.is_finite() {
            p.flag = WindowFlag::Failed;
            continue;
        }
        if p.err_state < ROUNDOFF_FLOOR {
            p.flag = WindowFlag::Floor;
            plateau = true;
            continue;
        }
        if plateau || last.is_some_and(|e| p.err_state >= e) {
            p.flag = WindowFlag::Plateau;
            plateau = true;
            continue;
        }
        p.flag = WindowFlag::Fit;
        last = Some(p.err_state);
    }
    loop {
        let kept: Vec<usize> = (0..points.len()).filter(|&i| points[i].flag == WindowFlag::Fit).collect();
        if kept.len() <= MIN_RETAINED {
            break;
        }
        let local = |a: usize, b: usize| (points[a].err_state / points[b].err_state).ln() / (points[a].h / points[b].h).ln();
        let first = local(kept[0], kept[1]);
        let next = local(kept[1], kept[2]);
        if (first - next).abs() <= PREASYMPTOTIC_TOLERANCE * next.abs() {
            break;
        }
        points[kept[0]].flag = WindowFlag::Preasymptotic;
    }
    let (h, e): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|p| p.flag == WindowFlag::Fit)
        .map(|p| (p.h, p.err_state))
        .unzip();
    fit_loglog(&h, &e)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceStudy {
    pub benchmark: String,
    pub integrator: IntegratorSpec,
    pub t_end: f64,
    pub reference_steps: usize,
    pub reference_cross_check: f64,
    pub points: Vec<LadderPoint>,
    pub fit: Option<SlopeFit>,
    pub energy_fit: Option<SlopeFit>,
}

impl ConvergenceStudy {
    pub fn slope(&self) -> f64 {
        self.fit.as_ref().map_or(f64::NAN, |f| f.slope)
    }

    pub fn r2(&self) -> f64 {
        self.fit.as_ref().map_or(f64::NAN, |f| f.r2)
    }

    pub fn retained(&self) -> usize {
        self.fit.as_ref().map_or(0, |f| f.retained)
    }

    /// True when errors strictly decrease until they reach the floor.
    pub fn monotone_to_floor(&self) -> bool {
        let mut prev = f64::INFINITY;
        for p in &self.points {
            if p.flag == WindowFlag::Failed {
                return false;
            }
            if p.err_state < ROUNDOFF_FLOOR {
                return true;
            }
            if p.err_state >= prev {
                return false;
            }
            prev = p.err_state;
        }
        true
    }
}

/// Reference step count for a ladder: four times the finest.
pub fn reference_steps(ladder: &Ladder, t_end: f64) -> usize {
    4 * ladder.steps(t_end).last().copied().unwrap_or(1)
}

fn ladder_point(
    spec: &IntegratorSpec,
    system: &ForcedSystem<BenchmarkModel>,
    s0: &StateTangent,
    t_end: f64,
    steps: usize,
    reference: &ReferencePoint,
) -> LadderPoint {
    let h = t_end / steps as f64;
    match spec.run(system, s0, steps, h) {
        Ok(rec) => LadderPoint {
            steps,
            h,
            err_state: max_abs_diff(rec.final_q(), &reference.q).max(max_abs_diff(rec.final_p(), &reference.p)),
            err_energy: (rec.final_energy() - reference.energy).abs(),
            max_identity_defect: rec.max_identity_defect(),
            flag: WindowFlag::Fit,
            failure: None,
        },
        Err(e) => LadderPoint {
            steps,
            h,
            err_state: f64::NAN,
            err_energy: f64::NAN,
            max_identity_defect: f64::NAN,
            flag: WindowFlag::Failed,
            failure: Some(e),
        },
    }
}

fn energy_fit(points: &[LadderPoint]) -> Option<SlopeFit> {
    let (h, e): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|p| p.flag == WindowFlag::Fit && p.err_energy >= ROUNDOFF_FLOOR)
        .map(|p| (p.h, p.err_energy))
        .unzip();
    fit_loglog(&h, &e)
}

fn study_from(
    benchmark: &Benchmark,
    spec: &IntegratorSpec,
    s0: &StateTangent,
    ladder: &Ladder,
    reference: &ReferencePoint,
    ref_steps: usize,
) -> ConvergenceStudy {
    let t_end = benchmark.t_end;
    let mut points: Vec<LadderPoint> = ladder
        .steps(t_end)
        .into_par_iter()
        .map(|n| ladder_point(spec, &benchmark.system, s0, t_end, n, reference))
        .collect();
    let fit = classify_and_fit(&mut points);
    ConvergenceStudy {
        benchmark: benchmark.name.clone(),
        integrator: *spec,
        t_end,
        reference_steps: ref_steps,
        reference_cross_check: reference.cross_check,
        energy_fit: energy_fit(&points),
        points,
        fit,
    }
}

/// Runs `spec` over the ladder from the benchmark's initial state.
pub fn run_convergence(benchmark: &Benchmark, spec: &IntegratorSpec, ladder: &Ladder) -> Result<ConvergenceStudy> {
    ladder.validate(benchmark.t_end)?;
    spec.solver.validate()?;
    let ref_steps = reference_steps(ladder, benchmark.t_end);
    let reference = reference_point(&benchmark.system, &benchmark.initial, benchmark.t_end, ref_steps)?;
    Ok(study_from(benchmark, spec, &benchmark.initial, ladder, &reference, ref_steps))
}

/// Ratio `err(h) / err(h/2)` of final-state errors; about `2^r` for order `r`.
pub fn halving_ratio(benchmark: &Benchmark, spec: &IntegratorSpec, steps: usize, ref_steps: usize) -> Result<f64> {
    let t_end = benchmark.t_end;
    let s0 = &benchmark.initial;
    let reference = reference_point(&benchmark.system, s0, t_end, ref_steps)?;
    let err = |n: usize| -> Result<f64> {
        let p = ladder_point(spec, &benchmark.system, s0, t_end, n, &reference);
        match p.failure {
            Some(e) => Err(e),
            None => Ok(p.err_state),
        }
    };
    Ok(err(steps)? / err(2 * steps)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    pub samples: usize,
    pub seed: u64,
    /// Half width of the sampling box centred at the origin.
    pub half_width: f64,
    /// Also sample velocities in the box instead of keeping the defaults.
    pub sample_velocities: bool,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            samples: 25,
            seed: 0,
            half_width: 4.0,
            sample_velocities: false,
        }
    }
}

impl EnsembleSpec {
    /// Initial state of sample `id`, drawn from ChaCha8 stream `id`.
    pub fn initial_state(&self, base: &StateTangent, id: usize) -> StateTangent {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id as u64);
        let w = self.half_width;
        let q = base.q.iter().map(|_| rng.gen_range(-w..=w)).collect();
        let v = if self.sample_velocities {
            base.v.iter().map(|_| rng.gen_range(-w..=w)).collect()
        } else {
            base.v.clone()
        };
        StateTangent::new(q, v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSample {
    pub sample_id: usize,
    pub initial: StateTangent,
    pub study: std::result::Result<ConvergenceStudy, Error>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStudy {
    pub spec: EnsembleSpec,
    pub integrator: IntegratorSpec,
    pub h: Vec<f64>,
    pub samples: Vec<EnsembleSample>,
}

/// Pointwise statistics of one error column across successful samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub mean: Vec<f64>,
    pub max: Vec<f64>,
    pub min: Vec<f64>,
}

impl EnsembleStudy {
    fn envelope(&self, pick: impl Fn(&LadderPoint) -> f64) -> Envelope {
        let k = self.h.len();
        let mut env = Envelope {
            mean: vec![0.0; k],
            max: vec![f64::NEG_INFINITY; k],
            min: vec![f64::INFINITY; k],
        };
        let mut count = vec![0usize; k];
        for s in &self.samples {
            let Ok(study) = &s.study else { continue };
            for (i, p) in study.points.iter().enumerate() {
                let e = pick(p);
                if e.is_finite() {
                    env.mean[i] += e;
                    env.max[i] = env.max[i].max(e);
                    env.min[i] = env.min[i].min(e);
                    count[i] += 1;
                }
            }
        }
        for (m, c) in env.mean.iter_mut().zip(count) {
            *m = if c > 0 { *m / c as f64 } else { f64::NAN };
        }
        env
    }

    pub fn state_envelope(&self) -> Envelope {
        self.envelope(|p| p.err_state)
    }

    pub fn energy_envelope(&self) -> Envelope {
        self.envelope(|p| p.err_energy)
    }

    pub fn slopes(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| s.study.as_ref().map_or(f64::NAN, ConvergenceStudy::slope))
            .collect()
    }
}

/// Convergence studies from seeded random initial states.
pub fn run_ensemble(benchmark: &Benchmark, integrator: &IntegratorSpec, ladder: &Ladder, spec: &EnsembleSpec) -> Result<EnsembleStudy> {
    ladder.validate(benchmark.t_end)?;
    integrator.solver.validate()?;
    if spec.samples == 0 || !(spec.half_width > 0.0 && spec.half_width.is_finite()) {
        return Err(Error::InvalidArgument("ensemble needs samples > 0 and a positive box".into()));
    }
    let t_end = benchmark.t_end;
    let ref_steps = reference_steps(ladder, t_end);
    let samples = (0..spec.samples)
        .into_par_iter()
        .map(|id| {
            let s0 = spec.initial_state(&benchmark.initial, id);
            let study = reference_point(&benchmark.system, &s0, t_end, ref_steps)
                .map(|r| study_from(benchmark, integrator, &s0, ladder, &r, ref_steps));
            EnsembleSample {
                sample_id: id,
                initial: s0,
                study,
            }
        })
        .collect();
    Ok(EnsembleStudy {
        spec: spec.clone(),
        integrator: *integrator,
        h: ladder.steps(t_end).iter().map(|&n| t_end / n as f64).collect(),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyErrorSeries {
    pub times: Vec<f64>,
    pub error: Vec<f64>,
    pub final_error: f64,
}

/// `|E(t) - E_ref(t)|` on a shared time grid.
pub fn energy_error_series(record: &TrajectoryRecord, reference: &TrajectoryRecord) -> Result<EnergyErrorSeries> {
    if record.len() != reference.len() || record.is_empty() {
        return Err(Error::GridMismatch);
    }
    for (a, b) in record.times.iter().zip(&reference.times) {
        if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
            return Err(Error::GridMismatch);
        }
    }
    let error: Vec<f64> = record
        .energy
        .iter()
        .zip(&reference.energy)
        .map(|(a, b)| (a - b).abs())
        .collect();
    Ok(EnergyErrorSeries {
        times: record.times.clone(),
        final_error: *error.last().unwrap_or(&0.0),
        error,
    })
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `contents` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub const CONVERGENCE_HEADER: &str = "method,stages,h,err_state_inf,err_energy,slope_window_flag";
pub const ENSEMBLE_HEADER: &str = "sample_id,seed,h,err_state_inf,err_energy";

pub fn convergence_csv(studies: &[ConvergenceStudy]) -> String {
    let mut out = format!("{CONVERGENCE_HEADER}\n");
    for s in studies {
        for p in &s.points {
            out += &format!(
                "{},{},{},{},{},{}\n",
                s.integrator,
                s.integrator.stages(),
                fmt_f64(p.h),
                fmt_f64(p.err_state),
                fmt_f64(p.err_energy),
                p.flag
            );
        }
    }
    out
}

pub fn ensemble_csv(study: &EnsembleStudy) -> String {
    let mut out = format!("{ENSEMBLE_HEADER}\n");
    for s in &study.samples {
        let rows: Vec<(f64, f64, f64)> = match &s.study {
            Ok(c) => c.points.iter().map(|p| (p.h, p.err_state, p.err_energy)).collect(),
            Err(_) => study.h.iter().map(|&h| (h, f64::NAN, f64::NAN)).collect(),
        };
        for (h, es, ee) in rows {
            out += &format!("{},{},{},{},{}\n", s.sample_id, study.spec.seed, fmt_f64(h), fmt_f64(es), fmt_f64(ee));
        }
    }
    out
}

pub fn trajectory_header(n: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("q{i}")));
    cols.extend((1..=n).map(|i| format!("p{i}")));
    cols.extend(["E", "identity_defect", "newton_iters"].map(String::from));
    cols.join(",")
}

pub fn trajectory_csv(record: &TrajectoryRecord) -> String {
    let n = record.dim();
    let mut out = trajectory_header(n) + "\n";
    for k in 0..record.len() {
        let mut row = vec![fmt_f64(record.times[k])];
        row.extend(record.q[k].iter().map(|&x| fmt_f64(x)));
        row.extend(record.p[k].iter().map(|&x| fmt_f64(x)));
        row.push(fmt_f64(record.energy[k]));
        row.push(fmt_f64(record.identity_defect[k]));
        row.push(record.newton_iters[k].to_string());
        out += &row.join(",");
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuous::reference_solve;

    fn scalar(m: f64, d: f64, k: f64) -> Benchmark {
        let one = |x| DMatrix::from_element(1, 1, x);
        benchmark_damped_linear(one(m), one(d), one(k)).unwrap()
    }

    #[test]
    fn van_der_pol_initial_energy() {
        let (e, r, l) = VAN_DER_POL_DEFAULTS;
        let b = benchmark_van_der_pol(e, r, l).unwrap();
        let en = energy(&b.system, &b.initial, 0.0).unwrap().energy;
        let (q1, q2, v2) = (-0.5_f64, -0.25_f64, 4.0_f64);
        let direct = 0.5 * v2 * v2 + 0.5 * (q1 * q1 + 1.02 * q2 * q2) + 0.8 * (q1 - q2).powi(2);
        assert!((en - direct).abs() < 1e-14);
        assert!((en - 8.206875).abs() < 1e-12);
    }

    #[test]
    fn single_van_der_pol_limit() {
        let b = benchmark_van_der_pol(0.5, 0.0, 0.0).unwrap();
        let s0 = StateTangent::new(vec![1.0, 0.0], vec![0.5, 0.0]);
        let rec = reference_solve(&b.system, &s0, 1.0, 1e-3).unwrap();
        // p = v for this Lagrangian; check q'' - (eps - q^2) q' + q = 0 by differences
        let h = rec.times[1] - rec.times[0];
        for k in 1..rec.len() - 1 {
            let (q, v) = (rec.q[k][0], rec.p[k][0]);
            let acc = (rec.p[k + 1][0] - rec.p[k - 1][0]) / (2.0 * h);
            assert!((acc - (0.5 - q * q) * v + q).abs() < 1e-5);
            assert_eq!(rec.q[k][1], 0.0);
        }
        let exact = crate::continuous::forced_el_acceleration(&b.system, &s0).unwrap();
        assert!((exact[0] - ((0.5 - 1.0) * 0.5 - 1.0)).abs() < 1e-8);
    }

    #[test]
    fn damped_linear_validation_and_closed_form() {
        let one = |x| DMatrix::from_element(1, 1, x);
        assert_eq!(benchmark_damped_linear(one(-1.0), one(0.0), one(1.0)).unwrap_err(), Error::BadMass);
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(benchmark_damped_linear(skew, DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).is_err());
        let b = scalar(1.0, 0.2, 1.0);
        let s0 = StateTangent::new(vec![1.0], vec![0.0]);
        let t = 3.0;
        let exact = b.exact_state(&s0, t).unwrap();
        let w = 0.99_f64.sqrt();
        let x = (-0.1 * t).exp() * ((w * t).cos() + 0.1 / w * (w * t).sin());
        assert!((exact.q[0] - x).abs() < 1e-14);
        let r = reference_solve_at(&b.system, &s0, &[t], 1e-3).unwrap();
        assert!((r[0].q[0] - x).abs() < 1e-10 && (r[0].v[0] - exact.v[0]).abs() < 1e-10);
        // over- and critically damped branches against the explicit solver
        for (d, k) in [(3.0, 1.0), (2.0, 1.0)] {
            let b = scalar(1.0, d, k);
            let s0 = StateTangent::new(vec![0.3], vec![-0.7]);
            let e = b.exact_state(&s0, 1.5).unwrap();
            let r = reference_solve_at(&b.system, &s0, &[1.5], 1e-3).unwrap();
            assert!((e.q[0] - r[0].q[0]).abs() < 1e-10 && (e.v[0] - r[0].v[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn harmonic_energy_is_conserved_by_reference() {
        let b = benchmark_damped_linear(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        let rec = reference_solve(&b.system, &b.initial, 10.0, 1e-2).unwrap();
        let e0 = rec.energy[0];
        assert!(rec.energy.iter().all(|e| (e - e0).abs() < 1e-8));
    }

    #[test]
    fn ladder_steps_are_geometric() {
        let l = Ladder::default();
        let steps = l.steps(1.0);
        assert_eq!(steps.first(), Some(&4));
        assert_eq!(steps.last(), Some(&1000));
        assert_eq!(steps.len(), 8);
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        assert!(Ladder { points: 3, ..l }.validate(1.0).is_err());
        assert!(Ladder { h_min: 0.01, ..l }.validate(1.0).is_err());
    }

    #[test]
    fn loglog_fit_recovers_power_law() {
        let h = [0.1, 0.05, 0.025, 0.0125];
        let e: Vec<f64> = h.iter().map(|x: &f64| 3.0 * x.powi(4)).collect();
        let f = fit_loglog(&h, &e).unwrap();
        assert!((f.slope - 4.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        assert!(fit_loglog(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn classification_drops_floor_and_plateau() {
        let mk = |h: f64, e: f64| LadderPoint {
            steps: 1,
            h,
            err_state: e,
            err_energy: e,
            max_identity_defect: 0.0,
            flag: WindowFlag::Fit,
            failure: None,
        };
        let mut pts = vec![mk(0.1, 1e-4), mk(0.05, 6e-6), mk(0.025, 4e-7), mk(0.0125, 5e-7), mk(0.006, 1e-12)];
        let fit = classify_and_fit(&mut pts).unwrap();
        let flags: Vec<_> = pts.iter().map(|p| p.flag).collect();
        assert_eq!(flags, [WindowFlag::Fit, WindowFlag::Fit, WindowFlag::Fit, WindowFlag::Plateau, WindowFlag::Floor]);
        assert_eq!(fit.retained, 3);
    }

    #[test]
    fn energy_series_requires_aligned_grids() {
        let b = scalar(1.0, 0.2, 1.0);
        let a = IntegratorSpec::midpoint().run(&b.system, &b.initial, 10, 0.1).unwrap();
        let same = energy_error_series(&a, &a).unwrap();
        assert_eq!(same.final_error, 0.0);
        let c = IntegratorSpec::midpoint().run(&b.system, &b.initial, 20, 0.05).unwrap();
        assert_eq!(energy_error_series(&a, &c).unwrap_err(), Error::GridMismatch);
    }

    #[test]
    fn midpoint_energy_error_ratio_is_four() {
        let (e, r, l) = VAN_DER_POL_DEFAULTS;
        let b = benchmark_van_der_pol(e, r, l).unwrap();
        let reference = reference_point(&b.system, &b.initial, 1.0, 2000).unwrap();
        let spec = IntegratorSpec::midpoint();
        let err = |n: usize| {
            let rec = spec.run(&b.system, &b.initial, n, 1.0 / n as f64).unwrap();
            (rec.final_energy() - reference.energy).abs()
        };
        let ratio = err(100) / err(200);
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn ensemble_states_are_reproducible() {
        let spec = EnsembleSpec {
            seed: 42,
            ..Default::default()
        };
        let base = StateTangent::new(vec![-0.5, -0.25], vec![0.0, 4.0]);
        let a = spec.initial_state(&base, 3);
        assert_eq!(a, spec.initial_state(&base, 3));
        assert_ne!(a, spec.initial_state(&base, 4));
        assert_eq!(a.v, base.v);
        assert!(a.q.iter().all(|x| x.abs() <= 4.0));
        let all = EnsembleSpec {
            sample_velocities: true,
            ..spec
        };
        assert_ne!(all.initial_state(&base, 3).v, base.v);
    }

    #[test]
    fn csv_rows_follow_schema() {
        let b = scalar(1.0, 0.2, 1.0);
        let rec = IntegratorSpec::midpoint().run(&b.system, &b.initial, 4, 0.25).unwrap();
        let csv = trajectory_csv(&rec);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,q1,p1,E,identity_defect,newton_iters"));
        let rows: Vec<_> = lines.collect();
        assert_eq!(rows.len(), 5);
        for r in rows {
            let cols: Vec<_> = r.split(',').collect();
            assert_eq!(cols.len(), 6);
            assert!(cols[..5].iter().all(|c| c.parse::<f64>().is_ok()));
            assert!(cols[5].parse::<usize>().is_ok());
        }
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
    }
}
