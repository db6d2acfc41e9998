//! Charts and retractions.
//!
//! Every manifold is handled in a single global chart. A retraction here is
//! the map `tau(q, Q)` sending a nearby pair of configurations to a tangent
//! vector at the base point `q`; the argument order is always base point
//! first. Its partial derivatives are supplied in closed form.

use nalgebra::DMatrix;

use crate::autodiff::Real;
use crate::error::{Error, Result};

pub type Point = Vec<f64>;
pub type TangentVec = Vec<f64>;
pub type CotangentVec = Vec<f64>;

/// A global coordinate chart on an `n`-dimensional configuration space.
#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    dim: usize,
    periodic: Vec<bool>,
}

impl Chart {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("chart dimension must be >= 1".into()));
        }
        Ok(Chart {
            dim,
            periodic: vec![false; dim],
        })
    }

    /// Marks angle coordinates. Only [`Chart::wrap`] looks at the mask.
    pub fn with_periodic(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: mask.len(),
            });
        }
        self.periodic = mask;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn periodic_mask(&self) -> &[bool] {
        &self.periodic
    }

    /// Wraps angle coordinates into `(-pi, pi]` for display.
    pub fn wrap(&self, q: &[f64]) -> Point {
        q.iter()
            .zip(&self.periodic)
            .map(|(&x, &angle)| {
                if angle {
                    let two_pi = 2.0 * std::f64::consts::PI;
                    let r = (x + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
                    if r == -std::f64::consts::PI {
                        std::f64::consts::PI
                    } else {
                        r
                    }
                } else {
                    x
                }
            })
            .collect()
    }

    pub fn check_point(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("point"));
        }
        Ok(())
    }
}

/// A retraction `tau: Q x Q -> TQ` in coordinates.
pub trait Retraction: Send + Sync {
    fn tau<T: Real>(&self, base: &[T], target: &[T]) -> Vec<T>;

    /// `d tau / d base`, rows indexed by the output component.
    fn d1_tau(&self, base: &[f64], target: &[f64]) -> DMatrix<f64>;

    /// `d tau / d target`.
    fn d2_tau(&self, base: &[f64], target: &[f64]) -> DMatrix<f64>;
}

/// `tau(q, Q) = Q - q`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Euclidean;

impl Retraction for Euclidean {
    fn tau<T: Real>(&self, base: &[T], target: &[T]) -> Vec<T> {
        base.iter()
            .zip(target)
            .map(|(q, big_q)| big_q.clone() - q.clone())
            .collect()
    }

    fn d1_tau(&self, base: &[f64], _target: &[f64]) -> DMatrix<f64> {
        -DMatrix::identity(base.len(), base.len())
    }

    fn d2_tau(&self, base: &[f64], _target: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(base.len(), base.len())
    }
}

pub fn euclidean_retraction(_chart: &Chart) -> Euclidean {
    Euclidean
}

/// Worst violations observed by [`check_retraction_axioms`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetractionReport {
    pub samples: usize,
    pub max_tau_on_diagonal: f64,
    pub max_d2_defect: f64,
    pub max_d1_defect: f64,
    pub max_cancellation: f64,
}

/// Checks `tau(q,q) = 0`, `d2_tau(q,q) = I` and `d1_tau(q,q) = -I` at each sample.
pub fn check_retraction_axioms<R: Retraction>(
    retraction: &R,
    samples: &[Point],
    tol: f64,
) -> Result<RetractionReport> {
    let mut report = RetractionReport {
        samples: samples.len(),
        ..Default::default()
    };
    for q in samples {
        let n = q.len();
        let eye = DMatrix::<f64>::identity(n, n);
        let t = retraction.tau(q, q);
        let d1 = retraction.d1_tau(q, q);
        let d2 = retraction.d2_tau(q, q);
        let tau_norm = t.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        report.max_tau_on_diagonal = report.max_tau_on_diagonal.max(tau_norm);
        report.max_d2_defect = report.max_d2_defect.max((&d2 - &eye).amax());
        report.max_d1_defect = report.max_d1_defect.max((&d1 + &eye).amax());
        report.max_cancellation = report.max_cancellation.max((&d1 + &d2).amax());
    }
    let checks = [
        ("tau", report.max_tau_on_diagonal),
        ("d2_tau", report.max_d2_defect),
        ("d1_tau", report.max_d1_defect),
        ("d1_tau+d2_tau", report.max_cancellation),
    ];
    for (symbol, magnitude) in checks {
        if !(magnitude <= tol) {
            return Err(Error::ViolationFound { symbol, magnitude });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::jacobian;
    use proptest::prelude::*;

    struct Sinh;

    impl Retraction for Sinh {
        fn tau<T: Real>(&self, base: &[T], target: &[T]) -> Vec<T> {
            base.iter()
                .zip(target)
                .map(|(q, b)| (b.clone() - q.clone()).sinh())
                .collect()
        }
        fn d1_tau(&self, base: &[f64], target: &[f64]) -> DMatrix<f64> {
            -self.d2_tau(base, target)
        }
        fn d2_tau(&self, base: &[f64], target: &[f64]) -> DMatrix<f64> {
            let d: Vec<f64> = base.iter().zip(target).map(|(q, b)| (b - q).cosh()).collect();
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d))
        }
    }

    struct Doubling;

    impl Retraction for Doubling {
        fn tau<T: Real>(&self, base: &[T], target: &[T]) -> Vec<T> {
            base.iter()
                .zip(target)
                .map(|(q, b)| (b.clone() - q.clone()) * 2.0)
                .collect()
        }
        fn d1_tau(&self, base: &[f64], _target: &[f64]) -> DMatrix<f64> {
            DMatrix::identity(base.len(), base.len()) * -2.0
        }
        fn d2_tau(&self, base: &[f64], _target: &[f64]) -> DMatrix<f64> {
            DMatrix::identity(base.len(), base.len()) * 2.0
        }
    }

    fn samples() -> Vec<Point> {
        vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![-3.5, 0.25], vec![1e3, -7.0]]
    }

    #[test]
    fn euclidean_examples() {
        let chart = Chart::new(2).unwrap();
        let r = euclidean_retraction(&chart);
        assert_eq!(r.tau(&[1.0, 2.0], &[1.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(r.tau(&[0.0, 0.0], &[3.0, -1.0]), vec![3.0, -1.0]);
        assert_eq!(r.d2_tau(&[5.0, 1.0], &[-2.0, 0.0]), DMatrix::identity(2, 2));
        assert_eq!(r.d1_tau(&[5.0, 1.0], &[-2.0, 0.0]), -DMatrix::identity(2, 2));
    }

    #[test]
    fn axioms_hold_for_euclidean_and_sinh() {
        let report = check_retraction_axioms(&Euclidean, &samples(), 1e-12).unwrap();
        assert_eq!(report.max_tau_on_diagonal, 0.0);
        assert_eq!(report.samples, 4);
        check_retraction_axioms(&Sinh, &samples(), 1e-12).unwrap();
    }

    #[test]
    fn scaled_retraction_fails_on_d2() {
        let err = check_retraction_axioms(&Doubling, &samples(), 1e-12).unwrap_err();
        assert_eq!(
            err,
            Error::ViolationFound {
                symbol: "d2_tau",
                magnitude: 1.0
            }
        );
    }

    #[test]
    fn closed_form_derivatives_match_ad() {
        let (q, b) = ([0.3, -0.4], [0.9, 0.1]);
        let x = [q[0], q[1], b[0], b[1]];
        let jac = jacobian(|y| Sinh.tau(&y[..2], &y[2..]), &x).unwrap();
        let d1 = Sinh.d1_tau(&q, &b);
        let d2 = Sinh.d2_tau(&q, &b);
        assert!((jac.columns(0, 2) - d1).amax() < 1e-15);
        assert!((jac.columns(2, 2) - d2).amax() < 1e-15);
    }

    #[test]
    fn chart_validation_and_wrapping() {
        assert!(Chart::new(0).is_err());
        let chart = Chart::new(2).unwrap().with_periodic(vec![true, false]).unwrap();
        let w = chart.wrap(&[3.0 * std::f64::consts::PI, 10.0]);
        assert!((w[0] - std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(w[1], 10.0);
        assert!(chart.check_point(&[1.0]).is_err());
        assert!(chart.check_point(&[1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn coincident_derivatives_cancel(q in prop::collection::vec(-10.0f64..10.0, 1..5)) {
            let t = Sinh.tau(&q, &q);
            prop_assert!(t.iter().all(|x| x.abs() < 1e-14));
            let sum = Sinh.d1_tau(&q, &q) + Sinh.d2_tau(&q, &q);
            prop_assert!(sum.amax() < 1e-12);
            prop_assert!(Euclidean.tau(&q, &q).iter().all(|x| *x == 0.0));
        }
    }
}
