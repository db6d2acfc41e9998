//! Forward-mode automatic differentiation.
//!
//! Two carriers are provided. [`Dual`] propagates a value and a dense
//! gradient, [`Dual2`] additionally propagates the Hessian. Both keep an empty
//! gradient (or Hessian) to mean "identically zero", which makes constants
//! and affine intermediates cheap inside the quadrature loops of the discrete
//! Lagrangians.
//!
//! User code is written once against the [`Real`] trait and evaluated with
//! `f64`, `Dual` or `Dual2` as needed:
//!
//! ```
//! use fvi::autodiff::{hessian, Real};
//!
//! fn energy<T: Real>(x: &[T]) -> T {
//!     (x[0].clone() * x[0].clone() + x[1].clone() * x[1].clone()) * 0.5
//! }
//!
//! let (_, _, h) = hessian(|x| energy(x), &[1.0, 2.0]).unwrap();
//! assert_eq!(h[(0, 0)], 1.0);
//! assert_eq!(h[(0, 1)], 0.0);
//! ```

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Scalar arithmetic shared by `f64` and the dual carriers.
pub trait Real:
    Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(x: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn sinh(&self) -> Self;
    fn cosh(&self) -> Self;
    fn powi(&self, n: i32) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn square(&self) -> Self {
        self.clone() * self.clone()
    }
}

impl Real for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn sinh(&self) -> Self {
        f64::sinh(*self)
    }
    fn cosh(&self) -> Self {
        f64::cosh(*self)
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
}

/// Inner product of two equally sized slices.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (x, y)| acc + x.clone() * y.clone())
}

/// Lift a slice of plain values into any [`Real`] as constants.
pub fn constants<T: Real>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::cst(v)).collect()
}

// Vector helpers treating an empty vector as zero.

fn lin2(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    match (x.is_empty(), y.is_empty()) {
        (true, true) => Vec::new(),
        (false, true) => x.iter().map(|v| a * v).collect(),
        (true, false) => y.iter().map(|v| b * v).collect(),
        (false, false) => x.iter().zip(y).map(|(u, v)| a * u + b * v).collect(),
    }
}

fn scaled(a: f64, x: &[f64]) -> Vec<f64> {
    if x.is_empty() || a == 0.0 {
        Vec::new()
    } else {
        x.iter().map(|v| a * v).collect()
    }
}

/// First-order dual number with a dense gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl Dual {
    pub fn constant(value: f64) -> Self {
        Dual {
            value,
            grad: Vec::new(),
        }
    }

    /// The `index`-th of `n` independent variables.
    pub fn variable(value: f64, index: usize, n: usize) -> Self {
        let mut grad = vec![0.0; n];
        grad[index] = 1.0;
        Dual { value, grad }
    }

    /// Seed all entries of `x` as independent variables.
    pub fn seed(x: &[f64]) -> Vec<Dual> {
        let n = x.len();
        x.iter()
            .enumerate()
            .map(|(i, &v)| Dual::variable(v, i, n))
            .collect()
    }

    /// Gradient padded to `n` entries.
    pub fn gradient(&self, n: usize) -> Vec<f64> {
        if self.grad.is_empty() {
            vec![0.0; n]
        } else {
            self.grad.clone()
        }
    }

    fn chain(&self, f0: f64, f1: f64) -> Self {
        Dual {
            value: f0,
            grad: scaled(f1, &self.grad),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            value: self.value + o.value,
            grad: lin2(1.0, &self.grad, 1.0, &o.grad),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            value: self.value - o.value,
            grad: lin2(1.0, &self.grad, -1.0, &o.grad),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            value: self.value * o.value,
            grad: lin2(o.value, &self.grad, self.value, &o.grad),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.value;
        let value = self.value * inv;
        Dual {
            value,
            grad: lin2(inv, &self.grad, -value * inv, &o.grad),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            value: -self.value,
            grad: self.grad.iter().map(|g| -g).collect(),
        }
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(mut self, o: f64) -> Dual {
        self.value += o;
        self
    }
}

impl Sub<f64> for Dual {
    type Output = Dual;
    fn sub(mut self, o: f64) -> Dual {
        self.value -= o;
        self
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, o: f64) -> Dual {
        Dual {
            value: self.value * o,
            grad: scaled(o, &self.grad),
        }
    }
}

impl Div<f64> for Dual {
    type Output = Dual;
    fn div(self, o: f64) -> Dual {
        self * (1.0 / o)
    }
}

impl Real for Dual {
    fn cst(x: f64) -> Self {
        Dual::constant(x)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn sin(&self) -> Self {
        self.chain(self.value.sin(), self.value.cos())
    }
    fn cos(&self) -> Self {
        self.chain(self.value.cos(), -self.value.sin())
    }
    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e, e)
    }
    fn ln(&self) -> Self {
        self.chain(self.value.ln(), 1.0 / self.value)
    }
    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn sinh(&self) -> Self {
        self.chain(self.value.sinh(), self.value.cosh())
    }
    fn cosh(&self) -> Self {
        self.chain(self.value.cosh(), self.value.sinh())
    }
    fn powi(&self, n: i32) -> Self {
        let d = if n == 0 {
            0.0
        } else {
            n as f64 * self.value.powi(n - 1)
        };
        self.chain(self.value.powi(n), d)
    }
}

/// Second-order dual number: value, gradient and row-major Hessian.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual2 {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl Dual2 {
    pub fn constant(value: f64) -> Self {
        Dual2 {
            value,
            grad: Vec::new(),
            hess: Vec::new(),
        }
    }

    pub fn variable(value: f64, index: usize, n: usize) -> Self {
        let mut grad = vec![0.0; n];
        grad[index] = 1.0;
        Dual2 {
            value,
            grad,
            hess: Vec::new(),
        }
    }

    pub fn seed(x: &[f64]) -> Vec<Dual2> {
        let n = x.len();
        x.iter()
            .enumerate()
            .map(|(i, &v)| Dual2::variable(v, i, n))
            .collect()
    }

    pub fn gradient(&self, n: usize) -> Vec<f64> {
        if self.grad.is_empty() {
            vec![0.0; n]
        } else {
            self.grad.clone()
        }
    }

    pub fn hessian(&self, n: usize) -> DMatrix<f64> {
        if self.hess.is_empty() {
            DMatrix::zeros(n, n)
        } else {
            DMatrix::from_row_slice(n, n, &self.hess)
        }
    }

    // h += a * (x y^T + y x^T)
    fn add_sym_outer(h: &mut Vec<f64>, a: f64, x: &[f64], y: &[f64]) {
        let n = x.len();
        if h.is_empty() {
            *h = vec![0.0; n * n];
        }
        for i in 0..n {
            let xi = x[i];
            let yi = y[i];
            if xi == 0.0 && yi == 0.0 {
                continue;
            }
            let row = &mut h[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] += a * (xi * y[j] + yi * x[j]);
            }
        }
    }

    fn chain(&self, f0: f64, f1: f64, f2: f64) -> Self {
        if self.grad.is_empty() {
            return Dual2::constant(f0);
        }
        let mut hess = scaled(f1, &self.hess);
        if f2 != 0.0 {
            Self::add_sym_outer(&mut hess, 0.5 * f2, &self.grad, &self.grad);
        }
        Dual2 {
            value: f0,
            grad: scaled(f1, &self.grad),
            hess,
        }
    }

    fn recip(&self) -> Self {
        let inv = 1.0 / self.value;
        self.chain(inv, -inv * inv, 2.0 * inv * inv * inv)
    }
}

impl Add for Dual2 {
    type Output = Dual2;
    fn add(self, o: Dual2) -> Dual2 {
        Dual2 {
            value: self.value + o.value,
            grad: lin2(1.0, &self.grad, 1.0, &o.grad),
            hess: lin2(1.0, &self.hess, 1.0, &o.hess),
        }
    }
}

impl Sub for Dual2 {
    type Output = Dual2;
    fn sub(self, o: Dual2) -> Dual2 {
        Dual2 {
            value: self.value - o.value,
            grad: lin2(1.0, &self.grad, -1.0, &o.grad),
            hess: lin2(1.0, &self.hess, -1.0, &o.hess),
        }
    }
}

impl Mul for Dual2 {
    type Output = Dual2;
    fn mul(self, o: Dual2) -> Dual2 {
        let mut hess = lin2(o.value, &self.hess, self.value, &o.hess);
        if !self.grad.is_empty() && !o.grad.is_empty() {
            Dual2::add_sym_outer(&mut hess, 1.0, &self.grad, &o.grad);
        }
        Dual2 {
            value: self.value * o.value,
            grad: lin2(o.value, &self.grad, self.value, &o.grad),
            hess,
        }
    }
}

impl Div for Dual2 {
    type Output = Dual2;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, o: Dual2) -> Dual2 {
        if o.grad.is_empty() {
            return self * (1.0 / o.value);
        }
        self * o.recip()
    }
}

impl Neg for Dual2 {
    type Output = Dual2;
    fn neg(self) -> Dual2 {
        Dual2 {
            value: -self.value,
            grad: self.grad.iter().map(|g| -g).collect(),
            hess: self.hess.iter().map(|g| -g).collect(),
        }
    }
}

impl Add<f64> for Dual2 {
    type Output = Dual2;
    fn add(mut self, o: f64) -> Dual2 {
        self.value += o;
        self
    }
}

impl Sub<f64> for Dual2 {
    type Output = Dual2;
    fn sub(mut self, o: f64) -> Dual2 {
        self.value -= o;
        self
    }
}

impl Mul<f64> for Dual2 {
    type Output = Dual2;
    fn mul(self, o: f64) -> Dual2 {
        Dual2 {
            value: self.value * o,
            grad: scaled(o, &self.grad),
            hess: scaled(o, &self.hess),
        }
    }
}

impl Div<f64> for Dual2 {
    type Output = Dual2;
    fn div(self, o: f64) -> Dual2 {
        self * (1.0 / o)
    }
}

impl Real for Dual2 {
    fn cst(x: f64) -> Self {
        Dual2::constant(x)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn sin(&self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(&self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(c, -s, -c)
    }
    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }
    fn ln(&self) -> Self {
        let inv = 1.0 / self.value;
        self.chain(self.value.ln(), inv, -inv * inv)
    }
    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.value))
    }
    fn sinh(&self) -> Self {
        let (s, c) = (self.value.sinh(), self.value.cosh());
        self.chain(s, c, s)
    }
    fn cosh(&self) -> Self {
        let (s, c) = (self.value.sinh(), self.value.cosh());
        self.chain(c, s, c)
    }
    fn powi(&self, n: i32) -> Self {
        let x = self.value;
        let nf = n as f64;
        let d1 = if n == 0 { 0.0 } else { nf * x.powi(n - 1) };
        let d2 = if n == 0 || n == 1 {
            0.0
        } else {
            nf * (nf - 1.0) * x.powi(n - 2)
        };
        self.chain(x.powi(n), d1, d2)
    }
}

fn finite(values: impl IntoIterator<Item = f64>) -> bool {
    values.into_iter().all(f64::is_finite)
}

/// Exact gradient of `f` at `x`.
pub fn gradient<F>(f: F, x: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[Dual]) -> Dual,
{
    let out = f(&Dual::seed(x));
    let g = out.gradient(x.len());
    if !out.value.is_finite() || !finite(g.iter().copied()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(g)
}

/// Value, gradient and Hessian of `f` at `x`.
pub fn hessian<F>(f: F, x: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>)>
where
    F: Fn(&[Dual2]) -> Dual2,
{
    let n = x.len();
    let out = f(&Dual2::seed(x));
    let g = out.gradient(n);
    let h = out.hessian(n);
    if !out.value.is_finite() || !finite(g.iter().copied()) || !finite(h.iter().copied()) {
        return Err(Error::NonFinite("hessian"));
    }
    Ok((out.value, g, h))
}

/// Jacobian of a vector map, rows indexed by output.
pub fn jacobian<F>(g: F, x: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[Dual]) -> Vec<Dual>,
{
    let n = x.len();
    let out = g(&Dual::seed(x));
    let mut jac = DMatrix::zeros(out.len(), n);
    for (i, yi) in out.iter().enumerate() {
        if !yi.value.is_finite() {
            return Err(Error::NonFinite("jacobian"));
        }
        for (j, d) in yi.gradient(n).into_iter().enumerate() {
            jac[(i, j)] = d;
        }
    }
    if !finite(jac.iter().copied()) {
        return Err(Error::NonFinite("jacobian"));
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Random cubic polynomial in three variables with a transcendental term.
    fn poly<T: Real>(c: &[f64], x: &[T]) -> T {
        let (a, b, d) = (x[0].clone(), x[1].clone(), x[2].clone());
        a.clone() * b.clone() * c[0]
            + a.powi(3) * c[1]
            + b.clone() * d.clone() * d.clone() * c[2]
            + d.sin() * c[3]
            + (a.clone() * c[4] + b).exp() * 0.1
            + a.square() / (d.square() + 2.0)
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_of_square() {
        let g = gradient(|x| x[0].clone() * x[0].clone(), &[3.0]).unwrap();
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn hessian_of_half_norm_is_identity() {
        let (_, _, h) = hessian(|x| dot(x, x) * 0.5, &[0.3, -1.2, 4.0]).unwrap();
        assert_eq!(h, DMatrix::identity(3, 3));
    }

    #[test]
    fn jacobian_of_linear_maps() {
        let id = jacobian(|x| x.to_vec(), &[1.0, 2.0]).unwrap();
        assert_eq!(id, DMatrix::identity(2, 2));
        let a = [[1.0, -2.0], [0.5, 3.0], [4.0, 0.0]];
        let jac = jacobian(
            |x| {
                a.iter()
                    .map(|row| x[0].clone() * row[0] + x[1].clone() * row[1])
                    .collect()
            },
            &[0.7, -0.1],
        )
        .unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(jac[(i, j)], a[i][j]);
            }
        }
    }

    #[test]
    fn non_finite_is_reported() {
        let err = gradient(|x| x[0].ln(), &[0.0]).unwrap_err();
        assert_eq!(err, Error::NonFinite("gradient"));
        assert!(hessian(|x| x[0].sqrt(), &[-1.0]).is_err());
    }

    #[test]
    fn unary_second_derivatives() {
        // (value, first, second) against closed forms at x = 0.7
        let x = 0.7_f64;
        type Unary = Box<dyn Fn(&Dual2) -> Dual2>;
        let cases: Vec<(Unary, f64, f64, f64)> = vec![
            (Box::new(|d| d.sin()), x.sin(), x.cos(), -x.sin()),
            (Box::new(|d| d.cos()), x.cos(), -x.sin(), -x.cos()),
            (Box::new(|d| d.exp()), x.exp(), x.exp(), x.exp()),
            (Box::new(|d| d.ln()), x.ln(), 1.0 / x, -1.0 / (x * x)),
            (Box::new(|d| d.sqrt()), x.sqrt(), 0.5 / x.sqrt(), -0.25 * x.powf(-1.5)),
            (Box::new(|d| d.sinh()), x.sinh(), x.cosh(), x.sinh()),
            (Box::new(|d| d.cosh()), x.cosh(), x.sinh(), x.cosh()),
            (Box::new(|d| d.powi(4)), x.powi(4), 4.0 * x.powi(3), 12.0 * x * x),
            (
                Box::new(|d| Dual2::constant(1.0) / d.clone()),
                1.0 / x,
                -1.0 / (x * x),
                2.0 / x.powi(3),
            ),
        ];
        for (f, v, d1, d2) in cases {
            let out = f(&Dual2::variable(x, 0, 1));
            assert!((out.value - v).abs() < 1e-15);
            assert!((out.gradient(1)[0] - d1).abs() < 1e-14);
            assert!((out.hessian(1)[(0, 0)] - d2).abs() < 1e-13);
        }
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            c in prop::collection::vec(-2.0f64..2.0, 5),
            x in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let g = gradient(|y| poly(&c, y), &x).unwrap();
            let fd = central_diff(|y| poly(&c, y), &x, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn hessian_is_symmetric_and_consistent(
            c in prop::collection::vec(-2.0f64..2.0, 5),
            x in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let (v, g, h) = hessian(|y| poly(&c, y), &x).unwrap();
            prop_assert!((v - poly(&c, &x)).abs() < 1e-14 * (1.0 + v.abs()));
            let g1 = gradient(|y| poly(&c, y), &x).unwrap();
            for (a, b) in g.iter().zip(&g1) {
                prop_assert!((a - b).abs() < 1e-13 * (1.0 + b.abs()));
            }
            let asym = (&h - h.transpose()).amax();
            prop_assert!(asym < 1e-13);
            // columns of the Hessian against differenced gradients
            for j in 0..3 {
                let col = central_diff(
                    |y| gradient(|z| poly(&c, z), y).unwrap()[j],
                    &x,
                    1e-5,
                );
                for i in 0..3 {
                    prop_assert!((h[(j, i)] - col[i]).abs() < 1e-6 * (1.0 + col[i].abs()));
                }
            }
        }

        #[test]
        fn jacobian_matches_finite_differences(x in prop::collection::vec(-1.0f64..1.0, 3)) {
            let map = |y: &[Dual]| vec![
                y[0].clone() * y[1].clone(),
                y[2].sin() + y[0].square(),
                y[1].exp() / (y[2].square() + 1.0),
            ];
            let jac = jacobian(map, &x).unwrap();
            let plain = |y: &[f64]| vec![
                y[0] * y[1],
                y[2].sin() + y[0] * y[0],
                y[1].exp() / (y[2] * y[2] + 1.0),
            ];
            for i in 0..3 {
                let fd = central_diff(|y| plain(y)[i], &x, 1e-5);
                for j in 0..3 {
                    prop_assert!((jac[(i, j)] - fd[j]).abs() < 1e-7);
                }
            }
        }
    }
}
