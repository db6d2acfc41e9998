use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Quadrature nodes and weights on `[0, 1]` together with the
/// differentiation matrix of the Lagrange basis through the nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureScheme {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// `diff[(i, j)] = l_j'(c_i)`
    diff: DMatrix<f64>,
}

impl QuadratureScheme {
    /// Gauss-Lobatto rule with `stages` points (2 to 5).
    pub fn lobatto(stages: usize) -> Result<Self> {
        let (nodes, weights): (Vec<f64>, Vec<f64>) = match stages {
            2 => (vec![0.0, 1.0], vec![0.5, 0.5]),
            3 => (vec![0.0, 0.5, 1.0], vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]),
            4 => {
                let a = 0.5 / 5.0_f64.sqrt();
                (
                    vec![0.0, 0.5 - a, 0.5 + a, 1.0],
                    vec![1.0 / 12.0, 5.0 / 12.0, 5.0 / 12.0, 1.0 / 12.0],
                )
            }
            5 => {
                let a = 0.5 * (3.0_f64 / 7.0).sqrt();
                (
                    vec![0.0, 0.5 - a, 0.5, 0.5 + a, 1.0],
                    vec![1.0 / 20.0, 49.0 / 180.0, 16.0 / 45.0, 49.0 / 180.0, 1.0 / 20.0],
                )
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "stages must be in 2..5, got {stages}"
                )))
            }
        };
        Self::new(nodes, weights)
    }

    pub fn new(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != weights.len() {
            return Err(Error::InvalidArgument("nodes and weights must match".into()));
        }
        if nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("nodes must be strictly increasing".into()));
        }
        if nodes.iter().any(|c| !(0.0..=1.0).contains(c)) || weights.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::InvalidArgument("nodes in [0,1] and positive weights required".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-14 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}")));
        }
        let diff = lagrange_differentiation(&nodes);
        Ok(QuadratureScheme {
            nodes,
            weights,
            diff,
        })
    }

    pub fn stages(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn differentiation(&self) -> &DMatrix<f64> {
        &self.diff
    }

    /// Degree of the interpolating polynomial through the nodes.
    pub fn interior_degree(&self) -> usize {
        self.nodes.len() - 1
    }
}

fn lagrange_differentiation(c: &[f64]) -> DMatrix<f64> {
    let s = c.len();
    let w: Vec<f64> = (0..s)
        .map(|j| {
            1.0 / (0..s)
                .filter(|&k| k != j)
                .map(|k| c[j] - c[k])
                .product::<f64>()
        })
        .collect();
    let mut d = DMatrix::zeros(s, s);
    for i in 0..s {
        let mut diag = 0.0;
        for j in 0..s {
            if i != j {
                d[(i, j)] = (w[j] / w[i]) / (c[i] - c[j]);
                diag -= d[(i, j)];
            }
        }
        d[(i, i)] = diag;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lobatto_rules_are_valid() {
        for s in 2..=5 {
            let q = QuadratureScheme::lobatto(s).unwrap();
            assert_eq!(q.stages(), s);
            assert_eq!(q.nodes()[0], 0.0);
            assert_eq!(q.nodes()[s - 1], 1.0);
            let total: f64 = q.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-14);
            assert_eq!(q.interior_degree(), s - 1);
        }
        assert!(QuadratureScheme::lobatto(1).is_err());
        assert!(QuadratureScheme::lobatto(7).is_err());
    }

    #[test]
    fn lobatto_exact_to_degree_2s_minus_3() {
        for s in 2..=5 {
            let q = QuadratureScheme::lobatto(s).unwrap();
            for k in 0..=(2 * s - 3) {
                let approx: f64 = q
                    .nodes()
                    .iter()
                    .zip(q.weights())
                    .map(|(c, b)| b * c.powi(k as i32))
                    .sum();
                assert!((approx - 1.0 / (k as f64 + 1.0)).abs() < 1e-14, "s={s} k={k}");
            }
            // and not beyond
            let k = 2 * s - 2;
            let approx: f64 = q
                .nodes()
                .iter()
                .zip(q.weights())
                .map(|(c, b)| b * c.powi(k as i32))
                .sum();
            assert!((approx - 1.0 / (k as f64 + 1.0)).abs() > 1e-6);
        }
    }

    #[test]
    fn differentiation_matrix_is_exact_on_polynomials() {
        for s in 2..=5 {
            let q = QuadratureScheme::lobatto(s).unwrap();
            let c = q.nodes();
            for k in 0..s {
                for i in 0..s {
                    let approx: f64 = (0..s)
                        .map(|j| q.differentiation()[(i, j)] * c[j].powi(k as i32))
                        .sum();
                    let exact = if k == 0 {
                        0.0
                    } else {
                        k as f64 * c[i].powi(k as i32 - 1)
                    };
                    assert!((approx - exact).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_rules() {
        assert!(QuadratureScheme::new(vec![0.0, 0.0], vec![0.5, 0.5]).is_err());
        assert!(QuadratureScheme::new(vec![0.0, 1.0], vec![0.6, 0.6]).is_err());
        assert!(QuadratureScheme::new(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
    }
}
