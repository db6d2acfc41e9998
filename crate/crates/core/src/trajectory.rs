use crate::geometry::Point;

/// Output of a simulation: one row per time node.
///
/// `q` and `p` hold the physical configuration and momentum. For doubled
/// runs these are the plus copy `(Q, P)`; the minus copy configurations are
/// kept in `q_minus` so the identity defect can be audited after the fact.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub q: Vec<Point>,
    pub p: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    pub identity_defect: Vec<f64>,
    pub newton_iters: Vec<usize>,
    pub q_minus: Vec<Point>,
    /// Largest final Newton residual over all steps.
    pub max_residual: f64,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.q.first().map_or(0, Vec::len)
    }

    pub fn max_identity_defect(&self) -> f64 {
        self.identity_defect.iter().fold(0.0, |m, &d| m.max(d))
    }

    pub fn final_q(&self) -> &[f64] {
        self.q.last().map_or(&[], Vec::as_slice)
    }

    pub fn final_p(&self) -> &[f64] {
        self.p.last().map_or(&[], Vec::as_slice)
    }

    pub fn final_energy(&self) -> f64 {
        self.energy.last().copied().unwrap_or(f64::NAN)
    }

    pub fn total_newton_iters(&self) -> usize {
        self.newton_iters.iter().sum()
    }

    pub(crate) fn push(&mut self, t: f64, q: Point, p: Vec<f64>, energy: f64, defect: f64, iters: usize) {
        self.times.push(t);
        self.q.push(q);
        self.p.push(p);
        self.energy.push(energy);
        self.identity_defect.push(defect);
        self.newton_iters.push(iters);
    }
}

/// `max_i |a_i - b_i|`
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
