//! Finite continuous-time Markov chains.
//!
//! A [`Generator`] is a validated, irreducible transition rate matrix `Q`.
//! [`Generator::analyze`] derives the stationary distribution `π` together
//! with the ergodic matrix `Π = 1πᵀ`, the fundamental matrix
//! `F = (Π − Q)⁻¹` and the deviation matrix `D = F − Π`, which satisfies
//!
//! ```text
//! D_ij = ∫₀^∞ (p_ij(t) − π_j) dt,      p_ij(t) = [exp(Qt)]_ij.
//! ```
//!
//! All matrices are dense; state spaces here are small.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Row sums may deviate from zero by at most this much before the diagonal
/// is recomputed from the off-diagonal rates.
pub const ROW_SUM_REPAIR_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("generator must be a non-empty square matrix, got {rows}x{cols}")]
    Shape { rows: usize, cols: usize },
    #[error("non-finite rate at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("negative off-diagonal rate {value} at ({row}, {col})")]
    NegativeRate { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 0")]
    RowSumViolation { row: usize, sum: f64 },
    #[error("chain is reducible: state {to} is not reachable from state {from}")]
    Reducible { from: usize, to: usize },
    #[error("singular linear system while computing {what}")]
    SingularSystem { what: &'static str },
    #[error("time must be finite and nonnegative, got {0}")]
    InvalidTime(f64),
    #[error("distribution has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Validated transition rate matrix of an irreducible finite CTMC.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    rates: DMatrix<f64>,
}

impl Generator {
    /// Validates `raw` and returns a generator whose diagonal is exactly the
    /// negated off-diagonal row sum.
    pub fn new(raw: DMatrix<f64>) -> Result<Self, MarkovError> {
        let (rows, cols) = raw.shape();
        if rows == 0 || rows != cols {
            return Err(MarkovError::Shape { rows, cols });
        }
        let d = rows;
        for i in 0..d {
            for j in 0..d {
                let v = raw[(i, j)];
                if !v.is_finite() {
                    return Err(MarkovError::NonFinite { row: i, col: j });
                }
                if i != j && v < 0.0 {
                    return Err(MarkovError::NegativeRate { row: i, col: j, value: v });
                }
            }
        }
        let mut rates = raw;
        for i in 0..d {
            let off: f64 = (0..d).filter(|&j| j != i).map(|j| rates[(i, j)]).sum();
            let sum = off + rates[(i, i)];
            if sum.abs() > ROW_SUM_REPAIR_TOL {
                return Err(MarkovError::RowSumViolation { row: i, sum });
            }
            rates[(i, i)] = -off;
        }
        check_irreducible(&rates)?;
        Ok(Self { rates })
    }

    /// Builds a generator from row-major rows, as found in configuration files.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MarkovError> {
        let d = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(MarkovError::Shape { rows: d, cols: bad.len() });
        }
        Self::new(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    /// Symmetric two-state chain switching at rate `q` in both directions.
    pub fn symmetric_two_state(q: f64) -> Result<Self, MarkovError> {
        Self::new(DMatrix::from_row_slice(2, 2, &[-q, q, q, -q]))
    }

    pub fn dim(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rates[(i, j)]
    }

    /// Total rate `q_i = −q_ii` of leaving state `i`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.rates[(i, i)]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| self.rates.row(i).iter().copied().collect())
            .collect()
    }

    /// Stationary distribution and the derived ergodic, fundamental and
    /// deviation matrices.
    pub fn analyze(&self) -> Result<ChainAnalysis, MarkovError> {
        let d = self.dim();
        let pi = stationary_distribution(&self.rates)?;
        let ones = DVector::from_element(d, 1.0);
        let ergodic = &ones * pi.transpose();
        let fundamental = (&ergodic - &self.rates)
            .lu()
            .try_inverse()
            .ok_or(MarkovError::SingularSystem { what: "fundamental matrix" })?;
        let deviation = &fundamental - &ergodic;
        Ok(ChainAnalysis { pi, ergodic, fundamental, deviation })
    }

    /// Transition matrix `exp(Qt)`.
    pub fn transition_matrix(&self, t: f64) -> Result<DMatrix<f64>, MarkovError> {
        if !t.is_finite() || t < 0.0 {
            return Err(MarkovError::InvalidTime(t));
        }
        if t == 0.0 {
            return Ok(DMatrix::identity(self.dim(), self.dim()));
        }
        let mut p = (&self.rates * t).exp();
        // Clamp rounding noise so the result is a proper stochastic matrix.
        for i in 0..p.nrows() {
            let mut sum = 0.0;
            for j in 0..p.ncols() {
                let v = p[(i, j)].clamp(0.0, 1.0);
                p[(i, j)] = v;
                sum += v;
            }
            for j in 0..p.ncols() {
                p[(i, j)] /= sum;
            }
        }
        Ok(p)
    }

    /// Time-reversed chain `q̃_ij = q_ji π_j / π_i`.
    pub fn time_reverse(&self, pi: &DVector<f64>) -> Result<Generator, MarkovError> {
        let d = self.dim();
        if pi.len() != d {
            return Err(MarkovError::DimensionMismatch { expected: d, got: pi.len() });
        }
        let raw = DMatrix::from_fn(d, d, |i, j| self.rates[(j, i)] * pi[j] / pi[i]);
        Generator::new(raw)
    }
}

/// Quantities derived from a generator; see the module docs.
#[derive(Debug, Clone)]
pub struct ChainAnalysis {
    pub pi: DVector<f64>,
    pub ergodic: DMatrix<f64>,
    pub fundamental: DMatrix<f64>,
    pub deviation: DMatrix<f64>,
}

impl ChainAnalysis {
    pub fn dim(&self) -> usize {
        self.pi.len()
    }
}

fn stationary_distribution(q: &DMatrix<f64>) -> Result<DVector<f64>, MarkovError> {
    let d = q.nrows();
    // πᵀQ = 0 with the last balance equation replaced by πᵀ1 = 1.
    let mut a = q.transpose();
    a.row_mut(d - 1).fill(1.0);
    let mut rhs = DVector::zeros(d);
    rhs[d - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&rhs)
        .ok_or(MarkovError::SingularSystem { what: "stationary distribution" })?;
    if pi.iter().any(|&p| !p.is_finite() || p <= 0.0) {
        return Err(MarkovError::SingularSystem { what: "stationary distribution" });
    }
    Ok(pi)
}

fn check_irreducible(q: &DMatrix<f64>) -> Result<(), MarkovError> {
    let d = q.nrows();
    // Strongly connected iff every state is reachable from 0 both in the
    // rate digraph and in its transpose.
    for transpose in [false, true] {
        let mut seen = vec![false; d];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..d {
                let r = if transpose { q[(j, i)] } else { q[(i, j)] };
                if i != j && r > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if let Some(k) = seen.iter().position(|&s| !s) {
            let (from, to) = if transpose { (k, 0) } else { (0, k) };
            return Err(MarkovError::Reducible { from, to });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
    }

    #[test]
    fn single_state_is_trivial() {
        let g = Generator::new(DMatrix::from_element(1, 1, 0.0)).unwrap();
        let a = g.analyze().unwrap();
        assert_eq!(a.pi[0], 1.0);
        assert_abs_diff_eq!(a.ergodic[(0, 0)], 1.0);
        assert_abs_diff_eq!(a.fundamental[(0, 0)], 1.0);
        assert_abs_diff_eq!(a.deviation[(0, 0)], 0.0);
    }

    #[test]
    fn validation_errors() {
        let ok = Generator::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]);
        assert!(ok.is_ok());
        let bad = Generator::from_rows(&[vec![-1.0, 0.5], vec![1.0, -1.0]]);
        assert!(matches!(bad, Err(MarkovError::RowSumViolation { row: 0, .. })));
        let neg = Generator::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]);
        assert!(matches!(neg, Err(MarkovError::NegativeRate { row: 0, col: 1, .. })));
        let red = Generator::from_rows(&[vec![-1.0, 1.0], vec![0.0, 0.0]]);
        assert!(matches!(red, Err(MarkovError::Reducible { .. })));
        let shape = Generator::from_rows(&[vec![-1.0, 1.0]]);
        assert!(matches!(shape, Err(MarkovError::Shape { .. })));
        assert!(matches!(
            Generator::new(DMatrix::zeros(0, 0)),
            Err(MarkovError::Shape { .. })
        ));
    }

    #[test]
    fn diagonal_is_repaired_within_tolerance() {
        let g = Generator::from_rows(&[vec![-1.0 - 5e-10, 1.0], vec![2.0, -2.0]]).unwrap();
        assert_eq!(g.rate(0, 0), -1.0);
        let too_far = Generator::from_rows(&[vec![-1.0 - 1e-8, 1.0], vec![2.0, -2.0]]);
        assert!(matches!(too_far, Err(MarkovError::RowSumViolation { .. })));
    }

    #[test]
    fn asymmetric_two_state_stationary() {
        let g = Generator::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
        let a = g.analyze().unwrap();
        assert_abs_diff_eq!(a.pi[0], 2.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(a.pi[1], 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn symmetric_two_state_deviation_matrix() {
        // D = (1/(4q)) [[1, -1], [-1, 1]]
        let q = 1.7;
        let a = Generator::symmetric_two_state(q).unwrap().analyze().unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]) / (4.0 * q);
        assert!(max_abs(&(&a.deviation - expected)) < 1e-14);
    }

    #[test]
    fn transition_matrix_two_state_closed_form() {
        // p_11(t) = 1/2 + e^{-2qt}/2
        let q = 0.8;
        let g = Generator::symmetric_two_state(q).unwrap();
        for &t in &[0.0, 0.1, 1.0, 3.5] {
            let p = g.transition_matrix(t).unwrap();
            assert_abs_diff_eq!(p[(0, 0)], 0.5 + 0.5 * (-2.0 * q * t).exp(), epsilon = 1e-13);
        }
        assert_eq!(g.transition_matrix(0.0).unwrap(), DMatrix::identity(2, 2));
        assert!(matches!(g.transition_matrix(-1.0), Err(MarkovError::InvalidTime(_))));
    }

    #[test]
    fn long_time_rows_approach_pi() {
        let g = Generator::from_rows(&[
            vec![-1.0, 0.7, 0.3],
            vec![0.2, -0.5, 0.3],
            vec![1.5, 0.5, -2.0],
        ])
        .unwrap();
        let a = g.analyze().unwrap();
        let qmin = (0..3).map(|i| g.exit_rate(i)).fold(f64::INFINITY, f64::min);
        let p = g.transition_matrix(1e6 / qmin).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(p[(i, j)], a.pi[j], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn time_reversal_of_cycle() {
        let r = 2.5;
        let cw = Generator::from_rows(&[
            vec![-r, r, 0.0],
            vec![0.0, -r, r],
            vec![r, 0.0, -r],
        ])
        .unwrap();
        let a = cw.analyze().unwrap();
        let rev = cw.time_reverse(&a.pi).unwrap();
        let ccw = Generator::from_rows(&[
            vec![-r, 0.0, r],
            vec![r, -r, 0.0],
            vec![0.0, r, -r],
        ])
        .unwrap();
        assert!(max_abs(&(rev.rates() - ccw.rates())) < 1e-12);

        let sym = Generator::symmetric_two_state(1.0).unwrap();
        let pi = sym.analyze().unwrap().pi;
        assert_eq!(sym.time_reverse(&pi).unwrap(), sym);
    }
}
