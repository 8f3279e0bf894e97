//! The underlying finite irreducible chain and its static quantities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::NumericPolicy;

/// Jump rates `r(i, j)` of a chain on `p >= 2` sites.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix(DMatrix<f64>);

impl RateMatrix {
    /// Validates shape, signs, the zero diagonal and irreducibility.
    pub fn new(r: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = r.shape();
        if rows != cols || rows < 2 || rows > crate::sites::MAX_SITES {
            return Err(Error::Shape { rows, cols });
        }
        for i in 0..rows {
            for j in 0..cols {
                let value = r[(i, j)];
                if !value.is_finite() || value < 0.0 {
                    return Err(Error::NegativeRate { i, j, value });
                }
            }
        }
        for i in 0..rows {
            if r[(i, i)] != 0.0 {
                return Err(Error::NonzeroDiagonal { i, value: r[(i, i)] });
            }
        }
        if !strongly_connected(&r) {
            return Err(Error::NotIrreducible);
        }
        Ok(RateMatrix(r))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.len();
        if rows.iter().any(|row| row.len() != p) {
            let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
            return Err(Error::Shape { rows: p, cols });
        }
        Self::new(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
    }

    pub fn p(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

/// Kosaraju-style check: every site reachable from site 0 in the graph and
/// in its reverse.
fn strongly_connected(r: &DMatrix<f64>) -> bool {
    let p = r.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; p];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..p {
                let w = if forward { r[(i, j)] } else { r[(j, i)] };
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// JSON chain configuration: `{"rates": [[...]], "b": 1.0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub rates: Vec<Vec<f64>>,
    pub b: f64,
}

impl ChainConfig {
    pub fn build(&self) -> Result<ChainModel> {
        ChainModel::build(RateMatrix::from_rows(&self.rates)?, self.b)
    }
}

/// An irreducible chain together with everything derived from it.
///
/// `v` stores the drift vectors as rows: row `i` is
/// `v_i = sum_j r(i,j) (e_j - e_i)`, which is also row `i` of the generator
/// matrix `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    pub rates: RateMatrix,
    pub m: DVector<f64>,
    pub lambda: DVector<f64>,
    pub v: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: f64,
}

impl ChainModel {
    pub fn build(rates: RateMatrix, b: f64) -> Result<Self> {
        if !b.is_finite() || b < 1.0 {
            return Err(Error::BadB(b));
        }
        let p = rates.p();
        let r = rates.matrix();
        let lambda = DVector::from_fn(p, |i, _| r.row(i).sum());
        let mut v = r.clone();
        for i in 0..p {
            v[(i, i)] = -lambda[i];
        }
        let m = stationary(&v)?;
        let a = DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                m[i] * lambda[i]
            } else {
                -m[i] * r[(i, j)]
            }
        });
        Ok(ChainModel { rates, m, lambda, v, a, b })
    }

    pub fn from_rows(rows: &[Vec<f64>], b: f64) -> Result<Self> {
        Self::build(RateMatrix::from_rows(rows)?, b)
    }

    pub fn p(&self) -> usize {
        self.rates.p()
    }

    pub fn r(&self, i: usize, j: usize) -> f64 {
        self.rates.get(i, j)
    }

    /// Generator matrix `Q` (identical to the drift-vector matrix).
    pub fn generator(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Drift vector `v_i` as a column.
    pub fn drift_vector(&self, i: usize) -> DVector<f64> {
        self.v.row(i).transpose()
    }

    /// Chain with rates `m_j r(j,i) / m_i`.
    pub fn adjoint(&self) -> Result<ChainModel> {
        let p = self.p();
        let r = self.rates.matrix();
        let adj = DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                0.0
            } else {
                self.m[j] * r[(j, i)] / self.m[i]
            }
        });
        ChainModel::build(RateMatrix::new(adj)?, self.b)
    }

    /// `(L_S f)(i) = sum_j r(i,j) [f(j) - f(i)] = v_i . f`.
    pub fn generator_apply(&self, f: &DVector<f64>) -> DVector<f64> {
        &self.v * f
    }

    /// Largest violation among the structural identities of the model.
    pub fn invariant_residual(&self) -> f64 {
        let p = self.p();
        let balance = (self.v.transpose() * &self.m).amax();
        let tangency = (0..p).map(|i| self.v.row(i).sum().abs()).fold(0.0, f64::max);
        let a_rows = (0..p).map(|i| self.a.row(i).sum().abs()).fold(0.0, f64::max);
        let mass = (self.m.sum() - 1.0).abs();
        balance.max(tangency).max(a_rows).max(mass)
    }

    pub fn check_invariants(&self, policy: &NumericPolicy) -> Result<()> {
        let res = self.invariant_residual();
        if res > policy.algebra_tol {
            return Err(Error::Invalid(format!("chain invariants violated by {res:e}")));
        }
        Ok(())
    }
}

/// Solves `m^T Q = 0`, `sum m = 1`.
///
/// The normalization row replaces the last balance equation; for an
/// irreducible chain the resulting square system is nonsingular and the
/// dropped equation is implied by the others.
fn stationary(q: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = q.nrows();
    let mut sys = q.transpose();
    let mut rhs = DVector::zeros(p);
    for j in 0..p {
        sys[(p - 1, j)] = 1.0;
    }
    rhs[p - 1] = 1.0;
    let lu = sys.clone().lu();
    let mut m = lu.solve(&rhs).ok_or(Error::SingularSystem)?;
    // one round of iterative refinement
    let resid = &rhs - &sys * &m;
    if let Some(dm) = lu.solve(&resid) {
        m += dm;
    }
    if m.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::SingularSystem);
    }
    let total = m.sum();
    Ok(m / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_site() -> ChainModel {
        ChainModel::from_rows(&[vec![0.0, 2.0], vec![1.0, 0.0]], 1.0).unwrap()
    }

    fn complete(p: usize) -> ChainModel {
        let rows: Vec<Vec<f64>> =
            (0..p).map(|i| (0..p).map(|j| if i == j { 0.0 } else { 1.0 }).collect()).collect();
        ChainModel::from_rows(&rows, 1.0).unwrap()
    }

    #[test]
    fn two_site_stationary_and_drifts() {
        let c = two_site();
        assert_abs_diff_eq!(c.m[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.m[1], 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(c.drift_vector(0).as_slice(), &[-2.0, 2.0]);
        assert_eq!(c.drift_vector(1).as_slice(), &[1.0, -1.0]);
        let bal = c.drift_vector(0) * c.m[0] + c.drift_vector(1) * c.m[1];
        assert!(bal.amax() < 1e-15);
        assert!(c.invariant_residual() < 1e-12);
    }

    #[test]
    fn complete_chain_is_uniform() {
        let c = complete(3);
        for i in 0..3 {
            assert_abs_diff_eq!(c.m[i], 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(c.a[(0, 0)], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.a[(0, 1)], -1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn generator_examples() {
        let c = complete(3);
        let ones = DVector::from_element(3, 4.2);
        assert!(c.generator_apply(&ones).amax() < 1e-15);
        let f = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(c.generator_apply(&f).as_slice(), &[-2.0, 1.0, 1.0]);

        let c = two_site();
        let ind = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(c.generator_apply(&ind)[0], c.r(0, 1));
    }

    #[test]
    fn adjoint_examples() {
        let c = complete(3);
        assert_eq!(c.adjoint().unwrap().rates, c.rates);

        let c = two_site();
        let adj = c.adjoint().unwrap();
        assert_abs_diff_eq!(adj.r(0, 1), 2.0, epsilon = 1e-14);
        assert!((&adj.m - &c.m).amax() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(
            ChainModel::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]], 1.0),
            Err(Error::NonzeroDiagonal { i: 0, value: 1.0 })
        );
        assert_eq!(
            ChainModel::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]], 1.0),
            Err(Error::NotIrreducible)
        );
        assert!(matches!(
            ChainModel::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]], 1.0),
            Err(Error::NegativeRate { .. })
        ));
        assert_eq!(
            ChainModel::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]], 0.5),
            Err(Error::BadB(0.5))
        );
        assert!(matches!(ChainModel::from_rows(&[vec![0.0]], 1.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok: ChainConfig = serde_json::from_str(r#"{"rates": [[0,1],[1,0]], "b": 1.0}"#).unwrap();
        assert!(ok.build().is_ok());
        assert!(serde_json::from_str::<ChainConfig>(r#"{"rates": [[0,1],[1,0]], "b": 1, "x": 2}"#)
            .is_err());
    }
}
