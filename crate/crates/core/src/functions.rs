//! Smooth test functions on `R^p` with analytic derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub trait SmoothFunction: Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> DVector<f64>;
    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;
}

/// A constant.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl SmoothFunction for Constant {
    fn value(&self, _x: &[f64]) -> f64 {
        self.0
    }
    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        DVector::zeros(x.len())
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }
}

/// One term `coef * prod_i x_i^{exps[i]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coef: f64,
    pub exps: Vec<u32>,
}

/// A polynomial in the coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    /// `prod_k x_k^2` over all `p` coordinates.
    pub fn product_of_squares(p: usize) -> Self {
        Polynomial { terms: vec![Monomial { coef: 1.0, exps: vec![2; p] }] }
    }
}

fn powi(x: f64, e: u32) -> f64 {
    x.powi(e as i32)
}

impl Monomial {
    fn eval_with(&self, x: &[f64], d1: Option<usize>, d2: Option<usize>) -> f64 {
        let mut e: Vec<u32> = self.exps.clone();
        let mut c = self.coef;
        for d in [d1, d2].into_iter().flatten() {
            if e[d] == 0 {
                return 0.0;
            }
            c *= e[d] as f64;
            e[d] -= 1;
        }
        c * e.iter().zip(x).map(|(&k, &xi)| powi(xi, k)).product::<f64>()
    }
}

impl SmoothFunction for Polynomial {
    fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval_with(x, None, None)).sum()
    }
    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| self.terms.iter().map(|t| t.eval_with(x, Some(i), None)).sum())
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(x.len(), x.len(), |i, j| {
            self.terms.iter().map(|t| t.eval_with(x, Some(i), Some(j))).sum()
        })
    }
}
