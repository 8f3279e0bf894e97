//! The superharmonic family `F_A(x) = prod_{k in A} x_k^{1+b} (1 - x_k^gamma)`
//! and the sign of the generator applied to it near the face `Sigma_{S \ A}`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::chain::ChainModel;
use crate::diffusion::face_dynamics;
use crate::error::{Error, Result};
use crate::functions::SmoothFunction;
use crate::sites::SiteSet;
use crate::trace;

/// `F_A` with block `A`, exponent `gamma` in `(0, 1)` and drift strength `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupharmSpec {
    pub a: SiteSet,
    pub gamma: f64,
    pub b: f64,
}

impl SupharmSpec {
    pub fn new(a: SiteSet, gamma: f64, b: f64) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::BadFace("block A must be nonempty".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Invalid(format!("gamma = {gamma} must lie in (0, 1)")));
        }
        if !(b >= 1.0) {
            return Err(Error::BadB(b));
        }
        Ok(SupharmSpec { a, gamma, b })
    }

    /// `f(x) = x^{1+b} (1 - x^gamma)`.
    pub fn f(&self, x: f64) -> f64 {
        x.powf(1.0 + self.b) * (1.0 - x.powf(self.gamma))
    }

    pub fn df(&self, x: f64) -> f64 {
        let (b, g) = (self.b, self.gamma);
        (1.0 + b) * x.powf(b) - (1.0 + b + g) * x.powf(b + g)
    }

    pub fn d2f(&self, x: f64) -> f64 {
        let (b, g) = (self.b, self.gamma);
        (1.0 + b) * b * x.powf(b - 1.0) - (1.0 + b + g) * (b + g) * x.powf(b + g - 1.0)
    }

    fn product_except(&self, x: &[f64], skip: &[usize]) -> f64 {
        self.a.iter().filter(|k| !skip.contains(k)).map(|k| self.f(x[k])).product()
    }
}

impl SmoothFunction for SupharmSpec {
    fn value(&self, x: &[f64]) -> f64 {
        self.product_except(x, &[])
    }

    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        for j in self.a.iter() {
            g[j] = self.df(x[j]) * self.product_except(x, &[j]);
        }
        g
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(x.len(), x.len());
        for i in self.a.iter() {
            for j in self.a.iter() {
                h[(i, j)] = if i == j {
                    self.d2f(x[i]) * self.product_except(x, &[i])
                } else {
                    self.df(x[i]) * self.df(x[j]) * self.product_except(x, &[i, j])
                };
            }
        }
        h
    }
}

/// `F_A(x)`; zero as soon as a coordinate of `A` vanishes.
pub fn eval_fa(spec: &SupharmSpec, x: &[f64]) -> f64 {
    spec.value(x)
}

/// `F_{A,D}` on `Sigma_B`: the same product over the block `D`.
pub fn eval_fad(d: SiteSet, gamma: f64, b: f64, x: &[f64]) -> Result<f64> {
    Ok(SupharmSpec::new(d, gamma, b)?.value(x))
}

/// Drift vectors `v^C_i` as rows, for the active face `C`.
fn face_drifts(chain: &ChainModel, c: SiteSet) -> Result<DMatrix<f64>> {
    if c == SiteSet::full(chain.p()) {
        Ok(chain.v.clone())
    } else {
        Ok(trace::trace_rates(chain, c)?.v_b)
    }
}

/// Closed form of the face generator applied to `F_A` on the interior of
/// `Sigma_C`:
/// `sum_{j in A} sum_{i in C} m_i v^C_i(j) (b dF/dx_j / x_i - d^2F/dx_i dx_j)`.
pub fn eval_generator_fa(spec: &SupharmSpec, chain: &ChainModel, c: SiteSet, x: &[f64]) -> Result<f64> {
    c.validate(chain.p())?;
    if c.len() < 2 {
        return Err(Error::DegenerateFace(c.len()));
    }
    if !spec.a.is_subset(c) || spec.a.iter().any(|k| x[k] == 0.0) {
        return Ok(0.0);
    }
    if let Some(i) = c.iter().find(|&i| !(x[i] > 0.0)) {
        return Err(Error::NonFiniteDrift(i));
    }
    let v = face_drifts(chain, c)?;
    let grad = spec.gradient(x);
    let hess = spec.hessian(x);
    let mut total = 0.0;
    for j in spec.a.iter() {
        for i in c.iter() {
            let coef = chain.m[i] * v[(i, j)];
            if coef != 0.0 {
                total += coef * (spec.b * grad[j] / x[i] - hess[(i, j)]);
            }
        }
    }
    Ok(total)
}

/// Finite-difference evaluation of the face generator on an arbitrary
/// function, using only values of `F`. Partial derivatives on `C` come from
/// central differences with steps proportional to each coordinate and one
/// Richardson step; the drift and second-order terms are assembled from
/// them. Returns `(value, scale)` where `scale` is the sum of the absolute
/// values of the individual terms.
pub fn generator_finite_difference(
    chain: &ChainModel,
    c: SiteSet,
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
) -> Result<(f64, f64)> {
    let fd = face_dynamics(chain, c)?;
    if let Some(i) = c.iter().find(|&i| !(x[i] > 0.0)) {
        return Err(Error::NonFiniteDrift(i));
    }
    let p = x.len();
    let idx = c.indices();
    let at = |moves: &[(usize, f64)]| -> f64 {
        let mut y = x.to_vec();
        for &(k, d) in moves {
            y[k] += d;
        }
        f(&y)
    };
    let richardson = |d: &dyn Fn(f64) -> f64| (4.0 * d(0.5) - d(1.0)) / 3.0;
    let h: Vec<f64> = (0..p).map(|k| 1e-2 * x[k]).collect();
    let f0 = f(x);
    let mut grad = vec![0.0; p];
    let mut hess = DMatrix::zeros(p, p);
    for &j in &idx {
        grad[j] = richardson(&|s| {
            let hj = s * h[j];
            (at(&[(j, hj)]) - at(&[(j, -hj)])) / (2.0 * hj)
        });
        hess[(j, j)] = richardson(&|s| {
            let hj = s * h[j];
            (at(&[(j, hj)]) - 2.0 * f0 + at(&[(j, -hj)])) / (hj * hj)
        });
        for &k in idx.iter().filter(|&&k| k > j) {
            let v = richardson(&|s| {
                let (hj, hk) = (s * h[j], s * h[k]);
                (at(&[(j, hj), (k, hk)]) - at(&[(j, hj), (k, -hk)]) - at(&[(j, -hj), (k, hk)])
                    + at(&[(j, -hj), (k, -hk)]))
                    / (4.0 * hj * hk)
            });
            hess[(j, k)] = v;
            hess[(k, j)] = v;
        }
    }
    let mut total = 0.0;
    let mut scale = 0.0;
    for &i in &idx {
        let directional: f64 = idx.iter().map(|&k| fd.trace.v_b[(i, k)] * grad[k]).sum();
        let term = chain.b * chain.m[i] / x[i] * directional;
        total += term;
        scale += term.abs();
    }
    for &j in &idx {
        for &k in &idx {
            let rate = fd.trace.r_b[(j, k)];
            if j == k || rate == 0.0 {
                continue;
            }
            let term = 0.5 * chain.m[j] * rate * (hess[(j, j)] + hess[(k, k)] - 2.0 * hess[(j, k)]);
            total += term;
            scale += term.abs();
        }
    }
    Ok((total, scale))
}

/// The region on which the generator of `F_A` is claimed non-positive.
#[derive(Debug, Clone, Serialize)]
pub struct SupharmRegion {
    pub a: SiteSet,
    pub d: SiteSet,
    /// `A u D`.
    pub face: SiteSet,
    pub epsilon: f64,
    /// Per-face constants `(C, M_C)` for `A <= C <= A u D`, `|C| >= 2`.
    pub per_face: Vec<(SiteSet, f64)>,
    /// `max_C M_C`.
    pub m_const: f64,
    /// Bound from `M lambda^{1-gamma} <= epsilon`.
    pub lambda_eps: f64,
    /// Bound from `(gamma + 1) lambda^gamma <= 1`.
    pub lambda_shape: f64,
    pub lambda: f64,
}

/// `M_C = max_{j in A} -b(1+b)/(gamma (gamma+b+1)) sum_{i in C \ A} m_i v^C_i(j) / (m_j v^C_j(j))`.
///
/// The factor `b` comes from the drift term `b dF/dx_j / x_i` of the generator.
fn face_constant(spec: &SupharmSpec, chain: &ChainModel, c: SiteSet) -> Result<f64> {
    let v = face_drifts(chain, c)?;
    let pre = spec.b * (1.0 + spec.b) / (spec.gamma * (spec.gamma + spec.b + 1.0));
    let mut worst: f64 = 0.0;
    for j in spec.a.iter() {
        let denom = chain.m[j] * v[(j, j)];
        if denom >= 0.0 {
            return Err(Error::Invalid(format!("site {} has zero holding rate on {c}", j + 1)));
        }
        let sum: f64 = c.difference(spec.a).iter().map(|i| chain.m[i] * v[(i, j)]).sum();
        worst = worst.max(-pre * sum / denom);
    }
    Ok(worst)
}

/// Computes `M` and the largest admissible `lambda` for the block `D`.
pub fn find_lambda(spec: &SupharmSpec, chain: &ChainModel, d: SiteSet, epsilon: f64) -> Result<SupharmRegion> {
    let p = chain.p();
    spec.a.validate(p)?;
    d.validate(p)?;
    if !d.intersection(spec.a).is_empty() {
        return Err(Error::BadFace(format!("D = {d} must avoid A = {}", spec.a)));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("epsilon = {epsilon} must be positive")));
    }
    let face = spec.a.union(d);
    let mut per_face = Vec::new();
    for c in face.subsets().filter(|c| c.len() >= 2 && spec.a.is_subset(*c)) {
        per_face.push((c, face_constant(spec, chain, c)?));
    }
    per_face.sort_by_key(|(c, _)| *c);
    let m_const = per_face.iter().map(|(_, m)| *m).fold(0.0, f64::max);
    let g = spec.gamma;
    let lambda_eps = if m_const > 0.0 { (epsilon / m_const).powf(1.0 / (1.0 - g)) } else { f64::INFINITY };
    let lambda_shape = (1.0 / (1.0 + g)).powf(1.0 / g);
    let lambda = lambda_eps.min(lambda_shape).min(1.0);
    if !(lambda > 0.0) || d.len() as f64 * epsilon > 1.0 {
        return Err(Error::EmptyRegion(epsilon));
    }
    Ok(SupharmRegion { a: spec.a, d, face, epsilon, per_face, m_const, lambda_eps, lambda_shape, lambda })
}

/// Grid evaluation of the generator of `F_A` over a region.
#[derive(Debug, Clone, Serialize)]
pub struct SupharmReport {
    pub spec: SupharmSpec,
    pub region: SupharmRegion,
    /// `lambda` actually used for the grid (differs from the region's when overridden).
    pub lambda_used: f64,
    pub grid_density: usize,
    pub points: usize,
    pub max_value: f64,
    pub argmax: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
    /// `M` is the maximum over faces, which may be larger than needed on some faces.
    pub note: String,
}

/// Points of `Sigma_{A u D}` with `x_k` in `[0, lambda]` on `A` (evenly spaced,
/// `density` values) and `x_i >= epsilon` on `D` (a simplex lattice with
/// `density - 1` divisions of the remaining mass).
pub fn region_grid(p: usize, a: SiteSet, d: SiteSet, epsilon: f64, lambda: f64, density: usize) -> Vec<Vec<f64>> {
    assert!(density >= 2);
    let a_idx = a.indices();
    let d_idx = d.indices();
    let levels: Vec<f64> = (0..density).map(|k| lambda * k as f64 / (density - 1) as f64).collect();
    let lattice = simplex_lattice(d_idx.len(), density - 1);
    let mut out = Vec::new();
    let mut counter = vec![0usize; a_idx.len()];
    loop {
        let a_mass: f64 = counter.iter().map(|&k| levels[k]).sum();
        let rest = 1.0 - a_mass - epsilon * d_idx.len() as f64;
        if rest >= 0.0 {
            for w in &lattice {
                let mut x = vec![0.0; p];
                for (pos, &k) in a_idx.iter().enumerate() {
                    x[k] = levels[counter[pos]];
                }
                for (pos, &i) in d_idx.iter().enumerate() {
                    x[i] = epsilon + rest * w[pos];
                }
                out.push(x);
            }
        }
        // odometer over the A coordinates
        let mut pos = 0;
        loop {
            if pos == counter.len() {
                return out;
            }
            counter[pos] += 1;
            if counter[pos] < density {
                break;
            }
            counter[pos] = 0;
            pos += 1;
        }
    }
}

/// Weights `k / divisions` summing to one over `dims` coordinates.
fn simplex_lattice(dims: usize, divisions: usize) -> Vec<Vec<f64>> {
    fn rec(dims: usize, left: usize, div: usize, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if dims == 1 {
            cur.push(left as f64 / div as f64);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k as f64 / div as f64);
            rec(dims - 1, left - k, div, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(dims, divisions, divisions, &mut Vec::new(), &mut out);
    out
}

/// Evaluates the generator of `F_A` on the region grid, each point on its
/// own support face. `lambda_override` replaces the computed `lambda`.
pub fn verify_supharmonic(
    spec: &SupharmSpec,
    chain: &ChainModel,
    d: SiteSet,
    epsilon: f64,
    grid_density: usize,
    lambda_override: Option<f64>,
    tolerance: f64,
) -> Result<SupharmReport> {
    let region = find_lambda(spec, chain, d, epsilon)?;
    let lambda_used = lambda_override.unwrap_or(region.lambda);
    if !(lambda_used > 0.0 && lambda_used <= 1.0) {
        return Err(Error::Invalid(format!("lambda = {lambda_used} must lie in (0, 1]")));
    }
    let density = grid_density.max(2);
    let grid = region_grid(chain.p(), spec.a, d, epsilon, lambda_used, density);
    let mut max_value = f64::NEG_INFINITY;
    let mut argmax = Vec::new();
    for x in &grid {
        let c = SiteSet::support(x);
        let val = if c.len() < 2 { 0.0 } else { eval_generator_fa(spec, chain, c, x)? };
        if val > max_value {
            max_value = val;
            argmax = x.clone();
        }
    }
    Ok(SupharmReport {
        spec: *spec,
        lambda_used,
        grid_density: density,
        points: grid.len(),
        passed: max_value <= tolerance,
        max_value,
        argmax,
        tolerance,
        note: "M is the maximum of the per-face constants; lambda may be conservative on faces with smaller M_C"
            .into(),
        region,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use approx::assert_abs_diff_eq;

    fn s(idx: &[usize]) -> SiteSet {
        SiteSet::from_indices(idx.iter().copied())
    }

    #[test]
    fn eval_fa_examples() {
        let spec = SupharmSpec::new(s(&[2]), 0.5, 1.0).unwrap();
        assert_abs_diff_eq!(eval_fa(&spec, &[0.5, 0.25, 0.25]), 1.0 / 32.0, epsilon = 1e-16);
        assert_eq!(eval_fa(&spec, &[0.5, 0.5, 0.0]), 0.0);
    }

    #[test]
    fn profile_derivatives_match_differences() {
        let spec = SupharmSpec::new(s(&[0]), 0.3, 1.7).unwrap();
        for &x in &[0.05, 0.3, 0.8] {
            let h = 1e-6;
            let d1 = (spec.f(x + h) - spec.f(x - h)) / (2.0 * h);
            let d2 = (spec.df(x + h) - spec.df(x - h)) / (2.0 * h);
            assert!((d1 - spec.df(x)).abs() < 1e-8);
            assert!((d2 - spec.d2f(x)).abs() < 1e-6);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SupharmSpec::new(s(&[0]), 1.0, 1.0).is_err());
        assert!(SupharmSpec::new(s(&[0]), 0.5, 0.9).is_err());
        assert!(SupharmSpec::new(SiteSet::EMPTY, 0.5, 1.0).is_err());
    }

    #[test]
    fn generator_vanishing_cases() {
        let c = corpus::complete(3, 1.0);
        let spec = SupharmSpec::new(s(&[2]), 0.5, 1.0).unwrap();
        assert_eq!(eval_generator_fa(&spec, &c, s(&[0, 1]), &[0.4, 0.6, 0.0]).unwrap(), 0.0);
        assert_eq!(eval_generator_fa(&spec, &c, s(&[0, 1]), &[0.4, 0.5, 0.1]).unwrap(), 0.0);
        assert_eq!(
            eval_generator_fa(&spec, &c, s(&[2]), &[0.0, 0.0, 1.0]),
            Err(Error::DegenerateFace(1))
        );
    }

    #[test]
    fn closed_form_matches_generic_generator() {
        let c = corpus::random_chain(4, 1.0, 31);
        let spec = SupharmSpec::new(s(&[1, 3]), 0.5, 1.0).unwrap();
        let x = [0.3, 0.2, 0.35, 0.15];
        let full = SiteSet::full(4);
        let fd = face_dynamics(&c, full).unwrap();
        let generic = fd.generator(&c.m, &spec, &x).unwrap();
        let closed = eval_generator_fa(&spec, &c, full, &x).unwrap();
        assert!((generic - closed).abs() < 1e-12 * (1.0 + generic.abs()));
    }

    #[test]
    fn closed_form_matches_finite_differences() {
        let c = corpus::complete(3, 1.0);
        let spec = SupharmSpec::new(s(&[2]), 0.5, 1.0).unwrap();
        let x = [0.25, 0.45, 0.3];
        let (fd, scale) = generator_finite_difference(&c, SiteSet::full(3), &|y| spec.value(y), &x).unwrap();
        let closed = eval_generator_fa(&spec, &c, SiteSet::full(3), &x).unwrap();
        assert!((fd - closed).abs() < 1e-6 * scale.max(closed.abs()), "fd={fd} closed={closed}");
    }

    #[test]
    fn lambda_recipe() {
        let c = corpus::complete(3, 1.0);
        let spec = SupharmSpec::new(s(&[2]), 0.5, 1.0).unwrap();
        let reg = find_lambda(&spec, &c, s(&[0, 1]), 0.2).unwrap();
        assert_abs_diff_eq!(reg.lambda_shape, 4.0 / 9.0, epsilon = 1e-15);
        // ratio sum is -1 on the full face, so M = 2 / (0.5 * 2.5)
        assert_abs_diff_eq!(reg.m_const, 1.6, epsilon = 1e-12);
        assert_abs_diff_eq!(reg.lambda_eps, (0.2f64 / 1.6).powi(2), epsilon = 1e-15);
        assert_eq!(reg.lambda, reg.lambda_eps.min(reg.lambda_shape));
        assert!(matches!(find_lambda(&spec, &c, s(&[0, 1]), 0.6), Err(Error::EmptyRegion(_))));
        assert!(find_lambda(&spec, &c, s(&[1, 2]), 0.1).is_err());
    }

    #[test]
    fn complete_chain_region_is_superharmonic() {
        let c = corpus::complete(3, 1.0);
        let spec = SupharmSpec::new(s(&[2]), 0.5, 1.0).unwrap();
        let rep = verify_supharmonic(&spec, &c, s(&[0, 1]), 0.2, 25, None, 1e-10).unwrap();
        assert!(rep.passed, "max = {}", rep.max_value);
        assert_eq!(rep.points, 25 * 25);
    }

    #[test]
    fn two_site_block_on_four_sites() {
        let c = corpus::asymmetric_four(1.0);
        let spec = SupharmSpec::new(s(&[2, 3]), 0.5, 1.0).unwrap();
        let rep = verify_supharmonic(&spec, &c, s(&[0, 1]), 0.1, 15, None, 1e-10).unwrap();
        assert!(rep.passed, "max = {} at {:?}", rep.max_value, rep.argmax);
    }

    #[test]
    fn oversized_lambda_can_break_the_sign() {
        let c = corpus::complete(3, 1.0);
        let spec = SupharmSpec::new(s(&[2]), 0.5, 1.0).unwrap();
        let rep = verify_supharmonic(&spec, &c, s(&[0, 1]), 0.2, 25, Some(0.6), 1e-10).unwrap();
        assert!(!rep.passed);
    }

    #[test]
    fn constant_carries_the_drift_factor_b() {
        let c = corpus::asymmetric_four(1.5);
        let spec = SupharmSpec::new(s(&[2]), 0.5, 1.5).unwrap();
        let rep = verify_supharmonic(&spec, &c, s(&[0, 1]), 0.2, 25, None, 1e-10).unwrap();
        assert!(rep.passed, "max = {} at {:?}", rep.max_value, rep.argmax);
        // without the factor b the recipe would give this larger lambda
        let without_b = (0.2f64 * 0.5 * (0.5 + 1.5 + 1.0) / 2.5).powi(2);
        assert!(without_b > rep.lambda_used);
        let x = [1.0 - 0.2 - without_b, 0.2, without_b, 0.0];
        let lf = eval_generator_fa(&spec, &c, s(&[0, 1, 2]), &x).unwrap();
        assert!(lf > 0.0, "{lf}");
    }

    #[test]
    fn vanishes_on_target_face() {
        let c = corpus::random_chain(4, 1.0, 3);
        let spec = SupharmSpec::new(s(&[3]), 0.5, 1.0).unwrap();
        let x = [0.2, 0.5, 0.3, 0.0];
        assert_eq!(eval_fa(&spec, &x), 0.0);
        assert_eq!(eval_generator_fa(&spec, &c, s(&[0, 1, 2]), &x).unwrap(), 0.0);
    }
}
