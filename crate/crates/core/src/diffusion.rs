//! The dimension-decaying diffusion on the simplex.
//!
//! On the face `Sigma_B` the process follows
//!
//! ```text
//! dX = b sum_{j in B} (m_j / X_j) v^B_j dt + sigma_B dW,
//! sigma_B sigma_B^T = sum_{j,k in B} m_j r^B(j,k) (e_j - e_k)(e_j - e_k)^T,
//! ```
//!
//! with `r^B` the trace rates of the original chain on `B`. When a
//! coordinate of `B` reaches the absorption threshold it is removed and the
//! path continues on the smaller face until a vertex is reached.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::functions::SmoothFunction;
use crate::rng::{self, domain};
use crate::sites::SiteSet;
use crate::trace::{self, TraceModel};
use crate::zrp::{check_simplex_point, validate_grid};

/// Drift and noise of the diffusion on one face.
#[derive(Debug, Clone)]
pub struct FaceDynamics {
    pub face: SiteSet,
    pub b: f64,
    pub trace: TraceModel,
    /// Row `j` holds `b m_j v^B_j` for `j` in `B`.
    pub drift_coef: DMatrix<f64>,
    /// `sum_{j,k} m_j r^B(j,k) (e_j - e_k)(e_j - e_k)^T`.
    pub covariance: DMatrix<f64>,
    /// `p x (|B| - 1)` factor with `noise noise^T = covariance`.
    pub noise: DMatrix<f64>,
}

impl FaceDynamics {
    pub fn p(&self) -> usize {
        self.drift_coef.nrows()
    }

    /// `b sum_{j in B} (m_j / x_j) v^B_j`, requiring `x_j > 0` on `B`.
    pub fn drift(&self, x: &[f64]) -> Result<DVector<f64>> {
        let p = self.p();
        let mut out = DVector::zeros(p);
        for j in self.face.iter() {
            if !(x[j] > 0.0) {
                return Err(Error::NonFiniteDrift(j));
            }
            let w = 1.0 / x[j];
            for k in self.face.iter() {
                out[k] += w * self.drift_coef[(j, k)];
            }
        }
        Ok(out)
    }

    /// `sum_{j,k in B} m_j r^B(j,k) <w, e_j - e_k>^2`, twice the second-order
    /// symbol of the face generator.
    pub fn quadratic_form(&self, m: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for j in self.face.iter() {
            for k in self.face.iter() {
                let d = w[j] - w[k];
                acc += m[j] * self.trace.r_b[(j, k)] * d * d;
            }
        }
        acc
    }

    /// The face generator applied to a smooth function at an interior point
    /// of the face: drift term plus `1/2 sum m_j r^B(j,k) d^2 F / d(e_j - e_k)^2`.
    pub fn generator(&self, m: &DVector<f64>, f: &dyn SmoothFunction, x: &[f64]) -> Result<f64> {
        let grad = f.gradient(x);
        let hess = f.hessian(x);
        let drift = self.drift(x)?;
        let mut second = 0.0;
        for j in self.face.iter() {
            for k in self.face.iter() {
                let rate = self.trace.r_b[(j, k)];
                if rate == 0.0 {
                    continue;
                }
                let dd = hess[(j, j)] + hess[(k, k)] - hess[(j, k)] - hess[(k, j)];
                second += m[j] * rate * dd;
            }
        }
        Ok(drift.dot(&grad) + 0.5 * second)
    }
}

/// Builds the dynamics on `B` from the trace of the original chain.
pub fn face_dynamics(chain: &ChainModel, face: SiteSet) -> Result<FaceDynamics> {
    let trace = trace::trace_rates(chain, face)?;
    let p = chain.p();
    let mut drift_coef = DMatrix::zeros(p, p);
    let mut covariance = DMatrix::zeros(p, p);
    for j in face.iter() {
        for k in 0..p {
            drift_coef[(j, k)] = chain.b * chain.m[j] * trace.v_b[(j, k)];
        }
        for k in face.iter() {
            let c = chain.m[j] * trace.r_b[(j, k)];
            if j == k || c == 0.0 {
                continue;
            }
            covariance[(j, j)] += c;
            covariance[(k, k)] += c;
            covariance[(j, k)] -= c;
            covariance[(k, j)] -= c;
        }
    }
    let noise = noise_factor(&covariance, face);
    Ok(FaceDynamics { face, b: chain.b, trace, drift_coef, covariance, noise })
}

/// Rank `|B| - 1` factor of the face covariance by symmetric
/// eigendecomposition of its `B x B` block.
fn noise_factor(cov: &DMatrix<f64>, face: SiteSet) -> DMatrix<f64> {
    let idx = face.indices();
    let nb = idx.len();
    let p = cov.nrows();
    let block = DMatrix::from_fn(nb, nb, |a, c| cov[(idx[a], idx[c])]);
    let eig = block.symmetric_eigen();
    let mut order: Vec<usize> = (0..nb).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let rank = nb - 1;
    let mut out = DMatrix::zeros(p, rank);
    for (col, &e) in order.iter().take(rank).enumerate() {
        let scale = eig.eigenvalues[e].max(0.0).sqrt();
        let vec = eig.eigenvectors.column(e);
        let mean = vec.sum() / nb as f64;
        for (a, &site) in idx.iter().enumerate() {
            out[(site, col)] = (vec[a] - mean) * scale;
        }
    }
    out
}

/// Dynamics for every face of size at least two inside `root`.
#[derive(Debug, Clone)]
pub struct FaceCache {
    faces: HashMap<SiteSet, FaceDynamics>,
}

impl FaceCache {
    pub fn new(chain: &ChainModel, root: SiteSet) -> Result<Self> {
        let mut faces = HashMap::new();
        for face in root.subsets().filter(|s| s.len() >= 2) {
            faces.insert(face, face_dynamics(chain, face)?);
        }
        Ok(FaceCache { faces })
    }

    pub fn get(&self, face: SiteSet) -> Option<&FaceDynamics> {
        self.faces.get(&face)
    }
}

/// One Euler-Maruyama step on the active face: `x + drift dt + noise sqrt(dt) z`,
/// then exact zeros off the face and renormalization of the total mass.
/// Coordinates may come out negative; the caller treats that as a hit.
pub fn em_step(x: &[f64], face: &FaceDynamics, dt: f64, gaussians: &[f64]) -> Result<Vec<f64>> {
    let drift = face.drift(x)?;
    let sdt = dt.sqrt();
    let p = x.len();
    let mut out = vec![0.0; p];
    for i in face.face.iter() {
        let mut noise = 0.0;
        for (c, z) in gaussians.iter().enumerate().take(face.noise.ncols()) {
            noise += face.noise[(i, c)] * z;
        }
        out[i] = x[i] + drift[i] * dt + noise * sdt;
    }
    let total: f64 = out.iter().sum();
    let shift = (total - 1.0) / face.face.len() as f64;
    for i in face.face.iter() {
        out[i] -= shift;
    }
    Ok(out)
}

/// Integration controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionControls {
    pub dt_base: f64,
    /// A coordinate of the active face at or below this is absorbed.
    pub eps_abs: f64,
    /// Steps shrink as `(min_j x_j / x_ref)^2` once the path is closer than
    /// `x_ref` to the face boundary.
    pub x_ref: f64,
    pub dt_floor: f64,
}

impl Default for DiffusionControls {
    fn default() -> Self {
        Self { dt_base: 1e-4, eps_abs: 1e-4, x_ref: 0.1, dt_floor: 1e-14 }
    }
}

impl DiffusionControls {
    fn validate(&self) -> Result<()> {
        let ok = self.dt_base > 0.0
            && self.eps_abs >= 0.0
            && self.eps_abs < 0.5
            && self.x_ref > 0.0
            && self.dt_floor > 0.0
            && self.dt_floor <= self.dt_base;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid diffusion controls {self:?}")))
        }
    }

    pub fn step_size(&self, min_active: f64) -> f64 {
        let ratio = (min_active / self.x_ref).min(1.0);
        self.dt_base * ratio * ratio
    }
}

/// Absorption times and the faces entered at those times. Entry 0 is
/// `(0, support(x0))`, so a start on a proper face is recorded explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionRecord {
    pub sigmas: Vec<f64>,
    pub faces: Vec<SiteSet>,
    pub terminal: Option<usize>,
}

impl AbsorptionRecord {
    fn start(face: SiteSet) -> Self {
        let terminal = (face.len() == 1).then(|| face.iter().next().unwrap());
        AbsorptionRecord { sigmas: vec![0.0], faces: vec![face], terminal }
    }

    /// Time of the first support reduction; `0` for a start at a vertex.
    pub fn first_absorption(&self) -> Option<f64> {
        match self.sigmas.get(1) {
            Some(&s) => Some(s),
            None if self.faces[0].len() == 1 => Some(0.0),
            None => None,
        }
    }

    /// Time the terminal vertex was reached.
    pub fn vertex_time(&self) -> Option<f64> {
        self.terminal.map(|_| *self.sigmas.last().unwrap())
    }

    /// Number of absorption events that removed more than one coordinate.
    pub fn multi_drops(&self) -> usize {
        self.faces.windows(2).filter(|w| w[0].len() - w[1].len() > 1).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusionPath {
    pub sample_times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub record: AbsorptionRecord,
    pub seed: u64,
    pub replica: u64,
    pub steps: u64,
}

/// Inputs shared by every replica.
#[derive(Debug, Clone)]
pub struct DiffusionRun<'a> {
    pub chain: &'a ChainModel,
    pub faces: &'a FaceCache,
    pub x0: &'a [f64],
    pub horizon: f64,
    pub grid: &'a [f64],
    pub controls: DiffusionControls,
}

impl<'a> DiffusionRun<'a> {
    fn validate(&self) -> Result<()> {
        if self.x0.len() != self.chain.p() {
            return Err(Error::Invalid("x0 length differs from the site count".into()));
        }
        check_simplex_point(self.x0)?;
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Invalid(format!("horizon {} must be positive", self.horizon)));
        }
        self.controls.validate()?;
        validate_grid(self.grid, self.horizon)
    }
}

/// Removes active coordinates at or below `eps`, renormalizes, and returns
/// the remaining face.
fn absorb(x: &mut [f64], face: SiteSet, eps: f64) -> SiteSet {
    let hit = SiteSet::from_indices(face.iter().filter(|&j| x[j] <= eps));
    if hit.is_empty() {
        return face;
    }
    let mut rest = face.difference(hit);
    if rest.is_empty() {
        // cannot happen while eps < 1/p; keep the largest coordinate
        let top = face.iter().max_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap()).unwrap();
        rest = SiteSet::singleton(top);
    }
    for j in hit.iter() {
        x[j] = 0.0;
    }
    if rest.len() == 1 {
        let v = rest.iter().next().unwrap();
        x.iter_mut().for_each(|c| *c = 0.0);
        x[v] = 1.0;
    } else {
        let total: f64 = rest.iter().map(|j| x[j]).sum();
        for j in rest.iter() {
            x[j] /= total;
        }
    }
    rest
}

/// One replica on stream `replica` of `seed`.
pub fn simulate_diffusion(run: &DiffusionRun<'_>, seed: u64, replica: u64) -> Result<DiffusionPath> {
    run.validate()?;
    let ctl = run.controls;
    let p = run.chain.p();
    let mut rng = rng::stream(seed, domain::DIFFUSION, replica);
    let total: f64 = run.x0.iter().sum();
    let mut x: Vec<f64> = run.x0.iter().map(|v| v / total).collect();
    let mut face = SiteSet::support(&x);
    let mut record = AbsorptionRecord::start(face);
    if face.len() == 1 {
        let v = face.iter().next().unwrap();
        x.iter_mut().for_each(|c| *c = 0.0);
        x[v] = 1.0;
    }
    let mut points = Vec::with_capacity(run.grid.len());
    let mut next = 0usize;
    let mut t = 0.0f64;
    let mut steps = 0u64;
    let mut z = vec![0.0; p];

    loop {
        while next < run.grid.len() && run.grid[next] <= t {
            points.push(x.clone());
            next += 1;
        }
        if face.len() == 1 || t >= run.horizon {
            break;
        }
        let dynamics = run
            .faces
            .get(face)
            .ok_or_else(|| Error::Invalid(format!("face {face} missing from the cache")))?;
        let min_active = face.iter().map(|j| x[j]).fold(f64::INFINITY, f64::min);
        let dt_adapt = ctl.step_size(min_active);
        if dt_adapt < ctl.dt_floor {
            return Err(Error::StepUnderflow { dt: dt_adapt, floor: ctl.dt_floor });
        }
        let stop = if next < run.grid.len() { run.grid[next] } else { run.horizon };
        let (dt, t_new) = if t + dt_adapt >= stop { (stop - t, stop) } else { (dt_adapt, t + dt_adapt) };
        for zi in z.iter_mut().take(dynamics.noise.ncols()) {
            *zi = rng.sample(StandardNormal);
        }
        x = em_step(&x, dynamics, dt, &z)?;
        t = t_new;
        steps += 1;
        let after = absorb(&mut x, face, ctl.eps_abs);
        if after != face {
            face = after;
            record.sigmas.push(t);
            record.faces.push(face);
            if face.len() == 1 {
                record.terminal = face.iter().next();
            }
        }
    }
    while points.len() < run.grid.len() {
        points.push(x.clone());
    }
    Ok(DiffusionPath { sample_times: run.grid.to_vec(), points, record, seed, replica, steps })
}

pub fn simulate_diffusion_ensemble(
    run: &DiffusionRun<'_>,
    replicas: u64,
    seed: u64,
) -> Result<Vec<DiffusionPath>> {
    (0..replicas).into_par_iter().map(|k| simulate_diffusion(run, seed, k)).collect()
}

/// `d(B) = min_{j in B} 1/2 sum_{k in B, k != j} (m_j r^B(j,k) + m_k r^B(k,j))`.
pub fn dissipation_constant(chain: &ChainModel, face: SiteSet) -> Result<f64> {
    let t = trace::trace_rates(chain, face)?;
    let m = &chain.m;
    Ok(face
        .iter()
        .map(|j| {
            0.5 * face
                .iter()
                .filter(|&k| k != j)
                .map(|k| m[j] * t.r_b[(j, k)] + m[k] * t.r_b[(k, j)])
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min))
}

/// Upper bound on the mean time to leave the interior of `Sigma_B`:
/// `|B|^{max(q-1,1)} / ((q+1)(q-b) d(B))` for `q > b`.
pub fn absorption_bound(face: SiteSet, chain: &ChainModel, q: f64) -> Result<f64> {
    if !(q > chain.b) {
        return Err(Error::BadQ { q, b: chain.b });
    }
    face.validate(chain.p())?;
    if face.len() < 2 {
        return Err(Error::DegenerateFace(face.len()));
    }
    let d = dissipation_constant(chain, face)?;
    let n = face.len() as f64;
    Ok(n.powf((q - 1.0).max(1.0)) / ((q + 1.0) * (q - chain.b) * d))
}

/// Minimum of [`absorption_bound`] over a grid of `q` values above `b`.
pub fn best_absorption_bound(face: SiteSet, chain: &ChainModel, q_grid: &[f64]) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &q in q_grid.iter().filter(|&&q| q > chain.b) {
        let v = absorption_bound(face, chain, q)?;
        if best.map_or(true, |(_, bv)| v < bv) {
            best = Some((q, v));
        }
    }
    best.ok_or(Error::BadQ { q: q_grid.iter().cloned().fold(f64::NAN, f64::max), b: chain.b })
}

/// Heuristic envelope for the mean time to reach a vertex from a point with
/// support `root`: the sum over face sizes `|root|, .., 2` of the worst
/// optimized per-face bound of that size.
pub fn vertex_time_envelope(root: SiteSet, chain: &ChainModel, q_grid: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for size in 2..=root.len() {
        let mut worst: f64 = 0.0;
        for face in root.subsets().filter(|s| s.len() == size) {
            worst = worst.max(best_absorption_bound(face, chain, q_grid)?.1);
        }
        total += worst;
    }
    Ok(total)
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
    fn full_face_second_order_matches_coefficient_matrix() {
        let c = corpus::random_chain(4, 1.0, 5);
        let fd = face_dynamics(&c, SiteSet::full(4)).unwrap();
        let sym_a = (&c.a + c.a.transpose()) * 0.5;
        assert!((&fd.covariance * 0.5 - sym_a).amax() < 1e-12);
    }

    #[test]
    fn two_site_face_drift_from_trace_rates() {
        let c = corpus::complete(3, 1.0);
        let fd = face_dynamics(&c, s(&[0, 1])).unwrap();
        let x = [0.3, 0.7, 0.0];
        let d = fd.drift(&x).unwrap();
        let expect = (1.0 / 3.0) * 1.5 * (1.0 / 0.7 - 1.0 / 0.3);
        assert_abs_diff_eq!(d[0], expect, epsilon = 1e-13);
        assert_abs_diff_eq!(d[1], -expect, epsilon = 1e-13);
        assert_eq!(d[2], 0.0);
        assert_eq!(fd.noise.ncols(), 1);
        assert_eq!(crate::linalg::rank(&fd.noise, 1e-10), 1);
    }

    #[test]
    fn noise_factor_reproduces_quadratic_form() {
        let c = corpus::random_chain(5, 1.0, 8);
        let mut rng = crate::rng::stream(1, 0, 0);
        for face in [SiteSet::full(5), s(&[0, 2, 4]), s(&[1, 3])] {
            let fd = face_dynamics(&c, face).unwrap();
            let nn = &fd.noise * fd.noise.transpose();
            for j in 0..5 {
                assert!(nn.row(j).sum().abs() < 1e-12);
            }
            for _ in 0..20 {
                let mut w = DVector::from_fn(5, |i, _| if face.contains(i) { rng.random::<f64>() - 0.5 } else { 0.0 });
                let mean = w.sum() / face.len() as f64;
                for i in face.iter() {
                    w[i] -= mean;
                }
                let lhs = (w.transpose() * &nn * &w)[0];
                assert!((lhs - fd.quadratic_form(&c.m, &w)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn em_step_examples() {
        let c = corpus::complete(3, 1.0);
        let fd = face_dynamics(&c, s(&[0, 1])).unwrap();
        let x = [0.5, 0.5, 0.0];
        assert_eq!(em_step(&x, &fd, 1e-3, &[0.0, 0.0, 0.0]).unwrap(), x.to_vec());

        let full = face_dynamics(&c, SiteSet::full(3)).unwrap();
        let y = [0.2, 0.3, 0.5];
        let z = [0.7, -1.1, 0.3];
        let out = em_step(&y, &full, 1e-3, &z).unwrap();
        assert_abs_diff_eq!(out.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let out2 = em_step(&x, &fd, 1e-3, &z).unwrap();
        assert_eq!(out2[2], 0.0);

        let d1 = em_step(&y, &full, 1e-4, &z).unwrap();
        let d2 = em_step(&y, &full, 1e-6, &z).unwrap();
        let n1: f64 = d1.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let n2: f64 = d2.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((n1 / n2 - 10.0).abs() < 1.0, "ratio {}", n1 / n2);

        assert_eq!(em_step(&[0.0, 0.5, 0.5], &full, 1e-3, &z), Err(Error::NonFiniteDrift(0)));
    }

    fn run_one(c: &ChainModel, x0: &[f64], horizon: f64, seed: u64) -> DiffusionPath {
        let cache = FaceCache::new(c, SiteSet::support(x0)).unwrap();
        let grid: Vec<f64> = (0..=20).map(|k| horizon * k as f64 / 20.0).collect();
        let run = DiffusionRun {
            chain: c,
            faces: &cache,
            x0,
            horizon,
            grid: &grid,
            controls: DiffusionControls::default(),
        };
        simulate_diffusion(&run, seed, 0).unwrap()
    }

    #[test]
    fn vertex_start_is_a_trap() {
        let c = corpus::complete(3, 1.0);
        let path = run_one(&c, &[0.0, 1.0, 0.0], 1.0, 1);
        assert!(path.points.iter().all(|x| x == &vec![0.0, 1.0, 0.0]));
        assert_eq!(path.record.sigmas, vec![0.0]);
        assert_eq!(path.record.first_absorption(), Some(0.0));
        assert_eq!(path.record.terminal, Some(1));
        assert_eq!(path.steps, 0);
    }

    #[test]
    fn face_start_stays_on_face() {
        let c = corpus::random_chain(4, 1.0, 12);
        let path = run_one(&c, &[0.5, 0.0, 0.5, 0.0], 2.0, 4);
        for x in &path.points {
            assert_eq!(x[1], 0.0);
            assert_eq!(x[3], 0.0);
        }
        assert_eq!(path.record.faces[0], s(&[0, 2]));
    }

    #[test]
    fn path_invariants_and_determinism() {
        let c = corpus::complete(3, 1.0);
        let x0 = [1.0 / 3.0; 3];
        let a = run_one(&c, &x0, 5.0, 9);
        assert_eq!(a, run_one(&c, &x0, 5.0, 9));
        let mut prev = SiteSet::full(3);
        for x in &a.points {
            assert!(x.iter().all(|&v| v >= 0.0));
            assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let sup = SiteSet::support(x);
            assert!(sup.is_subset(prev));
            prev = sup;
        }
        assert!(a.record.faces.windows(2).all(|w| w[1].is_subset(w[0]) && w[1] != w[0]));
        assert!(a.record.sigmas.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn absorption_bound_examples() {
        let c = corpus::complete(3, 1.0);
        assert_abs_diff_eq!(dissipation_constant(&c, SiteSet::full(3)).unwrap(), 2.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(absorption_bound(SiteSet::full(3), &c, 2.0).unwrap(), 1.5, epsilon = 1e-12);
        let pair = s(&[0, 1]);
        let d = dissipation_constant(&c, pair).unwrap();
        assert_abs_diff_eq!(absorption_bound(pair, &c, 2.0).unwrap(), 2.0 / (3.0 * d), epsilon = 1e-12);
        assert!(absorption_bound(SiteSet::full(3), &c, 1.0 + 1e-9).unwrap() > 1e8);
        assert_eq!(absorption_bound(SiteSet::full(3), &c, 1.0), Err(Error::BadQ { q: 1.0, b: 1.0 }));
    }
}
