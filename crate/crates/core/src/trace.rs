//! Trace processes on faces, equilibrium potentials and the projection map.
//!
//! Site-indexed quantities are stored at full size `p` so that they can be
//! indexed by site directly; rows and columns of sites outside the face are
//! zero.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::policy::NumericPolicy;
use crate::rng::{self, domain};
use crate::sites::SiteSet;

/// Equilibrium potentials `u^B_k(j)` stored as a `p x p` matrix with row `k`
/// holding `u^B_k` for `k` in `B` and zero rows otherwise.
///
/// Any nonempty `B` is accepted; for a singleton the single potential is the
/// constant one.
pub fn potentials_matrix(chain: &ChainModel, face: SiteSet) -> Result<DMatrix<f64>> {
    let p = chain.p();
    face.validate(p)?;
    let inside = face.indices();
    let outside = face.complement(p).indices();
    let q = chain.generator();
    let mut u = DMatrix::zeros(p, p);
    for &k in &inside {
        u[(k, k)] = 1.0;
    }
    if outside.is_empty() {
        return Ok(u);
    }
    // Q_AA u_A = -Q_AB delta_k, one right-hand side per k in B.
    let na = outside.len();
    let q_aa = DMatrix::from_fn(na, na, |a, c| q[(outside[a], outside[c])]);
    let rhs = DMatrix::from_fn(na, inside.len(), |a, kk| -q[(outside[a], inside[kk])]);
    let sol = q_aa.lu().solve(&rhs).ok_or(Error::SingularSystem)?;
    for (kk, &k) in inside.iter().enumerate() {
        for (a, &j) in outside.iter().enumerate() {
            u[(k, j)] = sol[(a, kk)];
        }
    }
    Ok(u)
}

/// Equilibrium potentials for a face with at least two sites.
pub fn equilibrium_potentials(chain: &ChainModel, face: SiteSet) -> Result<DMatrix<f64>> {
    face.validate(chain.p())?;
    if face.len() < 2 {
        return Err(Error::DegenerateFace(face.len()));
    }
    potentials_matrix(chain, face)
}

/// Matrix of `gamma_B`: `[gamma_B x]_j = x_j + sum_{k not in B} u^B_j(k) x_k`
/// for `j` in `B`, zero elsewhere. This is exactly the potentials matrix.
pub fn projection_matrix(chain: &ChainModel, face: SiteSet) -> Result<DMatrix<f64>> {
    potentials_matrix(chain, face)
}

/// `max |gamma_B gamma_C - gamma_B|` for nested `B` inside `C`.
pub fn projection_composition_check(chain: &ChainModel, b: SiteSet, c: SiteSet) -> Result<f64> {
    if !b.is_subset(c) {
        return Err(Error::BadFace(format!("{b} is not contained in {c}")));
    }
    let gb = projection_matrix(chain, b)?;
    let gc = projection_matrix(chain, c)?;
    Ok(linalg::max_abs_diff(&(&gb * &gc), &gb))
}

/// The face `D` of `B` whose interior contains the image of the interior of
/// `Sigma_C` under `gamma_B`, read off the support of the potentials.
pub fn face_image(chain: &ChainModel, b: SiteSet, c: SiteSet, policy: &NumericPolicy) -> Result<SiteSet> {
    let p = chain.p();
    b.validate(p)?;
    c.validate(p)?;
    let u = potentials_matrix(chain, b)?;
    let watched = b.complement(p).intersection(c);
    let silent = SiteSet::from_indices(
        b.iter().filter(|&i| watched.iter().all(|k| u[(i, k)] <= policy.support_tol)),
    );
    Ok(b.intersection(c).union(b.difference(silent)))
}

/// Trace-process parameters of a face.
#[derive(Debug, Clone)]
pub struct TraceModel {
    pub face: SiteSet,
    /// Row `k` is `u^B_k`; doubles as the matrix of `gamma_B`.
    pub u: DMatrix<f64>,
    /// `r^B(j, k)` for `j != k` in `B`; zero elsewhere.
    pub r_b: DMatrix<f64>,
    /// `lambda^B(j) = -(L_S u^B_j)(j)` for `j` in `B`.
    pub lambda_b: DVector<f64>,
    /// Row `j` is `v^B_j = sum_k r^B(j,k) (e_k - e_j)` for `j` in `B`.
    pub v_b: DMatrix<f64>,
}

impl TraceModel {
    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn members(&self) -> Vec<usize> {
        self.face.indices()
    }

    /// `r^B` restricted to `B x B`, in increasing site order.
    pub fn compact_rates(&self) -> DMatrix<f64> {
        let idx = self.members();
        DMatrix::from_fn(idx.len(), idx.len(), |a, c| self.r_b[(idx[a], idx[c])])
    }

    /// Largest violation of the potential and rate identities.
    pub fn residual(&self, chain: &ChainModel) -> f64 {
        let p = chain.p();
        let outside = self.face.complement(p);
        let lu = chain.generator() * self.u.transpose();
        let mut worst: f64 = 0.0;
        for j in 0..p {
            let col: f64 = self.face.iter().map(|k| self.u[(k, j)]).sum();
            worst = worst.max((col - 1.0).abs());
        }
        for k in self.face.iter() {
            for j in outside.iter() {
                worst = worst.max(lu[(j, k)].abs());
            }
        }
        for j in self.face.iter() {
            let row: f64 = self.face.iter().filter(|&k| k != j).map(|k| self.r_b[(j, k)]).sum();
            worst = worst.max((self.lambda_b[j] - row).abs());
        }
        worst
    }
}

/// Trace rates `r^B(j,k) = (L_S u^B_k)(j)` and holding rates on a face.
pub fn trace_rates(chain: &ChainModel, face: SiteSet) -> Result<TraceModel> {
    let u = equilibrium_potentials(chain, face)?;
    let p = chain.p();
    // lu[(j, k)] = (L_S u_k)(j)
    let lu = chain.generator() * u.transpose();
    let mut r_b = DMatrix::zeros(p, p);
    let mut lambda_b = DVector::zeros(p);
    for j in face.iter() {
        for k in face.iter() {
            if j != k {
                r_b[(j, k)] = lu[(j, k)].max(0.0);
            }
        }
        lambda_b[j] = -lu[(j, j)];
    }
    let mut v_b = DMatrix::zeros(p, p);
    for j in face.iter() {
        for k in face.iter() {
            if j != k {
                v_b[(j, k)] = r_b[(j, k)];
                v_b[(j, j)] -= r_b[(j, k)];
            }
        }
    }
    Ok(TraceModel { face, u, r_b, lambda_b, v_b })
}

/// The trace chain on `B` as a chain in its own right (sites relabelled
/// `0..|B|` in increasing order).
pub fn trace_chain(chain: &ChainModel, face: SiteSet) -> Result<ChainModel> {
    let t = trace_rates(chain, face)?;
    ChainModel::build(crate::chain::RateMatrix::new(t.compact_rates())?, chain.b)
}

/// `ker(gamma_B) = span{v_k : k not in B}`, checked by containment plus rank.
pub fn kernel_matches_drift_span(chain: &ChainModel, face: SiteSet, tol: f64) -> Result<bool> {
    let p = chain.p();
    let gamma = projection_matrix(chain, face)?;
    let outside = face.complement(p).indices();
    for &k in &outside {
        if (&gamma * chain.drift_vector(k)).amax() > tol {
            return Ok(false);
        }
    }
    let span = DMatrix::from_fn(p, outside.len(), |i, c| chain.v[(outside[c], i)]);
    let span_rank = linalg::rank(&span, tol);
    let image_rank = linalg::rank(&gamma, tol);
    Ok(span_rank == outside.len() && image_rank + span_rank == p)
}

/// Monte Carlo estimate of which site of `B` is hit first.
#[derive(Debug, Clone, Serialize)]
pub struct HittingEstimate {
    pub face: SiteSet,
    pub start: usize,
    pub runs: u64,
    /// Frequency of hitting each site first (zero outside `B`).
    pub freq: Vec<f64>,
    /// Standard error `sqrt(f (1 - f) / runs)` per site.
    pub std_err: Vec<f64>,
}

const HITTING_BLOCK: u64 = 4096;

/// Runs the embedded jump chain from `start` until it enters `B`, `runs`
/// times. Only the jump chain matters for which site is hit first.
pub fn mc_hitting_oracle(
    chain: &ChainModel,
    start: usize,
    face: SiteSet,
    runs: u64,
    seed: u64,
) -> Result<HittingEstimate> {
    let p = chain.p();
    face.validate(p)?;
    if start >= p {
        return Err(Error::Invalid(format!("start site {} outside 1..={p}", start + 1)));
    }
    if runs == 0 {
        return Err(Error::Invalid("runs must be positive".into()));
    }
    let cumulative: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let mut acc = 0.0;
            (0..p)
                .map(|j| {
                    acc += chain.r(i, j) / chain.lambda[i];
                    acc
                })
                .collect()
        })
        .collect();
    let blocks = runs.div_ceil(HITTING_BLOCK);
    let counts = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let mut rng = rng::stream(seed, domain::HITTING, blk);
            let n = HITTING_BLOCK.min(runs - blk * HITTING_BLOCK);
            let mut counts = vec![0u64; p];
            for _ in 0..n {
                let mut site = start;
                while !face.contains(site) {
                    let u: f64 = rng.random();
                    let row = &cumulative[site];
                    site = row.iter().position(|&c| u < c).unwrap_or_else(|| {
                        // rounding at the top of the table
                        row.iter().rposition(|&c| c > 0.0).unwrap_or(p - 1)
                    });
                }
                counts[site] += 1;
            }
            counts
        })
        .reduce(
            || vec![0u64; p],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let n = runs as f64;
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let std_err = freq.iter().map(|&f| (f * (1.0 - f) / n).sqrt()).collect();
    Ok(HittingEstimate { face, start, runs, freq, std_err })
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
    fn complete_three_site_worked_example() {
        let c = corpus::complete(3, 1.0);
        let u = equilibrium_potentials(&c, s(&[0, 1])).unwrap();
        assert_abs_diff_eq!(u[(0, 2)], 0.5, epsilon = 1e-15);
        assert_eq!(u.row(0).iter().copied().collect::<Vec<_>>()[..2], [1.0, 0.0]);

        let t = trace_rates(&c, s(&[0, 1])).unwrap();
        assert_abs_diff_eq!(t.r_b[(0, 1)], 1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(t.lambda_b[0], 1.5, epsilon = 1e-14);

        let x = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let y = t.gamma() * x;
        assert_abs_diff_eq!(y[0], 0.45, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], 0.55, epsilon = 1e-15);
        assert_eq!(y[2], 0.0);

        let g3 = t.gamma() * c.drift_vector(2);
        assert!(g3.amax() < 1e-14);
    }

    #[test]
    fn full_face_is_identity() {
        let c = corpus::random_chain(4, 1.0, 3);
        let full = SiteSet::full(4);
        let u = equilibrium_potentials(&c, full).unwrap();
        assert_eq!(u, DMatrix::identity(4, 4));
        let t = trace_rates(&c, full).unwrap();
        assert!((&t.r_b - c.rates.matrix()).amax() < 1e-14);
    }

    #[test]
    fn singleton_projection_sends_mass_to_vertex() {
        let c = corpus::random_chain(4, 1.0, 1);
        let g = projection_matrix(&c, s(&[2])).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(g[(2, j)], 1.0, epsilon = 1e-12);
        }
        assert!(equilibrium_potentials(&c, s(&[2])).is_err());
    }

    #[test]
    fn identity_on_face() {
        let c = corpus::random_chain(5, 1.0, 9);
        let b = s(&[0, 2, 3]);
        let g = projection_matrix(&c, b).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.0, 0.5, 0.3, 0.0]);
        assert!((&g * &x - &x).amax() < 1e-15);
    }

    #[test]
    fn face_image_cases() {
        let pol = NumericPolicy::default();
        let c = corpus::complete(3, 1.0);
        assert_eq!(face_image(&c, s(&[0, 1]), s(&[0]), &pol).unwrap(), s(&[0]));
        assert_eq!(face_image(&c, s(&[0, 1]), s(&[2]), &pol).unwrap(), s(&[0, 1]));
        assert_eq!(face_image(&c, s(&[0, 1]), SiteSet::full(3), &pol).unwrap(), s(&[0, 1]));
        // a path graph 0 - 1 - 2: from site 2 the walk must pass 1 before 0
        let path = ChainModel::from_rows(
            &[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]],
            1.0,
        )
        .unwrap();
        assert_eq!(face_image(&path, s(&[0, 1]), s(&[2]), &pol).unwrap(), s(&[1]));
    }

    #[test]
    fn composition_on_nested_pairs() {
        let c = corpus::random_chain(5, 1.0, 17);
        let full = SiteSet::full(5);
        for cc in full.subsets().filter(|x| !x.is_empty()) {
            for bb in cc.subsets().filter(|x| !x.is_empty()) {
                let res = projection_composition_check(&c, bb, cc).unwrap();
                assert!(res < 1e-10, "{bb} in {cc}: {res}");
            }
        }
    }

    #[test]
    fn hitting_oracle_start_inside_face() {
        let c = corpus::complete(3, 1.0);
        let est = mc_hitting_oracle(&c, 1, s(&[0, 1]), 100, 5).unwrap();
        assert_eq!(est.freq, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn hitting_oracle_symmetric() {
        let c = corpus::complete(3, 1.0);
        let est = mc_hitting_oracle(&c, 2, s(&[0, 1]), 100_000, 11).unwrap();
        assert!((est.freq[0] - 0.5).abs() < 3.0 * est.std_err[0]);
    }

    #[test]
    fn hitting_oracle_matches_solve_on_four_sites() {
        let c = corpus::random_chain(4, 1.0, 23);
        let b = s(&[0, 3]);
        let u = equilibrium_potentials(&c, b).unwrap();
        for start in [1, 2] {
            let est = mc_hitting_oracle(&c, start, b, 100_000, 99).unwrap();
            for k in b.iter() {
                let dev = (est.freq[k] - u[(k, start)]).abs();
                assert!(dev <= 3.0 * est.std_err[k] + 1e-12, "k={k} start={start} dev={dev}");
            }
        }
    }
}
