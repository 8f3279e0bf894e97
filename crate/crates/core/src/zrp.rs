//! Exact simulation of the condensing zero-range process on `H_N` and its
//! rescaled trajectory `X^N_t = eta(t N^2) / N`.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::policy::NumericPolicy;
use crate::rng::{self, domain};

/// Per-site jump rates `g_i(n)`.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpRateFamily {
    /// `g_i(n) = m_i (1 + b / n)`.
    Default { m: Vec<f64>, b: f64 },
    /// Tabulated `g_i(0..len)`, continued by the default family beyond the table.
    Table { m: Vec<f64>, b: f64, table: Vec<Vec<f64>> },
}

impl JumpRateFamily {
    pub fn table(chain: &ChainModel, table: Vec<Vec<f64>>, policy: &NumericPolicy) -> Result<Self> {
        let p = chain.p();
        if table.len() != p {
            return Err(Error::Invalid(format!("rate table has {} rows, expected {p}", table.len())));
        }
        for (i, row) in table.iter().enumerate() {
            match row.first() {
                Some(&g0) if g0 != 0.0 => {
                    return Err(Error::Invalid(format!("g_{}(0) = {g0} must be 0", i + 1)))
                }
                _ => {}
            }
            if let Some(n) = row.iter().skip(1).position(|&g| !(g > 0.0 && g.is_finite())) {
                return Err(Error::Invalid(format!("g_{}({}) must be positive", i + 1, n + 1)));
            }
        }
        let fam = JumpRateFamily::Table { m: chain.m.iter().copied().collect(), b: chain.b, table };
        for (i, res) in fam.tail_residuals().into_iter().enumerate() {
            if let Some(res) = res {
                if res.abs() > policy.table_tail_tol {
                    return Err(Error::Invalid(format!(
                        "g_{} tail residual {res:e} exceeds {:e}",
                        i + 1,
                        policy.table_tail_tol
                    )));
                }
            }
        }
        Ok(fam)
    }

    #[inline]
    pub fn g(&self, i: usize, n: u64) -> f64 {
        if n == 0 {
            return 0.0;
        }
        match self {
            JumpRateFamily::Default { m, b } => m[i] * (1.0 + b / n as f64),
            JumpRateFamily::Table { m, b, table } => match table[i].get(n as usize) {
                Some(&g) => g,
                None => m[i] * (1.0 + b / n as f64),
            },
        }
    }

    /// `n (g_i(n) / m_i - 1) - b` at the last tabulated `n >= 1` of each site;
    /// `None` for the default family or an empty table row.
    pub fn tail_residuals(&self) -> Vec<Option<f64>> {
        match self {
            JumpRateFamily::Default { m, .. } => vec![None; m.len()],
            JumpRateFamily::Table { m, b, table } => table
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    (row.len() >= 2).then(|| {
                        let n = (row.len() - 1) as f64;
                        n * (row[row.len() - 1] / m[i] - 1.0) - b
                    })
                })
                .collect(),
        }
    }
}

/// The default family `g_i(n) = m_i (1 + b/n)`.
pub fn default_rates(chain: &ChainModel) -> JumpRateFamily {
    JumpRateFamily::Default { m: chain.m.iter().copied().collect(), b: chain.b }
}

/// Occupation numbers of a configuration with `N = sum eta_i` particles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ZrpState {
    pub eta: Vec<u64>,
}

impl ZrpState {
    pub fn new(eta: Vec<u64>) -> Result<Self> {
        if eta.iter().sum::<u64>() == 0 {
            return Err(Error::EmptyConfig);
        }
        Ok(ZrpState { eta })
    }

    pub fn n(&self) -> u64 {
        self.eta.iter().sum()
    }

    /// `round(N x)` with the largest-remainder correction so the total is `N`.
    pub fn from_simplex(x: &[f64], n: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyConfig);
        }
        check_simplex_point(x)?;
        let scaled: Vec<f64> = x.iter().map(|&xi| xi * n as f64).collect();
        let mut eta: Vec<u64> = scaled.iter().map(|s| s.floor() as u64).collect();
        let assigned: u64 = eta.iter().sum();
        let mut order: Vec<usize> = (0..x.len()).collect();
        // stable: ties broken by site index
        order.sort_by(|&a, &b| {
            let ra = scaled[a] - scaled[a].floor();
            let rb = scaled[b] - scaled[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().take(n.saturating_sub(assigned) as usize) {
            eta[i] += 1;
        }
        ZrpState::new(eta)
    }

    pub fn embed(&self) -> Vec<f64> {
        embed(&self.eta)
    }
}

/// `iota_N(eta)_i = eta_i / N`.
pub fn embed(eta: &[u64]) -> Vec<f64> {
    let n: u64 = eta.iter().sum();
    assert!(n > 0, "cannot embed an empty configuration");
    eta.iter().map(|&k| k as f64 / n as f64).collect()
}

pub(crate) fn check_simplex_point(x: &[f64]) -> Result<()> {
    if x.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Invalid("simplex point has a negative or non-finite coordinate".into()));
    }
    let s: f64 = x.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("simplex point sums to {s}, not 1")));
    }
    Ok(())
}

/// Sampled trajectory of the rescaled process.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZrpPath {
    pub n: u64,
    pub sample_times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub seed: u64,
    pub replica: u64,
    pub events: u64,
}

/// Inputs shared by every replica of a run.
#[derive(Debug, Clone)]
pub struct ZrpRun<'a> {
    pub chain: &'a ChainModel,
    pub rates: &'a JumpRateFamily,
    pub eta0: &'a ZrpState,
    /// Rescaled horizon `T`.
    pub horizon: f64,
    /// Rescaled sample times in `[0, T]`, increasing.
    pub grid: &'a [f64],
    pub max_events: u64,
}

impl ZrpRun<'_> {
    fn validate(&self) -> Result<()> {
        if self.eta0.eta.len() != self.chain.p() {
            return Err(Error::Invalid("configuration length differs from the site count".into()));
        }
        if self.eta0.n() == 0 {
            return Err(Error::EmptyConfig);
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Invalid(format!("horizon {} must be positive", self.horizon)));
        }
        validate_grid(self.grid, self.horizon)
    }
}

pub(crate) fn validate_grid(grid: &[f64], horizon: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Invalid("sample grid is empty".into()));
    }
    if grid.iter().any(|&t| !(t >= 0.0) || t > horizon) {
        return Err(Error::Invalid("sample grid must lie within [0, T]".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("sample grid must be strictly increasing".into()));
    }
    Ok(())
}

/// One replica by the direct Gillespie method on the unscaled clock, which
/// runs `N^2` times faster than the rescaled one.
pub fn simulate_zrp(run: &ZrpRun<'_>, seed: u64, replica: u64) -> Result<ZrpPath> {
    run.validate()?;
    let chain = run.chain;
    let p = chain.p();
    let n = run.eta0.n();
    let scale = (n as f64) * (n as f64);
    let mut rng = rng::stream(seed, domain::ZRP, replica);

    // jump target tables: cumulative r(i, .) / lambda_i
    let targets: Vec<Vec<f64>> = (0..p)
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
    let pick = |row: &[f64], u: f64| -> usize {
        row.iter()
            .position(|&c| u < c)
            .unwrap_or_else(|| row.iter().rposition(|&c| c > 0.0).unwrap_or(row.len() - 1))
    };

    let mut eta = run.eta0.eta.clone();
    let site_rate = |i: usize, k: u64| -> f64 {
        if k == 0 {
            0.0
        } else {
            run.rates.g(i, k) * chain.lambda[i]
        }
    };
    let mut w: Vec<f64> = (0..p).map(|i| site_rate(i, eta[i])).collect();

    let t_end = run.horizon * scale;
    let mut t = 0.0f64;
    let mut next_sample = 0usize;
    let mut points = Vec::with_capacity(run.grid.len());
    let mut events = 0u64;

    loop {
        let total: f64 = w.iter().sum();
        let e: f64 = rng.sample(Exp1);
        let t_next = t + e / total;
        while next_sample < run.grid.len() && run.grid[next_sample] * scale < t_next {
            points.push(embed(&eta));
            next_sample += 1;
        }
        if next_sample == run.grid.len() || t_next > t_end {
            break;
        }
        events += 1;
        if events > run.max_events {
            return Err(Error::HorizonOverflow(run.max_events));
        }
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut from = p;
        for (i, &wi) in w.iter().enumerate() {
            acc += wi;
            if u < acc && wi > 0.0 {
                from = i;
                break;
            }
        }
        if from == p {
            from = (0..p).rev().find(|&i| w[i] > 0.0).expect("some site is occupied");
        }
        let to = pick(&targets[from], rng.random());
        eta[from] -= 1;
        eta[to] += 1;
        w[from] = site_rate(from, eta[from]);
        w[to] = site_rate(to, eta[to]);
        t = t_next;
    }
    Ok(ZrpPath { n, sample_times: run.grid.to_vec(), points, seed, replica, events })
}

/// `replicas` independent paths, replica `k` on stream `k` of `seed`.
pub fn simulate_zrp_ensemble(run: &ZrpRun<'_>, replicas: u64, seed: u64) -> Result<Vec<ZrpPath>> {
    (0..replicas).into_par_iter().map(|k| simulate_zrp(run, seed, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use approx::assert_abs_diff_eq;

    #[test]
    fn default_family_values() {
        let c = corpus::complete(3, 1.0);
        let g = default_rates(&c);
        assert_abs_diff_eq!(g.g(0, 1), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(g.g(2, 0), 0.0);
        for n in [1u64, 10, 1000, 1 << 40] {
            let lhs = n as f64 * (g.g(1, n) / c.m[1] - 1.0);
            assert_abs_diff_eq!(lhs, 1.0, epsilon = 1e-9 * n as f64);
        }
    }

    #[test]
    fn table_family_validation() {
        let c = corpus::complete(2, 1.0);
        let pol = NumericPolicy::default();
        let good = vec![vec![0.0, 1.0, 0.75], vec![0.0, 1.0, 0.75]];
        let fam = JumpRateFamily::table(&c, good, &pol).unwrap();
        assert_eq!(fam.tail_residuals(), vec![Some(0.0), Some(0.0)]);
        assert_abs_diff_eq!(fam.g(0, 4), 0.5 * 1.25, epsilon = 1e-15);
        assert!(JumpRateFamily::table(&c, vec![vec![0.1, 1.0], vec![0.0, 1.0]], &pol).is_err());
        assert!(JumpRateFamily::table(&c, vec![vec![0.0, 0.0], vec![0.0, 1.0]], &pol).is_err());
        assert!(JumpRateFamily::table(&c, vec![vec![0.0, 5.0], vec![0.0, 1.0]], &pol).is_err());
    }

    #[test]
    fn embed_examples() {
        assert_eq!(embed(&[2, 1, 1]), vec![0.5, 0.25, 0.25]);
        assert_eq!(embed(&[0, 7, 0]), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn largest_remainder_rounding() {
        let s = ZrpState::from_simplex(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 50).unwrap();
        assert_eq!(s.eta, vec![17, 17, 16]);
        assert_eq!(ZrpState::from_simplex(&[0.0, 1.0], 9).unwrap().eta, vec![0, 9]);
        assert_eq!(ZrpState::from_simplex(&[0.5, 0.5], 0), Err(Error::EmptyConfig));
        assert_eq!(ZrpState::new(vec![0, 0]), Err(Error::EmptyConfig));
    }

    fn run_cfg<'a>(
        c: &'a ChainModel,
        g: &'a JumpRateFamily,
        eta0: &'a ZrpState,
        grid: &'a [f64],
        horizon: f64,
    ) -> ZrpRun<'a> {
        ZrpRun { chain: c, rates: g, eta0, horizon, grid, max_events: u64::MAX }
    }

    #[test]
    fn starts_at_the_embedded_configuration() {
        let c = corpus::complete(3, 1.0);
        let g = default_rates(&c);
        let eta0 = ZrpState::new(vec![0, 40, 0]).unwrap();
        let grid = [0.0, 0.05, 0.1];
        let path = simulate_zrp(&run_cfg(&c, &g, &eta0, &grid, 0.1), 3, 0).unwrap();
        assert_eq!(path.points[0], vec![0.0, 1.0, 0.0]);
        for x in &path.points {
            assert_abs_diff_eq!(x.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            for xi in x {
                assert_eq!((xi * 40.0).round(), xi * 40.0);
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let c = corpus::random_chain(4, 1.0, 2);
        let g = default_rates(&c);
        let eta0 = ZrpState::from_simplex(&[0.25; 4], 30).unwrap();
        let grid: Vec<f64> = (0..=10).map(|k| k as f64 * 0.02).collect();
        let cfg = run_cfg(&c, &g, &eta0, &grid, 0.2);
        let a = simulate_zrp(&cfg, 42, 7).unwrap();
        let b = simulate_zrp(&cfg, 42, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, simulate_zrp(&cfg, 42, 8).unwrap());
    }

    #[test]
    fn event_cap_is_enforced() {
        let c = corpus::complete(3, 1.0);
        let g = default_rates(&c);
        let eta0 = ZrpState::from_simplex(&[0.4, 0.3, 0.3], 100).unwrap();
        let grid = [0.0, 1.0];
        let mut cfg = run_cfg(&c, &g, &eta0, &grid, 1.0);
        cfg.max_events = 1000;
        assert_eq!(simulate_zrp(&cfg, 1, 0), Err(Error::HorizonOverflow(1000)));
    }

    #[test]
    fn event_count_scales_with_n_squared() {
        let c = corpus::complete(3, 1.0);
        let g = default_rates(&c);
        let mean_rate: f64 = (0..3).map(|i| c.m[i] * c.lambda[i]).sum();
        for n in [20u64, 80] {
            let eta0 = ZrpState::from_simplex(&[0.4, 0.3, 0.3], n).unwrap();
            let grid = [0.0, 0.2];
            let path = simulate_zrp(&run_cfg(&c, &g, &eta0, &grid, 0.2), 5, 0).unwrap();
            let expected = (n * n) as f64 * 0.2 * mean_rate;
            let ratio = path.events as f64 / expected;
            assert!(ratio > 0.1 && ratio < 10.0, "n={n} ratio={ratio}");
        }
    }

    #[test]
    fn single_particle_matches_occupation_oracle() {
        // One particle jumps i -> j at rate g_i(1) r(i,j); its stationary law
        // is that of the chain with those rates, computed independently here.
        let c = ChainModel::from_rows(&[vec![0.0, 2.0], vec![1.0, 0.0]], 1.0).unwrap();
        let g = default_rates(&c);
        let walk = ChainModel::from_rows(
            &[vec![0.0, g.g(0, 1) * 2.0], vec![g.g(1, 1) * 1.0, 0.0]],
            1.0,
        )
        .unwrap();
        let eta0 = ZrpState::new(vec![1, 0]).unwrap();
        let grid = [20.0];
        let cfg = run_cfg(&c, &g, &eta0, &grid, 20.0);
        let paths = simulate_zrp_ensemble(&cfg, 4000, 77).unwrap();
        let frac = paths.iter().filter(|p| p.points[0][0] == 1.0).count() as f64 / 4000.0;
        let se = (walk.m[0] * (1.0 - walk.m[0]) / 4000.0).sqrt();
        assert!((frac - walk.m[0]).abs() < 3.0 * se, "frac={frac} oracle={}", walk.m[0]);
    }

    #[test]
    fn invalid_grid_rejected() {
        let c = corpus::complete(3, 1.0);
        let g = default_rates(&c);
        let eta0 = ZrpState::new(vec![1, 1, 1]).unwrap();
        let grid = [0.0, 2.0];
        assert!(simulate_zrp(&run_cfg(&c, &g, &eta0, &grid, 1.0), 1, 0).is_err());
        let grid = [0.5, 0.2];
        assert!(simulate_zrp(&run_cfg(&c, &g, &eta0, &grid, 1.0), 1, 0).is_err());
    }
}
