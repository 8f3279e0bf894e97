//! Statistical comparison of particle and diffusion ensembles, absorption-time
//! statistics, martingale residuals and support checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::ChainModel;
use crate::diffusion::{
    self, best_absorption_bound, face_dynamics, vertex_time_envelope, AbsorptionRecord, DiffusionControls,
    DiffusionPath, DiffusionRun, FaceCache,
};
use crate::error::{Error, Result};
use crate::functions::SmoothFunction;
use crate::rng::{self, domain};
use crate::sites::SiteSet;
use crate::zrp::ZrpPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleKind {
    Zrp,
    Diffusion,
}

/// Sampled trajectories on a shared time grid: `paths[replica][time][site]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub kind: EnsembleKind,
    /// Particle count for particle ensembles.
    pub n: Option<u64>,
    pub seed: u64,
    pub times: Vec<f64>,
    pub paths: Vec<Vec<Vec<f64>>>,
}

impl Ensemble {
    pub fn from_zrp(paths: &[ZrpPath]) -> Result<Self> {
        let first = paths.first().ok_or(Error::TooFewReplicas { got: 0, need: 1 })?;
        Ok(Ensemble {
            kind: EnsembleKind::Zrp,
            n: Some(first.n),
            seed: first.seed,
            times: first.sample_times.clone(),
            paths: paths.iter().map(|p| p.points.clone()).collect(),
        })
    }

    pub fn from_diffusion(paths: &[DiffusionPath]) -> Result<Self> {
        let first = paths.first().ok_or(Error::TooFewReplicas { got: 0, need: 1 })?;
        Ok(Ensemble {
            kind: EnsembleKind::Diffusion,
            n: None,
            seed: first.seed,
            times: first.sample_times.clone(),
            paths: paths.iter().map(|p| p.points.clone()).collect(),
        })
    }

    pub fn replicas(&self) -> usize {
        self.paths.len()
    }

    pub fn p(&self) -> usize {
        self.paths.first().and_then(|p| p.first()).map_or(0, |x| x.len())
    }

    /// Index of the sample time equal to `t` up to `1e-9`.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        self.times.iter().position(|&s| (s - t).abs() <= 1e-9).ok_or(Error::MismatchedCheckpoints)
    }

    /// Values of coordinate `site` at time index `k`, one per replica.
    pub fn coordinate(&self, k: usize, site: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p[k][site]).collect()
    }

    pub fn marginal(&self, k: usize) -> Vec<Vec<f64>> {
        self.paths.iter().map(|p| p[k].clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// distances

/// Exact Wasserstein-1 distance between two empirical laws on the line,
/// `int |F_a - F_b|`, for samples of any sizes.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    let merged = MergedLine::new(a, b);
    let wa = vec![1.0; a.len()];
    let wb = vec![1.0; b.len()];
    merged.distance(&wa, &wb)
}

/// Both samples sorted together, remembering which sample and which index
/// each point came from, so reweighted distances cost `O(n + m)`.
struct MergedLine {
    values: Vec<f64>,
    /// `(from_a, original index)`.
    origin: Vec<(bool, usize)>,
}

impl MergedLine {
    fn new(a: &[f64], b: &[f64]) -> Self {
        let mut all: Vec<(f64, bool, usize)> = a
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, true, i))
            .chain(b.iter().enumerate().map(|(i, &v)| (v, false, i)))
            .collect();
        all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        MergedLine { values: all.iter().map(|e| e.0).collect(), origin: all.iter().map(|e| (e.1, e.2)).collect() }
    }

    fn distance(&self, wa: &[f64], wb: &[f64]) -> f64 {
        let ta: f64 = wa.iter().sum();
        let tb: f64 = wb.iter().sum();
        let (mut fa, mut fb, mut acc) = (0.0, 0.0, 0.0);
        for k in 0..self.values.len() {
            let (from_a, i) = self.origin[k];
            if from_a {
                fa += wa[i] / ta;
            } else {
                fb += wb[i] / tb;
            }
            if k + 1 < self.values.len() {
                acc += (fa - fb).abs() * (self.values[k + 1] - self.values[k]);
            }
        }
        acc
    }
}

fn euclid(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn distance_matrix(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), ys.len(), |i, j| euclid(&xs[i], &ys[j]))
}

/// Energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` between two samples of
/// points in `R^p`.
pub fn energy_distance(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let mean = |d: DMatrix<f64>| d.sum() / (d.nrows() * d.ncols()) as f64;
    let cross = mean(distance_matrix(xs, ys));
    (2.0 * cross - mean(distance_matrix(xs, xs)) - mean(distance_matrix(ys, ys))).max(0.0)
}

/// Linear-interpolation quantile of a sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// A point estimate and a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    /// 95% quantile of the statistic under resampling from the pooled sample.
    pub null_q95: f64,
}

impl Estimate {
    /// Basic bootstrap interval `[2t - q_hi, 2t - q_lo]`, widened to contain
    /// the estimate, clipped at zero, and extended down to zero whenever the
    /// pooled resampling test does not reject equal laws at level 5%.
    fn build(value: f64, mut boot: Vec<f64>, mut null: Vec<f64>) -> Self {
        boot.sort_by(f64::total_cmp);
        null.sort_by(f64::total_cmp);
        let null_q95 = quantile(&null, 0.95);
        let mut lo = (2.0 * value - quantile(&boot, 0.975)).min(value).max(0.0);
        let hi = (2.0 * value - quantile(&boot, 0.025)).max(value);
        if value <= null_q95 {
            lo = 0.0;
        }
        Estimate { value, lo, hi, null_q95 }
    }
}

/// Draws multiplicities of a resample of size `n` from `pool` items.
fn resample_counts<R: Rng>(rng: &mut R, pool: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; pool];
    for _ in 0..n {
        c[rng.random_range(0..pool)] += 1.0;
    }
    c
}

/// `int |F_a - F_b|` for two weightings of the same sorted points.
fn w1_shared_support(sorted: &[f64], order: &[usize], wa: &[f64], wb: &[f64]) -> f64 {
    let ta: f64 = wa.iter().sum();
    let tb: f64 = wb.iter().sum();
    let (mut fa, mut fb, mut acc) = (0.0, 0.0, 0.0);
    for k in 0..sorted.len() {
        fa += wa[order[k]] / ta;
        fb += wb[order[k]] / tb;
        if k + 1 < sorted.len() {
            acc += (fa - fb).abs() * (sorted[k + 1] - sorted[k]);
        }
    }
    acc
}

/// Distances between two marginals: per-coordinate `W_1` and the energy
/// distance, each with bootstrap intervals from `resamples` joint resamples
/// and a pooled-resampling null quantile.
pub fn marginal_distances(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    resamples: usize,
    seed: u64,
    key: u64,
) -> (Vec<Estimate>, Estimate) {
    let p = xs[0].len();
    let (n, m) = (xs.len(), ys.len());
    let lines: Vec<MergedLine> = (0..p)
        .map(|s| {
            let a: Vec<f64> = xs.iter().map(|x| x[s]).collect();
            let b: Vec<f64> = ys.iter().map(|y| y[s]).collect();
            MergedLine::new(&a, &b)
        })
        .collect();
    let pooled: Vec<Vec<f64>> = xs.iter().chain(ys).cloned().collect();
    let pooled_lines: Vec<(Vec<f64>, Vec<usize>)> = (0..p)
        .map(|s| {
            let mut order: Vec<usize> = (0..n + m).collect();
            order.sort_by(|&i, &j| pooled[i][s].total_cmp(&pooled[j][s]).then(i.cmp(&j)));
            (order.iter().map(|&i| pooled[i][s]).collect(), order)
        })
        .collect();
    let dpp = distance_matrix(&pooled, &pooled);
    // energy distance of two weightings of the pooled points: -(a - b)^T D (a - b)
    let energy_of = |wa: &[f64], wb: &[f64]| -> f64 {
        let ta: f64 = wa.iter().sum();
        let tb: f64 = wb.iter().sum();
        let v = DVector::from_iterator(n + m, wa.iter().zip(wb).map(|(a, b)| a / ta - b / tb));
        (-v.dot(&(&dpp * &v))).max(0.0)
    };
    let w1: Vec<f64> = lines.iter().map(|l| l.distance(&vec![1.0; n], &vec![1.0; m])).collect();
    let energy = energy_distance(xs, ys);
    let boot: Vec<(Vec<f64>, f64, Vec<f64>, f64)> = (0..resamples as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, domain::BOOTSTRAP, (key << 32) | r);
            let cx = resample_counts(&mut rng, n, n);
            let cy = resample_counts(&mut rng, m, m);
            let w: Vec<f64> = lines.iter().map(|l| l.distance(&cx, &cy)).collect();
            let mut wa = cx.clone();
            wa.resize(n + m, 0.0);
            let mut wb = vec![0.0; n];
            wb.extend_from_slice(&cy);
            let e = energy_of(&wa, &wb);
            let na = resample_counts(&mut rng, n + m, n);
            let nb = resample_counts(&mut rng, n + m, m);
            let w0: Vec<f64> = pooled_lines.iter().map(|(v, o)| w1_shared_support(v, o, &na, &nb)).collect();
            let e0 = energy_of(&na, &nb);
            (w, e, w0, e0)
        })
        .collect();
    let w1_est = (0..p)
        .map(|s| Estimate::build(w1[s], boot.iter().map(|b| b.0[s]).collect(), boot.iter().map(|b| b.2[s]).collect()))
        .collect();
    let energy_est = Estimate::build(energy, boot.iter().map(|b| b.1).collect(), boot.iter().map(|b| b.3).collect());
    (w1_est, energy_est)
}

// ---------------------------------------------------------------------------
// law comparison

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareOptions {
    pub resamples: usize,
    pub seed: u64,
    pub min_replicas: usize,
    /// Required bound on every per-coordinate distance at the largest `N`.
    pub threshold: Option<f64>,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions { resamples: 1000, seed: 0, min_replicas: 200, threshold: Some(0.05) }
    }
}

/// Distances of one particle ensemble to the diffusion ensemble at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDistances {
    pub time: f64,
    pub n: u64,
    pub replicas: usize,
    pub w1: Vec<Estimate>,
    pub energy: Estimate,
}

/// Verdict at one checkpoint. A sequence is decreasing when point estimates
/// fall strictly with `N`, and separated when the intervals of the smallest
/// and largest `N` are disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointVerdict {
    pub time: f64,
    pub w1_decreasing: Vec<bool>,
    pub w1_separated: Vec<bool>,
    pub energy_decreasing: bool,
    pub energy_separated: bool,
    /// Every coordinate decreasing and separated.
    pub converging: bool,
    pub below_threshold: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub resamples: usize,
    pub ns: Vec<u64>,
    pub diffusion_replicas: usize,
    pub checkpoints: Vec<f64>,
    pub threshold: Option<f64>,
    pub distances: Vec<CheckpointDistances>,
    pub verdicts: Vec<CheckpointVerdict>,
    pub converging: bool,
    pub threshold_met: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absorption: Option<AbsorptionSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dynkin: Vec<DynkinResult>,
}

fn decreasing_and_separated(seq: &[Estimate]) -> (bool, bool) {
    let decreasing = seq.windows(2).all(|w| w[1].value < w[0].value);
    let separated = match (seq.first(), seq.last()) {
        (Some(a), Some(z)) if seq.len() >= 2 => z.hi < a.lo,
        _ => false,
    };
    (decreasing, separated)
}

/// Compares particle ensembles at several `N` with one diffusion ensemble
/// at common checkpoint times.
pub fn compare_laws(
    zrp: &[Ensemble],
    diff: &Ensemble,
    checkpoints: &[f64],
    opts: &CompareOptions,
) -> Result<ComparisonReport> {
    if checkpoints.is_empty() {
        return Err(Error::MismatchedCheckpoints);
    }
    if opts.resamples < 1 {
        return Err(Error::Invalid("at least one bootstrap resample is required".into()));
    }
    let mut by_n: Vec<&Ensemble> = zrp.iter().collect();
    by_n.sort_by_key(|e| e.n.unwrap_or(0));
    for e in by_n.iter().copied().chain(std::iter::once(diff)) {
        if e.replicas() < opts.min_replicas {
            return Err(Error::TooFewReplicas { got: e.replicas(), need: opts.min_replicas });
        }
        if e.p() != diff.p() {
            return Err(Error::Invalid("ensembles have different site counts".into()));
        }
    }
    let mut distances = Vec::new();
    let mut verdicts = Vec::new();
    for (ci, &t) in checkpoints.iter().enumerate() {
        let ys = diff.marginal(diff.time_index(t)?);
        let mut row: Vec<CheckpointDistances> = Vec::new();
        for (ni, e) in by_n.iter().enumerate() {
            let xs = e.marginal(e.time_index(t)?);
            let key = ((ci as u64) << 16) | ni as u64;
            let (w1, energy) = marginal_distances(&xs, &ys, opts.resamples, opts.seed, key);
            row.push(CheckpointDistances { time: t, n: e.n.unwrap_or(0), replicas: e.replicas(), w1, energy });
        }
        let p = diff.p();
        let mut w1_decreasing = Vec::new();
        let mut w1_separated = Vec::new();
        for s in 0..p {
            let seq: Vec<Estimate> = row.iter().map(|r| r.w1[s]).collect();
            let (d, sep) = decreasing_and_separated(&seq);
            w1_decreasing.push(d);
            w1_separated.push(sep);
        }
        let (energy_decreasing, energy_separated) =
            decreasing_and_separated(&row.iter().map(|r| r.energy).collect::<Vec<_>>());
        let below_threshold =
            opts.threshold.map(|th| row.last().is_some_and(|r| r.w1.iter().all(|w| w.value < th)));
        verdicts.push(CheckpointVerdict {
            time: t,
            converging: w1_decreasing.iter().chain(&w1_separated).all(|&b| b),
            w1_decreasing,
            w1_separated,
            energy_decreasing,
            energy_separated,
            below_threshold,
        });
        distances.extend(row);
    }
    let converging = verdicts.iter().all(|v| v.converging);
    let threshold_met = opts.threshold.map(|_| verdicts.iter().all(|v| v.below_threshold == Some(true)));
    Ok(ComparisonReport {
        seed: opts.seed,
        resamples: opts.resamples,
        ns: by_n.iter().map(|e| e.n.unwrap_or(0)).collect(),
        diffusion_replicas: diff.replicas(),
        checkpoints: checkpoints.to_vec(),
        threshold: opts.threshold,
        distances,
        verdicts,
        converging,
        threshold_met,
        absorption: None,
        dynkin: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// absorption times

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub q: f64,
    pub bound: f64,
    /// `bound - mean`.
    pub margin: f64,
    /// Mean exceeds the bound by more than three standard errors.
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionSummary {
    pub paths: usize,
    pub start_face: SiteSet,
    /// Fraction of paths with a first absorption before the horizon.
    pub fraction_absorbed: f64,
    pub fraction_vertex: f64,
    /// Statistics of the first absorption time over absorbed paths.
    pub mean_sigma1: f64,
    pub se_sigma1: f64,
    pub quantiles_sigma1: Vec<(f64, f64)>,
    pub bound: Option<BoundCheck>,
    pub mean_vertex_time: Option<f64>,
    /// Sum over face sizes of the worst per-face bound; a heuristic only.
    pub vertex_envelope: Option<f64>,
    /// Fraction of absorption events that removed several coordinates at once.
    pub multi_drop_frequency: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn absorption_stats(records: &[AbsorptionRecord], chain: &ChainModel, q_grid: &[f64]) -> Result<AbsorptionSummary> {
    let first = records.first().ok_or(Error::TooFewReplicas { got: 0, need: 1 })?;
    let start_face = first.faces[0];
    if records.iter().any(|r| r.faces[0] != start_face) {
        return Err(Error::Invalid("records start on different faces".into()));
    }
    let n = records.len() as f64;
    let mut sigma1: Vec<f64> = records.iter().filter_map(|r| r.first_absorption()).collect();
    let fraction_absorbed = sigma1.len() as f64 / n;
    let (mean_sigma1, se_sigma1) = if sigma1.is_empty() { (f64::NAN, f64::NAN) } else { mean_se(&sigma1) };
    sigma1.sort_by(f64::total_cmp);
    let quantiles_sigma1 = [0.1, 0.5, 0.9].iter().map(|&q| (q, quantile(&sigma1, q))).collect();
    let vertex_times: Vec<f64> = records.iter().filter_map(|r| r.vertex_time()).collect();
    let fraction_vertex = vertex_times.len() as f64 / n;
    let mean_vertex_time = (!vertex_times.is_empty()).then(|| mean_se(&vertex_times).0);
    let (bound, vertex_envelope) = if start_face.len() >= 2 {
        let (q, value) = best_absorption_bound(start_face, chain, q_grid)?;
        let check = BoundCheck {
            q,
            bound: value,
            margin: value - mean_sigma1,
            violation: mean_sigma1 > value + 3.0 * se_sigma1,
        };
        (Some(check), Some(vertex_time_envelope(start_face, chain, q_grid)?))
    } else {
        (None, None)
    };
    let events: usize = records.iter().map(|r| r.faces.len() - 1).sum();
    let multi: usize = records.iter().map(|r| r.multi_drops()).sum();
    Ok(AbsorptionSummary {
        paths: records.len(),
        start_face,
        fraction_absorbed,
        fraction_vertex,
        mean_sigma1,
        se_sigma1,
        quantiles_sigma1,
        bound,
        mean_vertex_time,
        vertex_envelope,
        multi_drop_frequency: if events == 0 { 0.0 } else { multi as f64 / events as f64 },
    })
}

// ---------------------------------------------------------------------------
// Dynkin residual

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynkinResult {
    pub label: String,
    pub delta: f64,
    pub time: f64,
    pub paths: usize,
    /// Paths stopped before `time`.
    pub stopped: usize,
    pub mean: f64,
    pub se: f64,
    /// 99% normal interval.
    pub lo: f64,
    pub hi: f64,
    pub contains_zero: bool,
}

/// Monte Carlo mean of `F(X_{t ^ tau}) - F(X_0) - int_0^{t ^ tau} LF(X_s) ds`,
/// where `tau` is the first sample time with `min_i x_i < delta`. The
/// integral uses the trapezoid rule between samples inside the region and
/// the left endpoint on the interval that leaves it.
pub fn dynkin_residual(
    ens: &Ensemble,
    chain: &ChainModel,
    f: &dyn SmoothFunction,
    label: &str,
    delta: f64,
    t: f64,
) -> Result<DynkinResult> {
    let kt = ens.time_index(t)?;
    let p = chain.p();
    if ens.p() != p {
        return Err(Error::Invalid("ensemble and chain have different site counts".into()));
    }
    let full = face_dynamics(chain, SiteSet::full(p))?;
    let inside = |x: &[f64]| x.iter().all(|&v| v >= delta);
    let per_path: Vec<(f64, bool)> = ens
        .paths
        .par_iter()
        .map(|path| -> Result<(f64, bool)> {
            if !inside(&path[0]) {
                return Ok((0.0, true));
            }
            let mut integral = 0.0;
            let mut lf_prev = full.generator(&chain.m, f, &path[0])?;
            let mut stop = kt;
            for k in 1..=kt {
                let dt = ens.times[k] - ens.times[k - 1];
                if inside(&path[k]) {
                    let lf = full.generator(&chain.m, f, &path[k])?;
                    integral += 0.5 * (lf_prev + lf) * dt;
                    lf_prev = lf;
                } else {
                    integral += lf_prev * dt;
                    stop = k;
                    break;
                }
            }
            Ok((f.value(&path[stop]) - f.value(&path[0]) - integral, stop < kt || !inside(&path[kt])))
        })
        .collect::<Result<_>>()?;
    let vals: Vec<f64> = per_path.iter().map(|v| v.0).collect();
    let (mean, se) = mean_se(&vals);
    let (lo, hi) = (mean - 2.576 * se, mean + 2.576 * se);
    Ok(DynkinResult {
        label: label.to_string(),
        delta,
        time: t,
        paths: vals.len(),
        stopped: per_path.iter().filter(|v| v.1).count(),
        mean,
        se,
        lo,
        hi,
        contains_zero: lo <= 0.0 && 0.0 <= hi,
    })
}

// ---------------------------------------------------------------------------
// support monotonicity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    pub kind: EnsembleKind,
    pub paths: usize,
    /// Paths on which some later sample has a site outside an earlier support.
    pub violating_paths: usize,
    /// Consecutive sample pairs whose support grew, over all pairs.
    pub revival_frequency: f64,
    /// Asserted for diffusion ensembles only.
    pub passed: Option<bool>,
}

pub fn support_monotonicity_check(ens: &Ensemble) -> SupportReport {
    let mut violating = 0;
    let mut revivals = 0usize;
    let mut pairs = 0usize;
    for path in &ens.paths {
        let supports: Vec<SiteSet> = path.iter().map(|x| SiteSet::support(x)).collect();
        let mut bad = false;
        let mut running = supports.first().copied().unwrap_or_default();
        for w in supports.windows(2) {
            pairs += 1;
            if !w[1].is_subset(w[0]) {
                revivals += 1;
            }
            if !w[1].is_subset(running) {
                bad = true;
            }
            running = running.intersection(w[1]);
        }
        if bad {
            violating += 1;
        }
    }
    SupportReport {
        kind: ens.kind,
        paths: ens.paths.len(),
        violating_paths: violating,
        revival_frequency: if pairs == 0 { 0.0 } else { revivals as f64 / pairs as f64 },
        passed: (ens.kind == EnsembleKind::Diffusion).then_some(violating == 0),
    }
}

// ---------------------------------------------------------------------------
// weak continuity in the starting point

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FellerRow {
    pub h: f64,
    pub start: Vec<f64>,
    /// Largest per-coordinate `W_1` at the test time.
    pub distance: f64,
    /// Perturbed start leaves the support face of `x0`.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FellerReport {
    pub time: f64,
    pub replicas: u64,
    pub seed: u64,
    pub rows: Vec<FellerRow>,
    /// Distances of the included rows decrease strictly as `h` shrinks.
    pub monotone: bool,
}

/// Runs ensembles from `x0` and from `x0 + h dir` on common random numbers
/// and reports the marginal distance at `t` for each `h`.
#[allow(clippy::too_many_arguments)]
pub fn feller_smoke_test(
    chain: &ChainModel,
    x0: &[f64],
    dir: &[f64],
    h_ladder: &[f64],
    t: f64,
    replicas: u64,
    seed: u64,
    controls: DiffusionControls,
) -> Result<FellerReport> {
    let p = chain.p();
    if x0.len() != p || dir.len() != p {
        return Err(Error::Invalid("start and direction must have one entry per site".into()));
    }
    if dir.iter().sum::<f64>().abs() > 1e-12 {
        return Err(Error::Invalid("perturbation direction must sum to zero".into()));
    }
    let faces = FaceCache::new(chain, SiteSet::full(p))?;
    let grid = [0.0, t];
    let run_from = |x: &[f64]| -> Result<Ensemble> {
        let run = DiffusionRun { chain, faces: &faces, x0: x, horizon: t, grid: &grid, controls };
        Ensemble::from_diffusion(&diffusion::simulate_diffusion_ensemble(&run, replicas, seed)?)
    };
    let base = run_from(x0)?;
    let base_marg = base.marginal(1);
    let support = SiteSet::support(x0);
    let mut rows = Vec::new();
    for &h in h_ladder {
        let start: Vec<f64> = x0.iter().zip(dir).map(|(a, d)| a + h * d).collect();
        let excluded = start.iter().any(|&v| v < 0.0) || SiteSet::support(&start) != support;
        let distance = if excluded {
            f64::NAN
        } else {
            let other = run_from(&start)?;
            let marg = other.marginal(1);
            (0..p)
                .map(|s| {
                    let a: Vec<f64> = base_marg.iter().map(|x| x[s]).collect();
                    let b: Vec<f64> = marg.iter().map(|x| x[s]).collect();
                    wasserstein1(&a, &b)
                })
                .fold(0.0, f64::max)
        };
        rows.push(FellerRow { h, start, distance, excluded });
    }
    let mut included: Vec<&FellerRow> = rows.iter().filter(|r| !r.excluded).collect();
    included.sort_by(|a, b| b.h.total_cmp(&a.h));
    let monotone = included.windows(2).all(|w| w[1].distance < w[0].distance || w[1].h == 0.0 && w[1].distance == 0.0);
    Ok(FellerReport { time: t, replicas, seed, rows, monotone })
}
