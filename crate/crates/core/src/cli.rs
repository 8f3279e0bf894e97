//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::chain::ChainModel;
use crate::diffusion::{self, DiffusionControls, DiffusionRun, FaceCache};
use crate::error::{Error, Result};
use crate::harness::{self, CompareOptions, Ensemble};
use crate::io;
use crate::policy::NumericPolicy;
use crate::sites::SiteSet;
use crate::superharmonic::{self, SupharmSpec};
use crate::trace;
use crate::zrp::{self, JumpRateFamily, ZrpRun, ZrpState};

#[derive(Debug, Parser)]
#[command(name = "zrp-simplex", version, about = "Condensing zero-range processes and their simplex diffusion limit")]
pub struct Cli {
    /// JSON file overriding numeric tolerances.
    #[arg(long, global = true, value_name = "FILE")]
    pub numeric_policy: Option<PathBuf>,
    /// Worker threads for replica-level parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Equilibrium potentials, trace rates and the projection for a face.
    TraceRates {
        #[arg(long)]
        chain: PathBuf,
        /// Sites of the face, 1-based, comma-separated.
        #[arg(long)]
        face: String,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rescaled zero-range trajectories on a sample grid.
    SimulateZrp {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        t: f64,
        /// `start:step:end` or a comma-separated list of times.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        replicas: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Starting point on the simplex (default: uniform).
        #[arg(long)]
        x0: Option<String>,
        /// JSON table `[[g_1(0), g_1(1), ...], ...]` replacing the default jump rates.
        #[arg(long)]
        rates_table: Option<PathBuf>,
        #[arg(long, default_value_t = 2_000_000_000)]
        max_events: u64,
    },
    /// Absorbed diffusion paths and their absorption records.
    SimulateDiffusion {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        x0: String,
        #[arg(long)]
        t: f64,
        /// Base time step.
        #[arg(long, default_value_t = 1e-4)]
        dt: f64,
        #[arg(long, default_value_t = 1e-4)]
        eps_abs: f64,
        #[arg(long, default_value_t = 0.1)]
        x_ref: f64,
        #[arg(long, default_value_t = 1e-14)]
        dt_floor: f64,
        #[arg(long)]
        replicas: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Sample grid (default: 101 equally spaced times on `[0, T]`).
        #[arg(long)]
        grid: Option<String>,
        /// Absorption records (default: `absorptions.csv` next to `--out`).
        #[arg(long)]
        absorptions: Option<PathBuf>,
    },
    /// Grid check of the sign of the generator on `F_A` near a face.
    VerifySuperharmonic {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        d: String,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        grid_density: usize,
        /// Use this `lambda` instead of the computed one.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
    },
    /// Distances between particle ensembles and a diffusion ensemble.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        zrp: Vec<PathBuf>,
        #[arg(long)]
        diff: PathBuf,
        #[arg(long)]
        checkpoints: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        min_replicas: usize,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        /// Adds absorption statistics when given with `--absorptions`.
        #[arg(long, requires = "absorptions")]
        chain: Option<PathBuf>,
        #[arg(long, requires = "chain")]
        absorptions: Option<PathBuf>,
        #[arg(long)]
        q_grid: Option<String>,
    },
    /// First-absorption statistics against the analytic bound.
    AbsorptionStats {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        absorptions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Values of `q` tried in the bound (default: `b + 0.05 k`, `k = 1..100`).
        #[arg(long)]
        q_grid: Option<String>,
    },
}

/// Outcome of a successful run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ContractViolation,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 on usage or validation errors,
/// 2 when a verification fails.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::ContractViolation) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let policy = match &cli.numeric_policy {
        Some(path) => io::read_json::<NumericPolicy>(path)?,
        None => NumericPolicy::default(),
    };
    match cli.threads {
        Some(0) => Err(Error::Invalid("--threads must be positive".into())),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Invalid(e.to_string()))?
            .install(|| run(&cli.command, &policy)),
        None => run(&cli.command, &policy),
    }
}

#[derive(Serialize)]
struct TraceReport {
    face: SiteSet,
    /// Row `k` is `u^B_k` over all sites, for `k` in the face.
    u: Vec<Vec<f64>>,
    #[serde(rename = "rB")]
    r_b: Vec<Vec<f64>>,
    #[serde(rename = "lambdaB")]
    lambda_b: Vec<f64>,
    gamma: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn default_q_grid(chain: &ChainModel) -> Vec<f64> {
    (1..=100).map(|k| chain.b + 0.05 * k as f64).collect()
}

fn parse_point(s: &str, p: usize) -> Result<Vec<f64>> {
    let x = io::parse_f64_list(s)?;
    if x.len() != p {
        return Err(Error::Invalid(format!("point has {} entries, expected {p}", x.len())));
    }
    Ok(x)
}

fn sibling(out: &Path, name: &str) -> PathBuf {
    out.parent().map_or_else(|| PathBuf::from(name), |d| d.join(name))
}

fn run(cmd: &Command, policy: &NumericPolicy) -> Result<Outcome> {
    match cmd {
        Command::TraceRates { chain, face, out } => {
            let model = io::load_chain(chain)?;
            let face = SiteSet::parse_one_based(face, model.p())?;
            let t = trace::trace_rates(&model, face)?;
            let members = face.indices();
            let report = TraceReport {
                face,
                u: members.iter().map(|&k| t.u.row(k).iter().copied().collect()).collect(),
                r_b: rows(&t.compact_rates()),
                lambda_b: members.iter().map(|&k| t.lambda_b[k]).collect(),
                gamma: rows(t.gamma()),
            };
            match out {
                Some(path) => io::write_json(path, &report)?,
                None => print!("{}", io::to_json(&report)?),
            }
            Ok(Outcome::Success)
        }
        Command::SimulateZrp { chain, n, t, grid, replicas, seed, out, x0, rates_table, max_events } => {
            let model = io::load_chain(chain)?;
            let p = model.p();
            let x0 = match x0 {
                Some(s) => parse_point(s, p)?,
                None => vec![1.0 / p as f64; p],
            };
            let eta0 = ZrpState::from_simplex(&x0, *n)?;
            let rates = match rates_table {
                Some(path) => JumpRateFamily::table(&model, io::read_json(path)?, policy)?,
                None => zrp::default_rates(&model),
            };
            let grid = io::parse_grid(grid)?;
            let run = ZrpRun { chain: &model, rates: &rates, eta0: &eta0, horizon: *t, grid: &grid, max_events: *max_events };
            let paths = zrp::simulate_zrp_ensemble(&run, *replicas, *seed)?;
            let meta = [
                ("kind", "zrp".to_string()),
                ("seed", seed.to_string()),
                ("n", n.to_string()),
                ("p", p.to_string()),
                ("b", model.b.to_string()),
                ("t", t.to_string()),
                ("replicas", replicas.to_string()),
                ("eta0", format!("{:?}", eta0.eta)),
            ];
            io::write_zrp_csv(out, &paths, &meta)?;
            Ok(Outcome::Success)
        }
        Command::SimulateDiffusion {
            chain,
            x0,
            t,
            dt,
            eps_abs,
            x_ref,
            dt_floor,
            replicas,
            seed,
            out,
            grid,
            absorptions,
        } => {
            let model = io::load_chain(chain)?;
            let p = model.p();
            let x0 = parse_point(x0, p)?;
            let grid = match grid {
                Some(s) => io::parse_grid(s)?,
                None => (0..=100).map(|k| if k == 100 { *t } else { t * k as f64 / 100.0 }).collect(),
            };
            let controls = DiffusionControls { dt_base: *dt, eps_abs: *eps_abs, x_ref: *x_ref, dt_floor: *dt_floor };
            let faces = FaceCache::new(&model, SiteSet::support(&x0))?;
            let run = DiffusionRun { chain: &model, faces: &faces, x0: &x0, horizon: *t, grid: &grid, controls };
            let paths = diffusion::simulate_diffusion_ensemble(&run, *replicas, *seed)?;
            let meta = [
                ("kind", "diffusion".to_string()),
                ("seed", seed.to_string()),
                ("p", p.to_string()),
                ("b", model.b.to_string()),
                ("t", t.to_string()),
                ("dt", dt.to_string()),
                ("eps_abs", eps_abs.to_string()),
                ("replicas", replicas.to_string()),
            ];
            io::write_diffusion_csv(out, &paths, &meta)?;
            let abs_path = absorptions.clone().unwrap_or_else(|| sibling(out, "absorptions.csv"));
            io::write_absorptions_csv(&abs_path, &paths, &meta)?;
            Ok(Outcome::Success)
        }
        Command::VerifySuperharmonic { chain, a, d, gamma, eps, out, grid_density, lambda, tolerance } => {
            let model = io::load_chain(chain)?;
            let p = model.p();
            let spec = SupharmSpec::new(SiteSet::parse_one_based(a, p)?, *gamma, model.b)?;
            let d = SiteSet::parse_one_based(d, p)?;
            let report = superharmonic::verify_supharmonic(&spec, &model, d, *eps, *grid_density, *lambda, *tolerance)?;
            io::write_json(out, &report)?;
            Ok(if report.passed { Outcome::Success } else { Outcome::ContractViolation })
        }
        Command::Compare {
            zrp,
            diff,
            checkpoints,
            out,
            resamples,
            seed,
            min_replicas,
            threshold,
            chain,
            absorptions,
            q_grid,
        } => {
            let zrp: Vec<Ensemble> = zrp.iter().map(|p| io::read_ensemble_csv(p)).collect::<Result<_>>()?;
            let diff = io::read_ensemble_csv(diff)?;
            let checkpoints = io::parse_f64_list(checkpoints)?;
            let opts = CompareOptions { resamples: *resamples, seed: *seed, min_replicas: *min_replicas, threshold: Some(*threshold) };
            let mut report = harness::compare_laws(&zrp, &diff, &checkpoints, &opts)?;
            if let (Some(chain), Some(abs)) = (chain, absorptions) {
                let model = io::load_chain(chain)?;
                let q = match q_grid {
                    Some(s) => io::parse_f64_list(s)?,
                    None => default_q_grid(&model),
                };
                report.absorption = Some(harness::absorption_stats(&io::read_absorptions_csv(abs)?, &model, &q)?);
            }
            io::write_json(out, &report)?;
            Ok(Outcome::Success)
        }
        Command::AbsorptionStats { chain, absorptions, out, q_grid } => {
            let model = io::load_chain(chain)?;
            let q = match q_grid {
                Some(s) => io::parse_f64_list(s)?,
                None => default_q_grid(&model),
            };
            let summary = harness::absorption_stats(&io::read_absorptions_csv(absorptions)?, &model, &q)?;
            io::write_json(out, &summary)?;
            Ok(Outcome::Success)
        }
    }
}
