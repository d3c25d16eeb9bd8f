//! Iso vs aniso timing grid over support radius `D` and particle budget `K`.
//!
//! Both kernels start from the same random particles (the anisotropic copy
//! has `s1 = s2 = sigma`, `theta = 0`), so every cell compares equal work
//! per epoch apart from the kernel arithmetic itself.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use isosplat_core::field::{reconstruct, AnisoParticle2D, GridSpec, KernelKind};
use isosplat_core::optimize::{fit, ControlledParticle, FitConfig, LearningRates};
use isosplat_core::tree::random_iso;
use isosplat_core::{psnr, ImageGrid};
use serde::Serialize;

use super::fit::{random_sigma_range, OptimizerArg};
use super::with_threads;
use crate::error::{CliError, CliResult};
use crate::formats::{decode_png, write_file};

/// The bundled 256x256 color fixture.
pub const FIXTURE_PNG: &[u8] = include_bytes!("../../fixtures/astronaut_256.png");
/// Grayscale companion of [`FIXTURE_PNG`].
pub const FIXTURE_GRAY_PNG: &[u8] = include_bytes!("../../fixtures/astronaut_256_gray.png");

pub const CSV_HEADER: &str = "kernel_kind,d,k,epochs,wall_time_s,final_loss,final_psnr_db,particles_final,seed,threads";

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Input PNG; defaults to the bundled color fixture.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Use the bundled grayscale fixture instead of the color one.
    #[arg(long, conflicts_with = "image")]
    pub gray: bool,
    /// Box-downsample the input by this factor first.
    #[arg(long, default_value_t = 1)]
    pub downsample: usize,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    /// Support radii to sweep.
    #[arg(long = "d", value_delimiter = ',', default_values_t = [15.0, 50.0])]
    pub ds: Vec<f64>,
    /// Particle budgets to sweep.
    #[arg(long = "k", value_delimiter = ',', default_values_t = [1000, 2000])]
    pub ks: Vec<usize>,
    /// Repetitions per cell; the median wall time is reported.
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "ISOSPLAT_THREADS", default_value_t = 1)]
    pub threads: usize,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    /// Wall-clock budget in seconds for the whole grid.
    #[arg(long)]
    pub budget: Option<f64>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl BenchArgs {
    pub fn new() -> Self {
        Self {
            image: None,
            gray: false,
            downsample: 1,
            epochs: 2000,
            ds: vec![15.0, 50.0],
            ks: vec![1000, 2000],
            reps: 3,
            lambda: 0.2,
            seed: 0,
            threads: 1,
            optimizer: OptimizerArg::Adam,
            budget: None,
            out: None,
        }
    }
}

impl Default for BenchArgs {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub kernel_kind: String,
    pub d: f64,
    pub k: usize,
    pub epochs: usize,
    pub wall_time_s: f64,
    pub final_loss: f64,
    pub final_psnr_db: f64,
    pub particles_final: usize,
    pub seed: u64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Speedup {
    pub d: f64,
    pub k: usize,
    pub aniso_s: f64,
    pub iso_s: f64,
    /// Aniso time over iso time.
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub speedups: Vec<Speedup>,
    pub truncated: bool,
    /// Every repetition's wall time, keyed like `rows`.
    pub rep_times: Vec<Vec<f64>>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("bench row serializes");
        }
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER.split(',')).expect("header");
        }
        let mut s = String::from_utf8(w.into_inner().expect("flush")).expect("utf8");
        if self.truncated {
            s.push_str("# truncated: wall-clock budget exceeded\n");
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("speedup (aniso time / iso time):\n");
        for sp in &self.speedups {
            s.push_str(&format!(
                "  D={:<4} K={:<5} aniso {:>9.3}s  iso {:>9.3}s  ratio {:.2}x\n",
                sp.d, sp.k, sp.aniso_s, sp.iso_s, sp.ratio
            ));
        }
        s
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn load_target(args: &BenchArgs) -> CliResult<ImageGrid> {
    let img = match &args.image {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::input(path, e))?;
            decode_png(&bytes).map_err(|e| CliError::input(path, e))?
        }
        None => {
            let png = if args.gray { FIXTURE_GRAY_PNG } else { FIXTURE_PNG };
            decode_png(png).map_err(CliError::Input)?
        }
    };
    if args.downsample > 1 {
        Ok(img.downsample(args.downsample)?)
    } else {
        Ok(img)
    }
}

struct Run {
    seconds: f64,
    loss: f64,
    psnr: f64,
    particles: usize,
}

fn timed<P: ControlledParticle>(target: &ImageGrid, init: Vec<P>, cfg: &FitConfig) -> CliResult<Run> {
    let start = Instant::now();
    let state = fit(target, init, cfg, None)?;
    let seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    let rec = reconstruct(&state.particles, &GridSpec::of(target, cfg.support)?)?;
    Ok(Run {
        seconds,
        loss: state.final_loss.total,
        psnr: psnr(target, &rec.clamped())?,
        particles: state.particles.len(),
    })
}

fn validate(args: &BenchArgs) -> CliResult<()> {
    if args.reps == 0 {
        return Err(CliError::Config("reps: must be at least 1".into()));
    }
    if args.ds.is_empty() || args.ks.is_empty() {
        return Err(CliError::Config("d/k: grid needs at least one value each".into()));
    }
    if let Some(b) = args.budget {
        if !(b > 0.0) {
            return Err(CliError::Config(format!("budget: must be > 0 seconds, got {b}")));
        }
    }
    for &d in &args.ds {
        cell_config(args, d).validate()?;
    }
    if args.ks.contains(&0) {
        return Err(CliError::Config("k: must be at least 1".into()));
    }
    Ok(())
}

fn cell_config(args: &BenchArgs, d: f64) -> FitConfig {
    FitConfig {
        support: d,
        lambda: args.lambda,
        epochs: args.epochs,
        rates: LearningRates::default(),
        optimizer: args.optimizer.optimizer(),
        seed: args.seed,
        parallel: args.threads > 1,
        adapt_every: 0,
        ..FitConfig::default()
    }
}

/// Runs the grid. Cells are visited budget-major, matching the column order
/// `(15, 1e3), (50, 1e3), (15, 2e3), (50, 2e3)`; each cell yields an aniso
/// row then an iso row. Repetitions alternate which kernel goes first.
pub fn run_grid(args: &BenchArgs) -> CliResult<BenchReport> {
    validate(args)?;
    let target = load_target(args)?;
    let start = Instant::now();
    let over_budget = || args.budget.is_some_and(|b| start.elapsed().as_secs_f64() > b);
    let mut report = BenchReport {
        rows: Vec::new(),
        speedups: Vec::new(),
        truncated: false,
        rep_times: Vec::new(),
    };
    'grid: for &k in &args.ks {
        for &d in &args.ds {
            let cfg = FitConfig { budget: k, ..cell_config(args, d) };
            let iso = random_iso(k, target.shape(), random_sigma_range(target.width(), target.height()), args.seed)?;
            let aniso: Vec<AnisoParticle2D> = iso
                .iter()
                .map(|p| AnisoParticle2D {
                    mu: p.mu,
                    theta: 0.0,
                    s1: p.sigma,
                    s2: p.sigma,
                    amplitude: p.amplitude.clone(),
                })
                .collect();
            let (mut t_aniso, mut t_iso) = (Vec::new(), Vec::new());
            let (mut last_aniso, mut last_iso) = (None, None);
            for rep in 0..args.reps {
                for first in [rep % 2 == 0, rep % 2 != 0] {
                    if first {
                        let r = with_threads(args.threads, || timed(&target, iso.clone(), &cfg))??;
                        t_iso.push(r.seconds);
                        last_iso = Some(r);
                    } else {
                        let r = with_threads(args.threads, || timed(&target, aniso.clone(), &cfg))??;
                        t_aniso.push(r.seconds);
                        last_aniso = Some(r);
                    }
                    if over_budget() {
                        report.truncated = true;
                        break 'grid;
                    }
                }
            }
            for (kind, times, run) in [(KernelKind::Aniso, &t_aniso, &last_aniso), (KernelKind::Iso, &t_iso, &last_iso)] {
                let run = run.as_ref().expect("every repetition runs both kernels");
                report.rows.push(BenchRow {
                    kernel_kind: kind.as_str().to_string(),
                    d,
                    k,
                    epochs: args.epochs,
                    wall_time_s: median(times),
                    final_loss: run.loss,
                    final_psnr_db: run.psnr,
                    particles_final: run.particles,
                    seed: args.seed,
                    threads: args.threads,
                });
                report.rep_times.push(times.clone());
            }
            let (aniso_s, iso_s) = (median(&t_aniso), median(&t_iso));
            report.speedups.push(Speedup {
                d,
                k,
                aniso_s,
                iso_s,
                ratio: aniso_s / iso_s,
            });
        }
    }
    Ok(report)
}

/// Runs the grid, writes the CSV and prints the speedup summary to stderr.
pub fn run(args: &BenchArgs) -> CliResult<BenchReport> {
    let report = run_grid(args)?;
    let csv = report.to_csv();
    match &args.out {
        Some(path) => write_file(path, csv.as_bytes())?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(csv.as_bytes())
                .map_err(|e| CliError::Output(format!("stdout: {e}")))?;
        }
    }
    eprint!("{}", report.summary());
    if report.truncated {
        return Err(CliError::BudgetExceeded(format!(
            "{} of {} cells finished within {} s",
            report.speedups.len(),
            args.ds.len() * args.ks.len(),
            args.budget.unwrap_or_default()
        )));
    }
    Ok(report)
}
