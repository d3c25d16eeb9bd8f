use std::path::PathBuf;

use clap::{Args, ValueEnum};
use isosplat_core::field::{reconstruct, GridSpec};
use isosplat_core::optimize::{fit_with_progress, AdaptiveControlParams, ControlledParticle, FitConfig, LearningRates, Optimizer};
use isosplat_core::tree::{build_tree_budgeted, init_aniso_from_tree, init_particles_from_tree, random_aniso, random_iso, InitParams};
use isosplat_core::{psnr, ImageGrid};
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{with_threads, KernelArg};
use crate::error::{CliError, CliResult};
use crate::formats::{decode_png, write_file, write_png, Metadata, ParticleSetFile, Records};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InitArg {
    Tree,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Sgd,
    Momentum,
    Adam,
}

impl OptimizerArg {
    pub fn optimizer(self) -> Optimizer {
        match self {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Momentum => Optimizer::MOMENTUM,
            OptimizerArg::Adam => Optimizer::ADAM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    /// Input PNG (8-bit gray or RGB).
    pub image: PathBuf,
    #[arg(long, value_enum, default_value = "iso")]
    pub kernel: KernelArg,
    #[arg(long, value_enum, default_value = "tree")]
    pub init: InitArg,
    /// Maximum quadtree depth.
    #[arg(long, default_value_t = 7)]
    pub tree_depth: usize,
    /// Split a cell while its max-channel variance exceeds this.
    #[arg(long, default_value_t = 1e-3)]
    pub var_threshold: f64,
    /// Cells are never split at or below this side length.
    #[arg(long, default_value_t = 1)]
    pub min_cell: usize,
    /// Particle budget.
    #[arg(long, default_value_t = 1000)]
    pub k: usize,
    /// Support radius in pixels.
    #[arg(long, default_value_t = 15.0)]
    pub d: f64,
    /// D-SSIM weight.
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "ISOSPLAT_THREADS", default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "off")]
    pub adapt: Switch,
    /// Epochs between adaptive-control passes when `--adapt on`.
    #[arg(long, default_value_t = 100)]
    pub adapt_every: usize,
    /// Largest particle count adaptive control may produce.
    #[arg(long, default_value_t = 4000)]
    pub max_particles: usize,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = LearningRates::default().position)]
    pub lr_position: f64,
    #[arg(long, default_value_t = LearningRates::default().shape)]
    pub lr_shape: f64,
    #[arg(long, default_value_t = LearningRates::default().amplitude)]
    pub lr_amplitude: f64,
    /// Disable halving the rates on a loss increase.
    #[arg(long)]
    pub no_backoff: bool,
    /// Write the particle set as JSON instead of binary.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub particles_initial: usize,
    pub particles_final: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_psnr_db: f64,
    pub final_psnr_db: f64,
    pub rejected_steps: usize,
    pub particle_file: PathBuf,
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
    particles: usize,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    epoch: usize,
    loss_history: &'a [f64],
    particle_count_history: &'a [usize],
    report: &'a FitReport,
}

impl FitArgs {
    /// Defaults for the given input and output; equivalent to `fit IMAGE --out OUT`.
    pub fn new(image: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            image: image.into(),
            kernel: KernelArg::Iso,
            init: InitArg::Tree,
            tree_depth: 7,
            var_threshold: 1e-3,
            min_cell: 1,
            k: 1000,
            d: 15.0,
            lambda: 0.2,
            epochs: 2000,
            seed: 0,
            threads: 1,
            out: out.into(),
            adapt: Switch::Off,
            adapt_every: 100,
            max_particles: 4000,
            optimizer: OptimizerArg::Adam,
            lr_position: LearningRates::default().position,
            lr_shape: LearningRates::default().shape,
            lr_amplitude: LearningRates::default().amplitude,
            no_backoff: false,
            json: false,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            support: self.d,
            budget: self.k,
            lambda: self.lambda,
            epochs: self.epochs,
            rates: LearningRates {
                position: self.lr_position,
                shape: self.lr_shape,
                amplitude: self.lr_amplitude,
            },
            optimizer: self.optimizer.optimizer(),
            backoff: !self.no_backoff,
            adapt_every: if self.adapt == Switch::On { self.adapt_every } else { 0 },
            seed: self.seed,
            parallel: self.threads > 1,
        }
    }

    fn init_params(&self) -> InitParams {
        InitParams {
            max_depth: self.tree_depth,
            variance_threshold: self.var_threshold,
            min_cell_px: self.min_cell,
        }
    }

    fn adapt_params(&self) -> Option<AdaptiveControlParams> {
        (self.adapt == Switch::On).then(|| AdaptiveControlParams {
            max_particles: self.max_particles,
            ..AdaptiveControlParams::default()
        })
    }

    fn validate(&self) -> CliResult<()> {
        if self.threads == 0 {
            return Err(CliError::Config("threads: must be at least 1".into()));
        }
        if self.adapt == Switch::On && self.adapt_every == 0 {
            return Err(CliError::Config("adapt-every: must be at least 1 with --adapt on".into()));
        }
        self.fit_config().validate()?;
        self.init_params().validate()?;
        Ok(())
    }
}

/// Random initial scales span one pixel to a sixteenth of the shorter side.
pub fn random_sigma_range(width: usize, height: usize) -> (f64, f64) {
    (1.0, (width.min(height) as f64 / 16.0).max(2.0))
}

pub fn run(args: &FitArgs) -> CliResult<FitReport> {
    args.validate()?;
    let bytes = std::fs::read(&args.image).map_err(|e| CliError::input(&args.image, e))?;
    let target = decode_png(&bytes).map_err(|e| CliError::input(&args.image, e))?;
    let sha = format!("{:x}", Sha256::digest(&bytes));
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::output(&args.out, e))?;
    with_threads(args.threads, || match args.kernel {
        KernelArg::Iso => {
            let init = match args.init {
                InitArg::Tree => init_particles_from_tree(&build_tree_budgeted(&target, &args.init_params(), args.k)?),
                InitArg::Random => {
                    random_iso(args.k, target.shape(), random_sigma_range(target.width(), target.height()), args.seed)?
                }
            };
            fit_and_write(args, &target, &sha, init, Records::Iso2D)
        }
        KernelArg::Aniso => {
            let init = match args.init {
                InitArg::Tree => init_aniso_from_tree(&build_tree_budgeted(&target, &args.init_params(), args.k)?),
                InitArg::Random => {
                    random_aniso(args.k, target.shape(), random_sigma_range(target.width(), target.height()), args.seed)?
                }
            };
            fit_and_write(args, &target, &sha, init, Records::Aniso2D)
        }
    })?
}

fn fit_and_write<P: ControlledParticle>(
    args: &FitArgs,
    target: &ImageGrid,
    sha: &str,
    init: Vec<P>,
    wrap: fn(Vec<P>) -> Records,
) -> CliResult<FitReport> {
    let config = args.fit_config();
    let grid = GridSpec::of(target, args.d)?;
    let adapt = args.adapt_params();
    let init_img = reconstruct(&init, &grid)?;
    let particles_initial = init.len();
    let state = fit_with_progress(target, init, &config, adapt.as_ref(), |epoch, loss| {
        if epoch % 100 == 0 {
            log::info!("epoch {epoch}: loss {loss:.6}");
        }
    })?;
    let final_img = reconstruct(&state.particles, &grid)?;
    let initial_loss = isosplat_core::loss::loss(target, &init_img, args.lambda)?;

    let particle_file = args.out.join(if args.json { "particles.json" } else { "particles.ispl" });
    let report = FitReport {
        particles_initial,
        particles_final: state.particles.len(),
        initial_loss,
        final_loss: state.final_loss.total,
        initial_psnr_db: psnr(target, &init_img.clamped())?,
        final_psnr_db: psnr(target, &final_img.clamped())?,
        rejected_steps: state.rejected_steps,
        particle_file: particle_file.clone(),
    };

    let metadata = Metadata {
        source_sha256: Some(sha.to_string()),
        image_shape: Some([target.width(), target.height(), target.channels()]),
        epoch: Some(state.epoch),
        final_loss: Some(state.final_loss.total),
        config: Some(config_json(args)),
    };
    ParticleSetFile::new(wrap(state.particles), Some(metadata)).save(&particle_file, args.json)?;

    let loss_path = args.out.join("loss.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for (epoch, (&loss, &particles)) in state.loss_history.iter().zip(&state.particle_count_history).enumerate() {
        w.serialize(LossRow { epoch, loss, particles }).map_err(|e| CliError::output(&loss_path, e))?;
    }
    w.serialize(LossRow {
        epoch: state.epoch,
        loss: state.final_loss.total,
        particles: report.particles_final,
    })
    .map_err(|e| CliError::output(&loss_path, e))?;
    write_file(&loss_path, &w.into_inner().map_err(|e| CliError::output(&loss_path, e))?)?;

    write_png(&args.out.join("init.png"), &init_img)?;
    write_png(&args.out.join("final.png"), &final_img)?;
    let sidecar = Sidecar {
        epoch: state.epoch,
        loss_history: &state.loss_history,
        particle_count_history: &state.particle_count_history,
        report: &report,
    };
    let sidecar_path = args.out.join("fit.json");
    write_file(&sidecar_path, serde_json::to_string_pretty(&sidecar).expect("sidecar serializes").as_bytes())?;
    Ok(report)
}

/// Settings that affect the result. Paths and thread count are left out so
/// the particle file only depends on the input pixels and the fit settings.
fn config_json(args: &FitArgs) -> serde_json::Value {
    let mut v = serde_json::to_value(args).expect("args serialize");
    if let Some(obj) = v.as_object_mut() {
        for key in ["image", "out", "threads", "json"] {
            obj.remove(key);
        }
    }
    v
}
