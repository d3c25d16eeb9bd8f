use std::path::PathBuf;

use clap::Args;
use isosplat_core::splat3d::{render, render_reference};
use serde::Serialize;

use super::with_threads;
use crate::error::{CliError, CliResult};
use crate::formats::{write_png, CameraFile, ParticleSetFile};

#[derive(Debug, Clone, Args)]
pub struct Render3dArgs {
    /// Particle set with dimension 3 (binary or JSON).
    pub scene: PathBuf,
    /// Camera JSON document.
    #[arg(long)]
    pub camera: PathBuf,
    /// Output PNG.
    #[arg(long, default_value = "render.png")]
    pub out: PathBuf,
    /// Also run the brute-force renderer and report the largest pixel deviation.
    #[arg(long)]
    pub oracle: bool,
    /// Render with the brute-force renderer only.
    #[arg(long, conflicts_with = "oracle")]
    pub reference: bool,
    /// Background color `r,g,b`; overrides the camera file.
    #[arg(long, value_delimiter = ',')]
    pub background: Option<Vec<f64>>,
    #[arg(long, env = "ISOSPLAT_THREADS", default_value_t = 1)]
    pub threads: usize,
}

impl Render3dArgs {
    pub fn new(scene: impl Into<PathBuf>, camera: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            scene: scene.into(),
            camera: camera.into(),
            out: out.into(),
            oracle: false,
            reference: false,
            background: None,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RenderReport {
    pub splats: usize,
    pub width: usize,
    pub height: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_deviation: Option<f64>,
}

pub fn run(args: &Render3dArgs) -> CliResult<RenderReport> {
    let file = ParticleSetFile::load(&args.scene)?;
    let splats = file.records.splats().ok_or_else(|| {
        CliError::input(&args.scene, format!("field `dimension` is {}, a 3D scene is required", file.records.dimension()))
    })?;
    let cam_file = CameraFile::load(&args.camera)?;
    let cam = cam_file.camera().map_err(|e| CliError::input(&args.camera, e))?;
    let background = match &args.background {
        Some(v) => {
            if v.len() != 3 || v.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(CliError::Config("background: need three values in [0, 1]".into()));
            }
            [v[0], v[1], v[2]]
        }
        None => cam_file.background.unwrap_or([0.0; 3]),
    };
    let (img, max_deviation) = with_threads(args.threads, || -> CliResult<_> {
        if args.reference {
            return Ok((render_reference(&splats, &cam, background)?, None));
        }
        let img = render(&splats, &cam, background, args.threads > 1)?;
        let dev = if args.oracle {
            let slow = render_reference(&splats, &cam, background)?;
            Some(img.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        } else {
            None
        };
        Ok((img, dev))
    })??;
    write_png(&args.out, &img)?;
    Ok(RenderReport {
        splats: splats.len(),
        width: cam.width,
        height: cam.height,
        max_deviation,
    })
}
