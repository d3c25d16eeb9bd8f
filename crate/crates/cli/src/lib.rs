//! Command-line surface for isosplat: `fit`, `bench`, `render3d` and `inspect`,
//! plus the particle-set, camera and image file formats they share.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod error;
pub mod formats;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "isosplat", version, about = "Fit and render isotropic Gaussian particle fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a particle set to an image.
    Fit(commands::fit::FitArgs),
    /// Time iso against aniso fits over a (D, K) grid.
    Bench(commands::bench::BenchArgs),
    /// Render a 3D splat scene.
    Render3d(commands::render3d::Render3dArgs),
    /// Summarize a particle set or an image's quadtree as JSON.
    Inspect(commands::inspect::InspectArgs),
}

/// Runs a parsed command, printing its report to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fit(args) => {
            let report = commands::fit::run(&args)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Bench(args) => {
            commands::bench::run(&args)?;
        }
        Command::Render3d(args) => {
            let report = commands::render3d::run(&args)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Inspect(args) => {
            let report = commands::inspect::run(&args)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
    }
    Ok(())
}

/// Parses `argv` and runs it, returning the process exit code. Argument
/// errors count as invalid configuration.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
