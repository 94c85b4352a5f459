//! `latentbridge`: generate data, train, evaluate and plot.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric abort.

mod config;
mod eval;
mod gen;
mod plot;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latentbridge::Error;

#[derive(Parser)]
#[command(name = "latentbridge", version, about = "Twin-VAE sim-to-real transfer runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: sim images with depth and labels, and
    /// real-domain images of other scenes.
    GenData(gen::GenArgs),
    /// Train from a TOML run config.
    Train(train::TrainArgs),
    /// Score a checkpoint on a dataset and write JSON and CSV reports.
    Eval(eval::EvalArgs),
    /// Draw loss curves from a log and/or prediction panels from a checkpoint.
    Plot(plot::PlotArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Dimension(_) => 2,
        Error::NumericAbort { .. } | Error::NonFinite(_) => 4,
        _ => 3,
    }
}

/// Caps rayon's pool at `LATENTBRIDGE_THREADS` when set.
fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("LATENTBRIDGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("LATENTBRIDGE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

fn ensure_dir(path: &std::path::Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match cli.command {
        Command::GenData(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Plot(a) => plot::run(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Checkpoint and dtype flags shared by `eval` and `plot`.
#[derive(clap::Args, Clone, Debug)]
pub struct ModelArgs {
    /// Checkpoint file to load (read only).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Expected preset; a checkpoint of another architecture is rejected.
    #[arg(long)]
    preset: Option<String>,
    /// Precision used for inference.
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DTypeArg,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DTypeArg {
    F32,
    F64,
}

impl ModelArgs {
    fn load<T: latentbridge::Scalar>(&self) -> Result<latentbridge::model::ModelBundle<T>, Error> {
        let ck = latentbridge::model::load_checkpoint::<T>(&self.checkpoint)?;
        if let Some(p) = &self.preset {
            let name = &ck.model.arch().name;
            if name != p {
                return Err(Error::Usage(format!(
                    "{} holds preset `{name}`, not `{p}`",
                    self.checkpoint.display()
                )));
            }
        }
        Ok(ck.model)
    }
}
