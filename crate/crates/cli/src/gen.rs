use std::path::PathBuf;

use latentbridge::data::{write_dataset, SceneConfig, WriteOptions};
use latentbridge::model::ArchConfig;
use latentbridge::Error;

#[derive(clap::Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Images per domain.
    #[arg(long)]
    count: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Model preset whose downsampling the size must divide; defaults to
    /// the desk preset.
    #[arg(long)]
    preset: Option<String>,
    /// Render the real image of index i from the same scene as sim image i.
    #[arg(long)]
    paired: bool,
    /// Also write real-domain depth, for evaluation sets.
    #[arg(long)]
    real_depth: bool,
    /// Skip real-domain segmentation.
    #[arg(long)]
    no_real_labels: bool,
    /// Render the real domain without the appearance shift.
    #[arg(long)]
    no_shift: bool,
}

pub fn run(a: GenArgs) -> Result<(), Error> {
    let arch = match &a.preset {
        Some(p) => ArchConfig::preset(p)?,
        None => ArchConfig::desk(a.size),
    };
    let mut cfg = SceneConfig {
        downsample: arch.downsample(),
        ..SceneConfig::with_size(a.size)
    };
    if a.no_shift {
        cfg.shift = latentbridge::data::ShiftConfig::none();
    }
    cfg.validate()?;
    let opts = WriteOptions {
        unpaired: !a.paired,
        real_labels: !a.no_real_labels,
        real_depth: a.real_depth,
    };
    super::ensure_dir(&a.out)?;
    let meta = write_dataset(&a.out, &cfg, a.seed, a.count, opts)?;
    log::info!(
        "wrote {} sim and {} real {}x{} images to {}",
        meta.sim_count,
        meta.real_count,
        meta.size,
        meta.size,
        a.out.display()
    );
    Ok(())
}
