use std::path::PathBuf;

use latentbridge::data::{load_directory_dataset, MemoryDataset};
use latentbridge::loss::Stage;
use latentbridge::model::{load_checkpoint, ModelBundle};
use latentbridge::train::{resume_stage, run_stage, train_full, RunDir, StageLog};
use latentbridge::{Error, Scalar};

use crate::config::{load_config, DTypeName, RunConfig};

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Run only this stage (stage1, stage2-depth or stage2-seg).
    #[arg(long)]
    stage: Option<String>,
    /// Continue a stage from one of its epoch checkpoints.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Start `--stage` from this checkpoint's weights instead of a fresh model.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Config override `key.path=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: TrainArgs) -> Result<(), Error> {
    let mut overrides = a.overrides.clone();
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(d) = &a.data {
        overrides.push(format!("data={:?}", d.display().to_string()));
    }
    if let Some(o) = &a.out {
        overrides.push(format!("out={:?}", o.display().to_string()));
    }
    let cfg = load_config(&a.config, &overrides)?;
    cfg.validate()?;
    let stage = a.stage.as_deref().map(str::parse::<Stage>).transpose()?;
    match cfg.dtype {
        DTypeName::F32 => train::<f32>(&cfg, &a, stage),
        DTypeName::F64 => train::<f64>(&cfg, &a, stage),
    }
}

/// All sim samples and only the rgb of real samples: real ground truth never
/// reaches training.
fn training_data<T: Scalar>(cfg: &RunConfig) -> Result<MemoryDataset<T>, Error> {
    let dir = load_directory_dataset(&cfg.data)?;
    let mut data = MemoryDataset::<T>::collect(&dir)?;
    for s in &mut data.real {
        s.depth = None;
        s.labels = None;
    }
    Ok(data)
}

fn summarize(log: &StageLog) {
    let t = log.totals();
    if let (Some(first), Some(last)) = (t.first(), t.last()) {
        log::info!(
            "{}: {} steps, total loss {first:.4} -> {last:.4}",
            log.stage,
            log.records.len()
        );
    }
}

fn train<T: Scalar>(cfg: &RunConfig, a: &TrainArgs, stage: Option<Stage>) -> Result<(), Error> {
    let data = training_data::<T>(cfg)?;
    let run = RunDir::at(&cfg.out);
    super::ensure_dir(&cfg.out)?;
    super::write_file(&cfg.out.join("config.toml"), cfg.resolved().to_toml()?)?;
    let train_cfg = cfg.train_config();

    if let Some(ck) = &a.resume {
        let held = load_checkpoint::<T>(ck)?;
        let ck_stage = held
            .extra
            .get("stage")
            .and_then(|v| v.as_str())
            .map(str::parse::<Stage>)
            .transpose()?;
        let stage = stage.or(ck_stage).ok_or_else(|| {
            Error::Usage(format!("{} names no stage; pass --stage", ck.display()))
        })?;
        let plan = cfg.plan_for(stage)?;
        log::info!("resuming {stage} from {}", ck.display());
        let (_, log) = resume_stage(ck, &data, &plan, &train_cfg, &run)?;
        summarize(&log);
        return Ok(());
    }

    let arch = cfg.arch()?;
    let mut model = match &a.init {
        Some(path) => {
            let m = load_checkpoint::<T>(path)?.model;
            if m.arch() != &arch {
                return Err(Error::Usage(format!(
                    "{} holds preset `{}`, the config asks for `{}`",
                    path.display(),
                    m.arch().name,
                    arch.name
                )));
            }
            m
        }
        None => ModelBundle::<T>::build(&arch, cfg.seed)?,
    };
    match stage {
        Some(stage) => {
            let plan = cfg.plan_for(stage)?;
            log::info!("training {stage} for {} epochs", plan.epochs);
            summarize(&run_stage(&mut model, &data, &plan, &train_cfg, &run)?);
        }
        None => {
            let plans = cfg.plans();
            log::info!(
                "training schedule [{}]",
                plans.iter().map(|p| p.stage.name()).collect::<Vec<_>>().join(", ")
            );
            for log in train_full(&mut model, &data, &plans, &train_cfg, &run)? {
                summarize(&log);
            }
        }
    }
    Ok(())
}
