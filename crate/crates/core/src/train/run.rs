//! Stage orchestration: seeded batching, loss, backprop, Adam on the
//! trainable groups, per-step log records and per-epoch checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::data::{collate, derive_seed, Batch, SceneSource};
use crate::error::{Error, Result};
use crate::loss::{stage1_loss, stage2_loss, AuxTarget, LossOptions, LossReport, ModelAux, Stage};
use crate::model::{load_checkpoint, save_checkpoint, Binder, Domain, Group, ModelBundle};
use crate::nn::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::adam::{adam_step, AdamState, OptimizerConfig};

fn default_batch_size() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: Stage,
    /// `None` selects [`StagePlan::default_groups`].
    #[serde(default)]
    pub trainable: Option<Vec<Group>>,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `max(#sim, #real) / batch_size`, at least 1.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
}

impl StagePlan {
    pub fn new(stage: Stage, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            stage,
            trainable: None,
            epochs,
            batch_size,
            seed,
            steps_per_epoch: None,
        }
    }

    /// Stage 1 trains both domain autoencoders and the shared blocks. Stage 2
    /// trains the encoders, the shared encoder block and the task decoder,
    /// with the image decoders frozen.
    pub fn default_groups(stage: Stage) -> Vec<Group> {
        match stage {
            Stage::One => vec![
                Group::EncR,
                Group::EncS,
                Group::DecR,
                Group::DecS,
                Group::SharedEnc,
                Group::SharedDec,
            ],
            Stage::TwoDepth => vec![Group::EncR, Group::EncS, Group::SharedEnc, Group::DecDepth],
            Stage::TwoSeg => vec![Group::EncR, Group::EncS, Group::SharedEnc, Group::DecSeg],
        }
    }

    pub fn groups(&self) -> Vec<Group> {
        self.trainable
            .clone()
            .unwrap_or_else(|| Self::default_groups(self.stage))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Usage("batch_size must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Usage("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub loss: LossOptions,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

/// One optimization step. `step` counts from 1 across the whole stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
    pub wall_ms: u64,
}

impl Serialize for StepRecord {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &self.report;
        let mut m = s.serialize_map(Some(r.terms.len() + 5))?;
        m.serialize_entry("stage", r.stage.name())?;
        m.serialize_entry("epoch", &self.epoch)?;
        m.serialize_entry("step", &self.step)?;
        for (n, v) in &r.terms {
            m.serialize_entry(n, v)?;
        }
        m.serialize_entry("total", &r.total)?;
        m.serialize_entry("wall_ms", &self.wall_ms)?;
        m.end()
    }
}

impl StepRecord {
    /// Parses one log line written by [`StepRecord`]'s serializer.
    pub fn from_json_line(line: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Data("log line is not an object".into()))?;
        let field = |k: &str| {
            obj.get(k)
                .ok_or_else(|| Error::Data(format!("log line lacks `{k}`")))
        };
        let stage: Stage = field("stage")?
            .as_str()
            .ok_or_else(|| Error::Data("log `stage` is not a string".into()))?
            .parse()?;
        let num = |k: &str| {
            field(k)?
                .as_f64()
                .ok_or_else(|| Error::Data(format!("log `{k}` is not a number")))
        };
        let terms = stage
            .term_names()
            .iter()
            .map(|&n| num(n).map(|v| (n, v)))
            .collect::<Result<_>>()?;
        Ok(Self {
            epoch: num("epoch")? as usize,
            step: num("step")? as usize,
            report: LossReport {
                stage,
                terms,
                total: num("total")?,
            },
            wall_ms: num("wall_ms")? as u64,
        })
    }
}

/// Reads a JSONL loss log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            StepRecord::from_json_line(&line)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct StageLog {
    pub stage: Stage,
    pub records: Vec<StepRecord>,
    /// Applied and skipped optimizer steps, counting from the stage start.
    pub applied: u64,
    pub skipped: u64,
    /// Checkpoints written, in epoch order.
    pub checkpoints: Vec<PathBuf>,
}

impl StageLog {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.report.total).collect()
    }
}

/// Where a stage writes its log stream and checkpoints; `None` keeps
/// everything in memory.
#[derive(Clone, Debug, Default)]
pub struct RunDir(pub Option<PathBuf>);

impl RunDir {
    pub fn at(path: impl Into<PathBuf>) -> Self {
        Self(Some(path.into()))
    }

    pub fn log_path(&self, stage: Stage) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join(format!("{}.jsonl", stage.name())))
    }

    pub fn checkpoint_path(&self, stage: Stage, epoch: usize) -> Option<PathBuf> {
        self.0
            .as_ref()
            .map(|d| d.join(format!("{}-epoch{epoch}.ckpt", stage.name())))
    }
}

fn stage_code(stage: Stage) -> u64 {
    match stage {
        Stage::One => 1,
        Stage::TwoDepth => 2,
        Stage::TwoSeg => 3,
    }
}

/// Sample indices for `needed` draws: concatenated fresh permutations.
fn index_stream(n: usize, needed: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(needed + n);
    while out.len() < needed {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        out.extend(perm);
    }
    out.truncate(needed);
    out
}

fn load_batch<T: Scalar>(
    data: &dyn SceneSource<T>,
    domain: Domain,
    idx: &[usize],
) -> Result<Batch<T>> {
    let samples = idx
        .iter()
        .map(|&i| data.sample(domain, i))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = data.depth_range();
    collate(&samples, lo, hi)
}

fn check_data<T: Scalar>(model: &ModelBundle<T>, data: &dyn SceneSource<T>, stage: Stage) -> Result<()> {
    for d in [Domain::Sim, Domain::Real] {
        if data.len(d) == 0 {
            return Err(Error::Empty(format!("{stage} needs {d} images, dataset has none")));
        }
    }
    let want = model.arch().image_size;
    if data.image_size() != want {
        return Err(Error::Dimension(format!(
            "dataset images are {0}x{0}, model expects {want}x{want}",
            data.image_size()
        )));
    }
    Ok(())
}

struct Session<'a, T: Scalar> {
    model: &'a mut ModelBundle<T>,
    data: &'a dyn SceneSource<T>,
    plan: &'a StagePlan,
    cfg: &'a TrainConfig,
    run: &'a RunDir,
    adam: AdamState<T>,
    log: Option<BufWriter<File>>,
}

impl<T: Scalar> Session<'_, T> {
    fn step(&mut self, epoch: usize, step: usize, sim: &[usize], real: &[usize], rng: &mut ChaCha8Rng) -> Result<StepRecord> {
        let t0 = Instant::now();
        let stage = self.plan.stage;
        let xs = load_batch(self.data, Domain::Sim, sim)?;
        let xr = load_batch(self.data, Domain::Real, real)?;
        let groups = self.plan.groups();
        let mut g = Graph::new();
        let mut b = Binder::new(&*self.model, &groups);
        let loss = match stage {
            Stage::One => stage1_loss(&mut b, &mut g, &xr.rgb, &xs.rgb, &self.cfg.loss, rng)?,
            Stage::TwoDepth | Stage::TwoSeg => {
                let target = if stage == Stage::TwoDepth {
                    AuxTarget::Depth(xs.depth.clone().ok_or_else(|| {
                        Error::Data("stage2-depth needs sim depth ground truth".into())
                    })?)
                } else {
                    AuxTarget::Seg(xs.labels.clone().ok_or_else(|| {
                        Error::Data("stage2-seg needs sim segmentation ground truth".into())
                    })?)
                };
                stage2_loss(&mut b, &mut g, &xs.rgb, &target, &xr.rgb, &self.cfg.loss, rng, &ModelAux)?
            }
        };
        let report = loss.report(&g);
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NumericAbort {
                stage: stage.name().to_string(),
                epoch,
                step,
                term: term.to_string(),
            });
        }
        let mut grads_by_var = g.backward(loss.total)?;
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, &v) in b.bound() {
            if let Some(gr) = grads_by_var.take(v) {
                grads.insert(name.clone(), gr);
            }
        }
        drop(b);
        adam_step(self.model, &grads, &mut self.adam, &self.cfg.optimizer)?;
        Ok(StepRecord {
            epoch,
            step,
            report,
            wall_ms: t0.elapsed().as_millis() as u64,
        })
    }

    fn epoch(&mut self, epoch: usize, records: &mut Vec<StepRecord>) -> Result<()> {
        let plan = self.plan;
        let n_sim = self.data.len(Domain::Sim);
        let n_real = self.data.len(Domain::Real);
        let bs = plan.batch_size;
        let steps = plan
            .steps_per_epoch
            .unwrap_or((n_sim.max(n_real) / bs).max(1));
        // Everything random in an epoch derives from (seed, stage, epoch), so
        // resuming at an epoch boundary replays the same stream.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, &[stage_code(plan.stage), epoch as u64]));
        let sim_idx = index_stream(n_sim, steps * bs, &mut rng);
        let real_idx = index_stream(n_real, steps * bs, &mut rng);
        for k in 0..steps {
            let step = (epoch - 1) * steps + k + 1;
            let rec = self.step(
                epoch,
                step,
                &sim_idx[k * bs..(k + 1) * bs],
                &real_idx[k * bs..(k + 1) * bs],
                &mut rng,
            )?;
            if let Some(w) = self.log.as_mut() {
                let line = serde_json::to_string(&rec)?;
                let path = self.run.log_path(plan.stage).expect("log implies run dir");
                writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
            }
            records.push(rec);
        }
        if let Some(w) = self.log.as_mut() {
            let path = self.run.log_path(plan.stage).expect("log implies run dir");
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn checkpoint_extra(plan: &StagePlan, cfg: &TrainConfig, epoch: usize, step: usize) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "stage": plan.stage.name(),
        "epoch": epoch,
        "step": step,
        "plan": serde_json::to_value(plan)?,
        "train": serde_json::to_value(cfg)?,
    }))
}

fn open_log(run: &RunDir, stage: Stage, keep_through_epoch: usize) -> Result<Option<BufWriter<File>>> {
    let Some(path) = run.log_path(stage) else {
        return Ok(None);
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // A resumed run keeps the records up to its checkpoint and drops any
    // later ones left by the interrupted run.
    let kept: Vec<String> = if keep_through_epoch > 0 && path.exists() {
        read_log(&path)?
            .into_iter()
            .filter(|r| r.epoch <= keep_through_epoch)
            .map(|r| serde_json::to_string(&r))
            .collect::<std::result::Result<_, _>>()?
    } else {
        Vec::new()
    };
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for line in kept {
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(Some(w))
}

fn run_epochs<T: Scalar>(
    model: &mut ModelBundle<T>,
    data: &dyn SceneSource<T>,
    plan: &StagePlan,
    cfg: &TrainConfig,
    run: &RunDir,
    start_epoch: usize,
    adam: AdamState<T>,
) -> Result<StageLog> {
    plan.validate()?;
    cfg.validate()?;
    check_data(model, data, plan.stage)?;
    let log = open_log(run, plan.stage, start_epoch)?;
    let mut s = Session {
        model,
        data,
        plan,
        cfg,
        run,
        adam,
        log,
    };
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in start_epoch + 1..=plan.epochs {
        s.epoch(epoch, &mut records)?;
        if let Some(path) = run.checkpoint_path(plan.stage, epoch) {
            let step = records.last().map_or(0, |r| r.step);
            save_checkpoint(&path, s.model, Some(&s.adam), &checkpoint_extra(plan, cfg, epoch, step)?)?;
            checkpoints.push(path);
        }
    }
    Ok(StageLog {
        stage: plan.stage,
        records,
        applied: s.adam.step,
        skipped: s.adam.skipped,
        checkpoints,
    })
}

/// Runs every epoch of `plan` with a fresh optimizer.
pub fn run_stage<T: Scalar>(
    model: &mut ModelBundle<T>,
    data: &dyn SceneSource<T>,
    plan: &StagePlan,
    cfg: &TrainConfig,
    run: &RunDir,
) -> Result<StageLog> {
    run_epochs(model, data, plan, cfg, run, 0, AdamState::new())
}

/// Continues `plan` from an epoch checkpoint written by [`run_stage`]. The
/// model and optimizer state come from the checkpoint.
pub fn resume_stage<T: Scalar>(
    checkpoint: &Path,
    data: &dyn SceneSource<T>,
    plan: &StagePlan,
    cfg: &TrainConfig,
    run: &RunDir,
) -> Result<(ModelBundle<T>, StageLog)> {
    let ck = load_checkpoint::<T>(checkpoint)?;
    let stage = ck.extra.get("stage").and_then(|v| v.as_str());
    if stage != Some(plan.stage.name()) {
        return Err(Error::Usage(format!(
            "{} holds stage {:?}, cannot resume {}",
            checkpoint.display(),
            stage,
            plan.stage
        )));
    }
    let epoch = ck
        .extra
        .get("epoch")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptCheckpoint(format!("{} lacks its epoch", checkpoint.display())))?
        as usize;
    let adam = ck.optimizer.ok_or_else(|| {
        Error::CorruptCheckpoint(format!("{} lacks optimizer state", checkpoint.display()))
    })?;
    let mut model = ck.model;
    let log = run_epochs(&mut model, data, plan, cfg, run, epoch, adam)?;
    Ok((model, log))
}

/// Runs `schedule` in order on one model, each stage with a fresh optimizer,
/// and writes `final.ckpt` into the run directory.
pub fn train_full<T: Scalar>(
    model: &mut ModelBundle<T>,
    data: &dyn SceneSource<T>,
    schedule: &[StagePlan],
    cfg: &TrainConfig,
    run: &RunDir,
) -> Result<Vec<StageLog>> {
    if let Some(i) = schedule.iter().position(|p| p.stage == Stage::One) {
        if schedule[..i].iter().any(|p| p.stage != Stage::One) {
            return Err(Error::Usage("stage1 must precede the stage-2 plans".into()));
        }
    }
    let mut logs = Vec::with_capacity(schedule.len());
    for plan in schedule {
        logs.push(run_stage(model, data, plan, cfg, run)?);
    }
    if let Some(dir) = &run.0 {
        if !schedule.is_empty() {
            let extra = serde_json::json!({
                "schedule": serde_json::to_value(schedule)?,
                "train": serde_json::to_value(cfg)?,
            });
            save_checkpoint(&dir.join("final.ckpt"), model, None, &extra)?;
        }
    }
    Ok(logs)
}
