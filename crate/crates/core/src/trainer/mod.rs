//! Training driver: narration-only initial teacher, fixed-label burn-in,
//! then periodic teacher refresh.

mod optim;
mod state;

pub use optim::{cosine_lr, grad_norm, optimizer_step, AdamWConfig, OptimizerState};
pub use state::{latest_checkpoint, load_checkpoint, save_checkpoint, RunCheckpoint, RunState};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{batch_iter, mix_seed, BatchConfig, Corpus, LabelSource, SampleOptions};
use crate::encoder::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::evalkit::{align_corpus, corpus_step_r_at_1, StepMatrix};
use crate::objective::{loss_and_gradients, LossConfig, LossReport};
use crate::pseudolabel::{burn_in_labels, curriculum_step, teacher_labels, PseudoConfig, PseudoLabelStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Narration-only epochs for the model that produces the first labels.
    pub teacher_pre_epochs: usize,
    pub max_frames: usize,
    pub loss: LossConfig,
    pub pseudo: PseudoConfig,
    /// Evaluate on the held-out corpus every this many epochs; 0 = never.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 8,
            base_lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: 1.0,
            seed: 0,
            teacher_pre_epochs: 5,
            max_frames: 1024,
            loss: LossConfig::default(),
            pseudo: PseudoConfig::default(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.epochs < self.pseudo.burn_in_epochs {
            return Err(Error::Config(format!(
                "epochs = {} is shorter than the {} burn-in epochs",
                self.epochs, self.pseudo.burn_in_epochs
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be > 0".into()));
        }
        if self.batch_size == 0 || self.max_frames == 0 {
            return Err(Error::Config("batch_size and max_frames must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip_norm >= 0.0) {
            return Err(Error::Config("eps must be > 0; weight_decay and grad_clip_norm >= 0".into()));
        }
        self.loss.validate()?;
        self.pseudo.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip_norm: self.grad_clip_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Narration-only model that labels steps for burn-in.
    InitialTeacher,
    Student,
}

/// One line of the training log, written at the end of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    /// Optimizer steps taken in this phase so far.
    pub step: usize,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    /// Batch means over the epoch.
    pub loss_total: f64,
    pub loss_nv: f64,
    pub loss_sv: f64,
    pub kept_pseudo_fraction: Option<f64>,
    pub teacher_refreshed: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub eval: BTreeMap<String, f64>,
}

/// Where and how a run persists itself.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Checkpoints go to `<out_dir>/checkpoints/epoch_NNN/`, the log to
    /// `<out_dir>/train_log.jsonl`.
    pub out_dir: Option<PathBuf>,
    /// Continue from the newest checkpoint in `out_dir`, if any.
    pub resume: bool,
    pub eval_corpus: Option<&'a Corpus>,
    /// Echo each log line to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: ModelParams,
    pub teacher: Option<ModelParams>,
    pub labels: PseudoLabelStore,
    pub history: Vec<EpochLog>,
}

struct Logger {
    file: Option<fs::File>,
    verbose: bool,
}

impl Logger {
    fn open(out_dir: Option<&Path>, append: bool, verbose: bool) -> Result<Self> {
        let file = match out_dir {
            Some(dir) => {
                let path = dir.join("train_log.jsonl");
                let f = fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(append)
                    .truncate(!append)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some(f)
            }
            None => None,
        };
        Ok(Logger { file, verbose })
    }

    fn write(&mut self, entry: &EpochLog) -> Result<()> {
        let line = serde_json::to_string(entry)?;
        if self.verbose {
            eprintln!("{line}");
        }
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}").map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct EpochTotals {
    total: f64,
    nv: f64,
    sv: f64,
    batches: usize,
}

impl EpochTotals {
    fn add(&mut self, r: &LossReport) {
        self.total += r.total;
        self.nv += r.narration;
        self.sv += r.step;
        self.batches += 1;
    }

    fn mean(&self) -> (f64, f64, f64) {
        let n = self.batches.max(1) as f64;
        (self.total / n, self.nv / n, self.sv / n)
    }
}

struct EpochRun<'a> {
    corpus: &'a Corpus,
    assignment: Option<&'a BTreeMap<String, String>>,
    options: SampleOptions,
    labels: LabelSource<'a>,
    loss: LossConfig,
    shuffle_seed: u64,
    total_steps: usize,
}

fn run_epoch(
    run: &EpochRun<'_>,
    cfg: &TrainConfig,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    epoch: usize,
    step: &mut usize,
) -> Result<(EpochTotals, f64)> {
    let batches = batch_iter(
        run.corpus,
        BatchConfig {
            batch_size: cfg.batch_size,
            max_frames: cfg.max_frames.min(params.config().max_frames),
            shuffle_seed: Some(run.shuffle_seed),
            options: run.options,
        },
        run.labels,
        run.assignment,
    )?;
    let xi = params.config().xi;
    let adamw = cfg.adamw();
    let mut totals = EpochTotals::default();
    let mut lr = 0.0;
    for batch in batches {
        let (report, grads) = loss_and_gradients(params, &batch, &run.loss, xi)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged { epoch, step: *step });
        }
        lr = cosine_lr(*step, run.total_steps, cfg.base_lr);
        optimizer_step(params, &grads, opt, lr, &adamw)?;
        *step += 1;
        totals.add(&report);
    }
    if !params.all_finite() {
        return Err(Error::Diverged { epoch, step: *step });
    }
    Ok((totals, lr))
}

fn evaluate(eval: Option<&Corpus>, params: &ModelParams, cfg: &TrainConfig, epoch: usize) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let Some(corpus) = eval else { return Ok(out) };
    if cfg.eval_every == 0 || !(epoch + 1).is_multiple_of(cfg.eval_every) || corpus.videos.is_empty() {
        return Ok(out);
    }
    let aligned = align_corpus(corpus, params, None, cfg.max_frames, false)?;
    let r = corpus_step_r_at_1(corpus, &aligned, StepMatrix::Direct)?;
    out.insert("step_r1_direct".into(), r.micro.value);
    out.insert("step_r1_direct_macro".into(), r.macro_avg);
    Ok(out)
}

fn train_initial_teacher(
    corpus: &Corpus,
    assignment: Option<&BTreeMap<String, String>>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    logger: &mut Logger,
    history: &mut Vec<EpochLog>,
) -> Result<ModelParams> {
    let mut params = ModelParams::init(model, mix_seed(cfg.seed, 1))?;
    let mut opt = OptimizerState::new(&params);
    let per_epoch = corpus.videos.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    for epoch in 0..cfg.teacher_pre_epochs {
        let run = EpochRun {
            corpus,
            assignment,
            options: SampleOptions {
                narrations: true,
                steps: false,
            },
            labels: LabelSource::AsrTimestamps,
            loss: LossConfig {
                lambda_sv: 0.0,
                ..cfg.loss
            },
            shuffle_seed: mix_seed(cfg.seed, 1000 + epoch as u64),
            total_steps: per_epoch * cfg.teacher_pre_epochs,
        };
        let (totals, lr) = run_epoch(&run, cfg, &mut params, &mut opt, epoch, &mut step)?;
        let (total, nv, sv) = totals.mean();
        let entry = EpochLog {
            phase: Phase::InitialTeacher,
            epoch,
            step,
            lr,
            loss_total: total,
            loss_nv: nv,
            loss_sv: sv,
            kept_pseudo_fraction: None,
            teacher_refreshed: false,
            eval: BTreeMap::new(),
        };
        logger.write(&entry)?;
        history.push(entry);
    }
    Ok(params)
}

/// Trains a student on `corpus`. Deterministic for a given config: every
/// random draw is derived from `cfg.seed`, and gradient reductions run in
/// a fixed order.
pub fn train(
    corpus: &Corpus,
    assignment: Option<&BTreeMap<String, String>>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    opts: &RunOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let student = ModelParams::init(model, mix_seed(cfg.seed, 2))?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            student,
            teacher: None,
            labels: PseudoLabelStore::default(),
            history: Vec::new(),
        });
    }
    if corpus.videos.is_empty() {
        return Err(Error::Validation("cannot train on an empty corpus".into()));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let resumed = match (&opts.out_dir, opts.resume) {
        (Some(dir), true) => latest_checkpoint(dir)?.map(|p| load_checkpoint(&p)).transpose()?,
        _ => None,
    };
    let mut logger = Logger::open(opts.out_dir.as_deref(), resumed.is_some(), opts.verbose)?;
    let mut history = Vec::new();

    let per_epoch = corpus.videos.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let (mut student, mut opt, mut teacher, mut labels, start_epoch, mut step) = match resumed {
        Some(ck) => {
            if ck.state.epochs_completed > cfg.epochs {
                return Err(Error::Config(format!(
                    "checkpoint has {} epochs, run is configured for {}",
                    ck.state.epochs_completed, cfg.epochs
                )));
            }
            (ck.student, ck.optimizer, ck.teacher, ck.labels, ck.state.epochs_completed, ck.state.step)
        }
        None => {
            let initial = train_initial_teacher(corpus, assignment, model, cfg, &mut logger, &mut history)?;
            let labels = burn_in_labels(corpus, &initial, &cfg.pseudo, cfg.max_frames, assignment)?;
            if let Some(dir) = &opts.out_dir {
                labels.save_jsonl(&dir.join("initial_labels.jsonl"))?;
            }
            let opt = OptimizerState::new(&student);
            (student, opt, None, labels, 0, 0)
        }
    };

    for epoch in start_epoch..cfg.epochs {
        let (next_teacher, refresh) = curriculum_step(epoch, &cfg.pseudo, &student, teacher.take());
        teacher = next_teacher;
        if refresh {
            let t = teacher.as_ref().expect("refresh always sets a teacher");
            labels = teacher_labels(corpus, t, &cfg.pseudo, cfg.max_frames, assignment)?;
        }
        let run = EpochRun {
            corpus,
            assignment,
            options: SampleOptions::default(),
            labels: LabelSource::ProvidedPseudo(&labels),
            loss: cfg.loss,
            shuffle_seed: mix_seed(cfg.seed, 2000 + epoch as u64),
            total_steps,
        };
        let (totals, lr) = run_epoch(&run, cfg, &mut student, &mut opt, epoch, &mut step)?;
        let (total, nv, sv) = totals.mean();
        let entry = EpochLog {
            phase: Phase::Student,
            epoch,
            step,
            lr,
            loss_total: total,
            loss_nv: nv,
            loss_sv: sv,
            kept_pseudo_fraction: Some(labels.kept_fraction()),
            teacher_refreshed: refresh,
            eval: evaluate(opts.eval_corpus, &student, cfg, epoch)?,
        };
        if let Some(dir) = &opts.out_dir {
            let ck = RunCheckpoint {
                state: RunState {
                    epochs_completed: epoch + 1,
                    step,
                    seed: cfg.seed,
                },
                student: student.clone(),
                teacher: teacher.clone(),
                optimizer: opt.clone(),
                labels: labels.clone(),
            };
            save_checkpoint(dir, &ck)?;
        }
        logger.write(&entry)?;
        history.push(entry);
    }
    Ok(TrainOutcome {
        student,
        teacher,
        labels,
        history,
    })
}
