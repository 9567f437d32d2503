//! Command-line front end: corpus generation, training, evaluation and
//! inference.

pub mod config;
pub mod emit;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use stepground::corpus::{generate_synthetic, read_corpus, write_corpus, Corpus};
use stepground::encoder::{load_params, save_params, ModelParams};
use stepground::evalkit::{
    align_corpus, corpus_alignability_auc, corpus_article_recall, corpus_narration_r_at_1, corpus_step_r_at_1,
    detect_segments, format_table, read_predictions, recall_at_k_iou, step_r_at_1, write_predictions, MetricReport,
    Prediction, PredictionTarget, StepMatrix,
};
use stepground::taskselect::{assign_articles, PrecomputedEmbedder, TaskStrategy, TextEmbedder, TrigramEmbedder};
use stepground::trainer::{train, RunOptions};
use stepground::{Error, Mat};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;
pub const EXIT_DATA: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn protocol(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_PROTOCOL,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Protocol(_) | Error::Contract(_) | Error::Shape(_) => EXIT_PROTOCOL,
            Error::Io { .. } | Error::Format { .. } | Error::Validation(_) => EXIT_DATA,
            _ => EXIT_FAILURE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "stepground", version, about = "Ground instructional steps in narrated videos")]
pub struct Cli {
    /// Base directory for every relative path argument.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StrategyArg {
    Metadata,
    Top1,
    RandomTop5,
}

impl From<StrategyArg> for TaskStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Metadata => TaskStrategy::Metadata,
            StrategyArg::Top1 => TaskStrategy::Top1,
            StrategyArg::RandomTop5 => TaskStrategy::RandomTop5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    StepR1,
    ArticleRecall,
    NarrationR1,
    Auc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Csv,
    Heatmap,
    Segments,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "metadata")]
        task_strategy: StrategyArg,
        /// Precomputed text embeddings for task voting (JSON lines).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Overrides the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the newest checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint (or external predictions) on an annotated corpus.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// JSON-lines predictions to score instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// With narrations, steps are grounded with the fused matrix;
        /// without, with the direct matrix and no narration tokens.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        use_narrations: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; defaults to `eval_<protocol>_<with|without>_narrations.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write alignment matrices and detected segments for one video.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, num_args = 1.., default_values_t = [Emit::Csv, Emit::Heatmap, Emit::Segments])]
        emit: Vec<Emit>,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        use_narrations: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn load_config(workdir: &Path, path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(&resolve(workdir, p)),
        None => Ok(RunConfig::default()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let wd = &cli.workdir;
    match &cli.command {
        Command::Generate { config, out, seed } => {
            let mut cfg = load_config(wd, config.as_ref())?;
            if let Some(s) = seed {
                cfg.synth.seed = *s;
            }
            cmd_generate(&cfg, &resolve(wd, out))
        }
        Command::Train {
            config,
            corpus,
            out,
            task_strategy,
            embeddings,
            seed,
            resume,
        } => {
            let mut cfg = load_config(wd, config.as_ref())?;
            if let Some(s) = seed {
                cfg.train.seed = *s;
            }
            let embedder: Box<dyn TextEmbedder> = match embeddings {
                Some(p) => Box::new(PrecomputedEmbedder::load(&resolve(wd, p))?),
                None => Box::new(TrigramEmbedder),
            };
            cmd_train(
                &cfg,
                &resolve(wd, corpus),
                &resolve(wd, out),
                (*task_strategy).into(),
                embedder.as_ref(),
                *resume,
            )
        }
        Command::Eval {
            checkpoint,
            predictions,
            corpus,
            protocol,
            use_narrations,
            config,
            out,
        } => {
            let cfg = load_config(wd, config.as_ref())?;
            let source = match (checkpoint, predictions) {
                (Some(c), _) => Scored::Checkpoint(resolve(wd, c)),
                (None, Some(p)) => Scored::Predictions(resolve(wd, p)),
                (None, None) => return Err(CliError::config("either --checkpoint or --predictions is required")),
            };
            let default_out = format!(
                "eval_{}_{}_narrations.json",
                protocol_name(*protocol),
                if *use_narrations { "with" } else { "without" }
            );
            let out = resolve(wd, out.as_deref().unwrap_or(Path::new(&default_out)));
            cmd_eval(&cfg, &source, &resolve(wd, corpus), *protocol, *use_narrations, &out)
        }
        Command::Infer {
            checkpoint,
            corpus,
            video,
            out,
            emit,
            use_narrations,
            config,
        } => {
            let cfg = load_config(wd, config.as_ref())?;
            cmd_infer(
                &cfg,
                &resolve(wd, checkpoint),
                &resolve(wd, corpus),
                video,
                &resolve(wd, out),
                emit,
                *use_narrations,
            )
        }
    }
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let corpus = generate_synthetic(&cfg.synth)?;
    write_corpus(&corpus, out)?;
    print_stats(&corpus);
    Ok(())
}

fn print_stats(corpus: &Corpus) {
    let videos = corpus.videos.len().max(1) as f64;
    let steps: usize = corpus
        .videos
        .iter()
        .map(|v| v.gt_step_segments.as_ref().map_or(0, |g| g.len()))
        .sum();
    let frames: usize = corpus.videos.iter().map(|v| v.num_frames()).sum();
    let narrations: usize = corpus.videos.iter().map(|v| v.num_narrations()).sum();
    println!("videos               {}", corpus.videos.len());
    println!("tasks                {}", corpus.articles.len());
    println!("mean frames/video    {:.1}", frames as f64 / videos);
    println!("mean narrations      {:.2}", narrations as f64 / videos);
    println!("mean steps/video     {:.2}", steps as f64 / videos);
    println!("step coverage        {:.3}", corpus.mean_step_coverage());
}

#[derive(Serialize)]
struct AssignmentFile<'a> {
    strategy: TaskStrategy,
    agreement_with_metadata: Option<f64>,
    assignment: &'a BTreeMap<String, String>,
}

pub fn cmd_train(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out: &Path,
    strategy: TaskStrategy,
    embedder: &dyn TextEmbedder,
    resume: bool,
) -> Result<(), CliError> {
    let corpus = read_corpus(corpus_dir)?;
    let model = cfg.model_for(corpus.dims)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let assignment = assign_articles(&corpus, strategy, embedder, cfg.train.seed)?;
    let with_meta: Vec<_> = corpus.videos.iter().filter_map(|v| Some((&v.id, v.task_id.as_ref()?))).collect();
    let agreement = (strategy != TaskStrategy::Metadata && !with_meta.is_empty()).then(|| {
        let same = with_meta.iter().filter(|(id, t)| assignment.get(*id) == Some(*t)).count();
        same as f64 / with_meta.len() as f64
    });
    if let Some(a) = agreement {
        println!("task assignment agreement with metadata: {a:.4}");
    }
    write_json(
        &out.join("assignment.json"),
        &AssignmentFile {
            strategy,
            agreement_with_metadata: agreement,
            assignment: &assignment,
        },
    )?;
    write_json(&out.join("config.json"), cfg)?;

    let (train_set, held) = corpus.split_holdout(cfg.holdout_every);
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        resume,
        eval_corpus: (!held.videos.is_empty()).then_some(&held),
        verbose: true,
    };
    let outcome = train(&train_set, Some(&assignment), &model, &cfg.train, &opts)?;
    save_params(&outcome.student, &out.join("student"))?;
    if let Some(t) = &outcome.teacher {
        save_params(t, &out.join("teacher"))?;
    }
    if let Some(last) = outcome.history.last() {
        println!(
            "finished epoch {} ({:?}): loss {:.6}, kept pseudo-labels {:.3}",
            last.epoch,
            last.phase,
            last.loss_total,
            last.kept_pseudo_fraction.unwrap_or(0.0)
        );
    } else {
        println!("nothing to train");
    }
    println!("student written to {}", out.join("student.bin").display());
    Ok(())
}

/// Accepts a parameter stem, a `.bin`/`.json` file of one, or a directory
/// holding `student.*`.
pub fn load_checkpoint_params(path: &Path) -> Result<ModelParams, CliError> {
    let stem = if path.is_dir() {
        path.join("student")
    } else if matches!(path.extension().and_then(|e| e.to_str()), Some("bin" | "json")) {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    Ok(load_params(&stem)?)
}

pub enum Scored {
    Checkpoint(PathBuf),
    Predictions(PathBuf),
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::StepR1 => "step_r1",
        Protocol::ArticleRecall => "article_recall",
        Protocol::NarrationR1 => "narration_r1",
        Protocol::Auc => "auc",
    }
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub protocol: Protocol,
    pub use_narrations: bool,
    pub reports: Vec<MetricReport>,
    /// Values that are not hit counts (macro averages, ROC-AUC).
    pub values: BTreeMap<String, f64>,
}

fn step_matrix(use_narrations: bool) -> StepMatrix {
    if use_narrations {
        StepMatrix::Fused
    } else {
        StepMatrix::Direct
    }
}

pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    params: &ModelParams,
    corpus: &Corpus,
    protocol: Protocol,
    use_narrations: bool,
) -> Result<EvalOutput, CliError> {
    let mut reports = Vec::new();
    let mut values = BTreeMap::new();
    let max_frames = cfg.eval.max_frames;
    match protocol {
        Protocol::StepR1 => {
            let aligned = align_corpus(corpus, params, None, max_frames, use_narrations)?;
            let r = corpus_step_r_at_1(corpus, &aligned, step_matrix(use_narrations))?;
            values.insert("macro_average".into(), r.macro_avg);
            reports.push(r.micro);
        }
        Protocol::ArticleRecall => {
            let aligned = align_corpus(corpus, params, None, max_frames, use_narrations)?;
            reports = corpus_article_recall(corpus, &aligned, step_matrix(use_narrations), &cfg.eval)?;
        }
        Protocol::NarrationR1 => {
            if !use_narrations {
                return Err(CliError::protocol("narration_r1 needs narrations in the input"));
            }
            let aligned = align_corpus(corpus, params, None, max_frames, true)?;
            reports.push(corpus_narration_r_at_1(corpus, &aligned)?);
        }
        Protocol::Auc => {
            values.insert("alignability_auc".into(), corpus_alignability_auc(corpus, params, max_frames)?);
        }
    }
    Ok(EvalOutput {
        protocol,
        use_narrations,
        reports,
        values,
    })
}

fn evaluate_predictions(
    cfg: &RunConfig,
    preds: &[Prediction],
    corpus: &Corpus,
    protocol: Protocol,
    use_narrations: bool,
) -> Result<EvalOutput, CliError> {
    let mut rows: BTreeMap<&str, BTreeMap<usize, &Prediction>> = BTreeMap::new();
    for p in preds {
        if let PredictionTarget::Step(s) = p.target {
            rows.entry(p.video_id.as_str()).or_default().insert(s, p);
        }
    }
    let mut total = MetricReport::new("step_r1", 0, 0);
    let mut pooled: Vec<MetricReport> = Vec::new();
    for video in &corpus.videos {
        let gt = video
            .gt_step_segments
            .as_ref()
            .ok_or_else(|| CliError::protocol(format!("video `{}` has no ground truth", video.id)))?;
        let empty = BTreeMap::new();
        let video_rows = rows.get(video.id.as_str()).unwrap_or(&empty);
        match protocol {
            Protocol::StepR1 => {
                let width = video.num_frames();
                let s_max = gt.keys().next_back().map_or(0, |s| s + 1);
                let mut m = Mat::filled(s_max, width, f64::NEG_INFINITY);
                for (&s, p) in video_rows.iter().filter(|(s, _)| **s < s_max) {
                    let row = p
                        .row
                        .as_ref()
                        .ok_or_else(|| CliError::protocol("step_r1 needs score rows, not segments"))?;
                    if row.len() != width {
                        return Err(CliError::protocol(format!(
                            "video `{}` step {s}: row has {} values for {width} frames",
                            video.id,
                            row.len()
                        )));
                    }
                    m.row_mut(s).copy_from_slice(row);
                }
                total.merge(&step_r_at_1(&m, gt)?);
            }
            Protocol::ArticleRecall => {
                let mut dets = BTreeMap::new();
                for (&s, p) in video_rows {
                    let segs = match (&p.segments, &p.row) {
                        (Some(segs), _) => segs.clone(),
                        (None, Some(row)) => detect_segments(&Mat::from_vec(1, row.len(), row.clone()), &cfg.eval)
                            .remove(&0)
                            .unwrap_or_default(),
                        (None, None) => Vec::new(),
                    };
                    dets.insert(s, segs);
                }
                let mut reports = Vec::new();
                for &k in &cfg.eval.recall_k {
                    reports.extend(recall_at_k_iou(&dets, gt, k, &cfg.eval.iou_thresholds)?);
                }
                if pooled.is_empty() {
                    pooled = reports;
                } else {
                    pooled.iter_mut().zip(&reports).for_each(|(a, b)| a.merge(b));
                }
            }
            _ => {
                return Err(CliError::protocol(format!(
                    "{} cannot be computed from predictions",
                    protocol_name(protocol)
                )))
            }
        }
    }
    let reports = if protocol == Protocol::StepR1 { vec![total] } else { pooled };
    Ok(EvalOutput {
        protocol,
        use_narrations,
        reports,
        values: BTreeMap::new(),
    })
}

pub fn cmd_eval(
    cfg: &RunConfig,
    source: &Scored,
    corpus_dir: &Path,
    protocol: Protocol,
    use_narrations: bool,
    out: &Path,
) -> Result<(), CliError> {
    let corpus = read_corpus(corpus_dir)?;
    let output = match source {
        Scored::Checkpoint(p) => {
            let params = load_checkpoint_params(p)?;
            if params.config().dims() != corpus.dims {
                return Err(CliError::protocol(format!(
                    "checkpoint expects dims {:?}, corpus has {:?}",
                    params.config().dims(),
                    corpus.dims
                )));
            }
            evaluate_checkpoint(cfg, &params, &corpus, protocol, use_narrations)?
        }
        Scored::Predictions(p) => evaluate_predictions(cfg, &read_predictions(p)?, &corpus, protocol, use_narrations)?,
    };
    print!("{}", format_table(&output.reports));
    for (k, v) in &output.values {
        println!("{k:<24} {v:.4}");
    }
    write_json(out, &output)
}

pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    corpus_dir: &Path,
    video_id: &str,
    out: &Path,
    emit: &[Emit],
    use_narrations: bool,
) -> Result<(), CliError> {
    let corpus = read_corpus(corpus_dir)?;
    let video = corpus
        .video(video_id)
        .ok_or_else(|| CliError::data(format!("unknown video id `{video_id}`")))?;
    let params = load_checkpoint_params(checkpoint)?;
    let single = Corpus {
        videos: vec![video.clone()],
        articles: corpus.articles.clone(),
        dims: corpus.dims,
    };
    let aligned = align_corpus(&single, &params, None, cfg.eval.max_frames, use_narrations)?;
    let al = &aligned[0].alignments;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;

    let mut matrices: Vec<(&str, &Mat)> = vec![("sv", &al.sv), ("fused", &al.fused)];
    if use_narrations {
        matrices.push(("nv", &al.nv));
        if let Some(snv) = &al.snv {
            matrices.push(("snv", snv));
        }
    }
    for e in emit {
        match e {
            Emit::Csv => {
                for (name, m) in &matrices {
                    let p = out.join(format!("{video_id}_{name}.csv"));
                    fs::write(&p, emit::matrix_to_csv(m)).map_err(|e| io_error(&p, e))?;
                }
            }
            Emit::Heatmap => {
                for (name, m) in &matrices {
                    let p = out.join(format!("{video_id}_{name}.pgm"));
                    fs::write(&p, emit::matrix_to_pgm(m)).map_err(|e| io_error(&p, e))?;
                }
            }
            Emit::Segments => {
                let m = step_matrix(use_narrations).pick(al)?;
                let preds: Vec<Prediction> = detect_segments(m, &cfg.eval)
                    .into_iter()
                    .map(|(s, segs)| Prediction {
                        video_id: video_id.to_string(),
                        target: PredictionTarget::Step(s),
                        row: None,
                        segments: Some(segs),
                    })
                    .collect();
                write_predictions(&out.join(format!("{video_id}_segments.jsonl")), &preds)?;
            }
        }
    }
    println!(
        "{video_id}: {} frames, {} steps, {} narrations -> {}",
        aligned[0].frames,
        al.sv.rows(),
        al.nv.rows(),
        out.display()
    );
    Ok(())
}
